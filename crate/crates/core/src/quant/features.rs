use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::film::upsample_index;
use crate::tensor::Array;
use crate::vocab::frame_budget;

use super::INTERLEAVE;

/// Feature streams of one synthetic clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    /// Semantic stream at 25 Hz, `5 · n_reason` rows.
    pub h_reason: Array,
    /// Phone-like, music-like and environment streams at 12.5 Hz.
    pub h_ph: Array,
    pub h_mu: Array,
    pub h_env: Array,
}

impl ClipFeatures {
    pub fn n_reason(&self) -> usize {
        self.h_reason.rows() / INTERLEAVE
    }

    pub fn n_recon(&self) -> usize {
        self.h_ph.rows()
    }

    /// Elementwise sum of two aligned clips.
    pub fn mix(&self, other: &ClipFeatures) -> Result<ClipFeatures> {
        let add = |a: &Array, b: &Array| -> Result<Array> {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "mix",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Array::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            )
        };
        Ok(ClipFeatures {
            h_reason: add(&self.h_reason, &other.h_reason)?,
            h_ph: add(&self.h_ph, &other.h_ph)?,
            h_mu: add(&self.h_mu, &other.h_mu)?,
            h_env: add(&self.h_env, &other.h_env)?,
        })
    }

    /// Same shapes, all zeros.
    pub fn silence_like(&self) -> ClipFeatures {
        ClipFeatures {
            h_reason: Array::zeros(self.h_reason.shape()),
            h_ph: Array::zeros(self.h_ph.shape()),
            h_mu: Array::zeros(self.h_mu.shape()),
            h_env: Array::zeros(self.h_env.shape()),
        }
    }
}

/// Seeded generator of correlated feature streams.
///
/// Each reasoning frame carries a latent vector following an AR(1) walk. The
/// 25 Hz semantic stream and the phone stream are noisy linear readouts of
/// the latent of the frame they belong to; the music stream is an independent
/// AR(1) walk; the environment stream is `tanh(A·h_ph + B·h_mu)` plus noise.
#[derive(Clone, Debug)]
pub struct SyntheticFeatureBank {
    pub d_feat: usize,
    a_reason: Array,
    b_ph: Array,
    a_env: Array,
    b_env: Array,
    pub noise: f64,
}

fn matvec(m: &Array, x: &[f64]) -> Vec<f64> {
    let (r, c) = (m.rows(), m.cols());
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * m.data()[i * c + j]).sum())
        .collect()
}

impl SyntheticFeatureBank {
    pub fn new(seed: u64, d_feat: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d_feat as f64).sqrt();
        Self {
            d_feat,
            a_reason: Array::randn(&[d_feat, d_feat], s, &mut rng),
            b_ph: Array::randn(&[d_feat, d_feat], s, &mut rng),
            a_env: Array::randn(&[d_feat, d_feat], s, &mut rng),
            b_env: Array::randn(&[d_feat, d_feat], s, &mut rng),
            noise: 0.1,
        }
    }

    pub fn clip(&self, duration_s: f64, rng: &mut impl Rng) -> Result<ClipFeatures> {
        let (n_reason, n_recon) = frame_budget(duration_s)?;
        let n_reason = n_reason.max(1);
        let n_recon = n_recon.max(1);
        let d = self.d_feat;
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };

        let rho: f64 = 0.6;
        let mut latents = Vec::with_capacity(n_reason);
        let mut z = gauss(d);
        for _ in 0..n_reason {
            let e = gauss(d);
            z = z
                .iter()
                .zip(&e)
                .map(|(a, b)| rho * a + (1.0 - rho * rho).sqrt() * b)
                .collect();
            latents.push(z.clone());
        }

        let mut h_reason = Vec::with_capacity(n_reason * INTERLEAVE * d);
        for zi in &latents {
            let base = matvec(&self.a_reason, zi);
            for _ in 0..INTERLEAVE {
                let e = gauss(d);
                h_reason.extend(base.iter().zip(&e).map(|(b, n)| b + self.noise * n));
            }
        }

        let align = upsample_index(n_recon, n_reason);
        let mut h_ph = Vec::with_capacity(n_recon * d);
        for &i in &align {
            let base = matvec(&self.b_ph, &latents[i]);
            let e = gauss(d);
            h_ph.extend(base.iter().zip(&e).map(|(b, n)| b + self.noise * n));
        }

        let rho_mu: f64 = 0.9;
        let mut h_mu = Vec::with_capacity(n_recon * d);
        let mut m = gauss(d);
        for _ in 0..n_recon {
            let e = gauss(d);
            m = m
                .iter()
                .zip(&e)
                .map(|(a, b)| rho_mu * a + (1.0 - rho_mu * rho_mu).sqrt() * b)
                .collect();
            h_mu.extend_from_slice(&m);
        }

        let mut h_env = Vec::with_capacity(n_recon * d);
        for j in 0..n_recon {
            let a = matvec(&self.a_env, &h_ph[j * d..(j + 1) * d]);
            let b = matvec(&self.b_env, &h_mu[j * d..(j + 1) * d]);
            let e = gauss(d);
            h_env.extend((0..d).map(|c| (a[c] + b[c]).tanh() + self.noise * e[c]));
        }

        Ok(ClipFeatures {
            h_reason: Array::new(vec![n_reason * INTERLEAVE, d], h_reason)?,
            h_ph: Array::new(vec![n_recon, d], h_ph)?,
            h_mu: Array::new(vec![n_recon, d], h_mu)?,
            h_env: Array::new(vec![n_recon, d], h_env)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_and_determinism() {
        let bank = SyntheticFeatureBank::new(7, 8);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = bank.clip(4.0, &mut r1).unwrap();
        let b = SyntheticFeatureBank::new(7, 8).clip(4.0, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_reason(), 20);
        assert_eq!(a.h_reason.rows(), 100);
        assert_eq!(a.n_recon(), 50);
        assert_eq!(a.h_env.shape(), &[50, 8]);
    }

    #[test]
    fn mixing_with_silence_is_identity() {
        let bank = SyntheticFeatureBank::new(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = bank.clip(1.0, &mut rng).unwrap();
        assert_eq!(a.silence_like().mix(&a).unwrap(), a);
        let short = bank.clip(0.4, &mut rng).unwrap();
        assert!(a.mix(&short).is_err());
    }
}
