use rand::Rng;

use super::{dequantize, fit_rvq, rvq_quantize, vq_quantize, Codebook, QuantizationResult};
use crate::error::{Error, Result};
use crate::tensor::Array;
use crate::vocab::N_BOOKS;

/// Residual levels spent on the environment stream.
pub const ENV_LEVELS: usize = 6;

/// One book each for phone and music features, six residual books for
/// environment features: eight codes per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupQuantizer {
    pub ph: Codebook,
    pub mu: Codebook,
    pub env: Vec<Codebook>,
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub codes: Vec<[u32; N_BOOKS]>,
    pub ph: QuantizationResult,
    pub mu: QuantizationResult,
    pub env: QuantizationResult,
}

impl GroupResult {
    /// Codebook levels consumed by each group.
    pub fn levels(&self) -> (usize, usize, usize) {
        (self.ph.codes.len(), self.mu.codes.len(), self.env.codes.len())
    }
}

impl GroupQuantizer {
    pub fn random(n_codes: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            ph: Codebook::random(n_codes, d, 1.0, rng),
            mu: Codebook::random(n_codes, d, 1.0, rng),
            env: (0..ENV_LEVELS)
                .map(|l| Codebook::random(n_codes, d, 0.5f64.powi(l as i32), rng))
                .collect(),
        }
    }

    pub fn quantize(&self, h_ph: &Array, h_mu: &Array, h_env: &Array) -> Result<GroupResult> {
        if h_ph.rows() != h_mu.rows() || h_ph.rows() != h_env.rows() {
            return Err(Error::Shape {
                op: "groupwise-quantize",
                lhs: h_ph.shape().to_vec(),
                rhs: vec![h_mu.rows(), h_env.rows()],
            });
        }
        let ph = vq_quantize(h_ph, &self.ph)?;
        let mu = vq_quantize(h_mu, &self.mu)?;
        let env = rvq_quantize(h_env, &self.env, ENV_LEVELS)?;
        let codes = (0..h_ph.rows())
            .map(|f| {
                let mut c = [0u32; N_BOOKS];
                c[0] = ph.codes[0][f];
                c[1] = mu.codes[0][f];
                for l in 0..ENV_LEVELS {
                    c[2 + l] = env.codes[l][f];
                }
                c
            })
            .collect();
        Ok(GroupResult { codes, ph, mu, env })
    }

    /// Reconstructed `(h_ph, h_mu, h_env)` from eight-wide code rows.
    pub fn dequantize(&self, codes: &[[u32; N_BOOKS]]) -> Result<(Array, Array, Array)> {
        let col = |b: usize| vec![codes.iter().map(|c| c[b]).collect::<Vec<u32>>()];
        let ph = dequantize(&col(0), std::slice::from_ref(&self.ph))?;
        let mu = dequantize(&col(1), std::slice::from_ref(&self.mu))?;
        let env_codes: Vec<Vec<u32>> = (2..N_BOOKS).map(|b| col(b).remove(0)).collect();
        let env = dequantize(&env_codes, &self.env)?;
        Ok((ph, mu, env))
    }

    pub fn fit(&mut self, h_ph: &Array, h_mu: &Array, h_env: &Array, epochs: usize, rng: &mut impl Rng) -> Result<()> {
        fit_rvq(std::slice::from_mut(&mut self.ph), h_ph, epochs, 0.5, rng)?;
        fit_rvq(std::slice::from_mut(&mut self.mu), h_mu, epochs, 0.5, rng)?;
        fit_rvq(&mut self.env, h_env, epochs, 0.5, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn allocation_and_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let gq = GroupQuantizer::random(16, 4, &mut rng);
        let x = |rng: &mut rand_chacha::ChaCha8Rng| Array::randn(&[9, 4], 1.0, rng);
        let (a, b, c) = (x(&mut rng), x(&mut rng), x(&mut rng));
        let r = gq.quantize(&a, &b, &c).unwrap();
        assert_eq!(r.levels(), (1, 1, 6));
        assert_eq!(r.codes.len(), 9);
        let (pa, pb, pc) = gq.dequantize(&r.codes).unwrap();
        assert_eq!(pa, r.ph.quantized);
        assert_eq!(pb, r.mu.quantized);
        assert_eq!(pc, r.env.quantized);
        assert!(gq.quantize(&a, &b, &Array::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn constant_streams_quantize_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut gq = GroupQuantizer::random(4, 2, &mut rng);
        let v = [0.75, -1.5];
        for b in std::iter::once(&mut gq.ph)
            .chain(std::iter::once(&mut gq.mu))
            .chain(gq.env.iter_mut().take(1))
        {
            b.entries.data_mut()[2..4].copy_from_slice(&v);
        }
        let x = Array::from_rows(&[v.to_vec(), v.to_vec()]).unwrap();
        let r = gq.quantize(&x, &x, &x).unwrap();
        for res in [&r.ph, &r.mu, &r.env] {
            assert!(res.residuals.last().unwrap().data().iter().all(|v| *v == 0.0));
        }
    }
}
