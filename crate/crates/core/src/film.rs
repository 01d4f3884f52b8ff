//! Feature-wise affine modulation of reconstruction features by reasoning
//! embeddings, and the 5 Hz → 12.5 Hz frame alignment.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_mlp2, mlp2};
use crate::params::{ParamStore, Session};
use crate::tensor::{Array, NodeId};

/// Reasoning frame feeding reconstruction frame `j`: `⌊2j/5⌋`, clamped to the
/// last reasoning frame. Consecutive reasoning frames cover 3, 2, 3, 2, …
/// reconstruction frames.
pub fn upsample_index(n_recon: usize, n_reason: usize) -> Vec<usize> {
    (0..n_recon)
        .map(|j| (2 * j / 5).min(n_reason.saturating_sub(1)))
        .collect()
}

/// `γ(R̂), β(R̂)` as two-layer perceptrons with identity initialization.
#[derive(Clone, Debug)]
pub struct FilmModulator {
    pub prefix: String,
    pub d_cond: usize,
    pub d_feat: usize,
}

impl FilmModulator {
    /// Registers parameters so that `γ ≡ 1` and `β ≡ 0` at initialization.
    pub fn init(store: &mut ParamStore, prefix: &str, d_cond: usize, d_feat: usize, rng: &mut impl Rng) -> Self {
        for net in ["gamma", "beta"] {
            let p = format!("{prefix}.{net}");
            init_mlp2(store, &p, d_cond, d_feat, d_feat, rng);
            store.insert(format!("{p}.w2"), Array::zeros(&[d_feat, d_feat]));
        }
        store.insert(format!("{prefix}.gamma.b2"), Array::full(&[d_feat], 1.0));
        Self {
            prefix: prefix.to_string(),
            d_cond,
            d_feat,
        }
    }

    /// `γ(r) ⊙ s + β(r)` where `r` is already aligned to the rows of `s`.
    pub fn modulate(&self, sess: &mut Session, s: NodeId, r: NodeId) -> Result<NodeId> {
        let (ss, rs) = (sess.g.shape(s).to_vec(), sess.g.shape(r).to_vec());
        if ss.len() != 2 || ss[1] != self.d_feat || rs.len() != 2 || rs[1] != self.d_cond || rs[0] != ss[0] {
            return Err(Error::Shape {
                op: "film",
                lhs: ss,
                rhs: rs,
            });
        }
        let gamma = mlp2(sess, r, &format!("{}.gamma", self.prefix))?;
        let beta = mlp2(sess, r, &format!("{}.beta", self.prefix))?;
        let scaled = sess.g.mul(gamma, s)?;
        sess.g.add(scaled, beta)
    }
}

/// Eq.-level modulation with explicit coefficients, for checks and examples.
pub fn film_apply(s: &Array, gamma: &Array, beta: &Array) -> Result<Array> {
    if gamma.shape() != s.shape() || beta.shape() != s.shape() {
        return Err(Error::Shape {
            op: "film",
            lhs: s.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let data = s
        .data()
        .iter()
        .zip(gamma.data())
        .zip(beta.data())
        .map(|((x, g), b)| g * x + b)
        .collect();
    Array::new(s.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    #[test]
    fn hand_evaluated_modulation() {
        let s = Array::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let g = Array::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let b = Array::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(film_apply(&s, &g, &b).unwrap().data(), &[7.0, 1.0]);
        let zero = Array::zeros(&[1, 2]);
        assert_eq!(film_apply(&s, &zero, &b).unwrap(), b);
    }

    #[test]
    fn identity_at_init() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(Precision::F64);
        let film = FilmModulator::init(&mut store, "film", 5, 3, &mut rng);
        let s_val = Array::randn(&[7, 3], 1.0, &mut rng);
        let r_val = Array::randn(&[7, 5], 1.0, &mut rng);
        let mut sess = Session::new(&store, Precision::F64, Trainable::Nothing);
        let s = sess.g.constant(s_val.clone());
        let r = sess.g.constant(r_val);
        let out = film.modulate(&mut sess, s, r).unwrap();
        assert_eq!(sess.g.value(out), &s_val);
    }

    #[test]
    fn upsample_pattern() {
        let a = upsample_index(13, 5);
        assert_eq!(a, vec![0, 0, 0, 1, 1, 2, 2, 2, 3, 3, 4, 4, 4]);
        for start in 0..20 {
            let idx = upsample_index(200, 100);
            let covered = idx.iter().filter(|&&i| i >= start && i < start + 5).count();
            assert!(covered == 12 || covered == 13);
        }
    }
}
