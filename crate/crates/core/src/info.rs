//! Brute-force entropies of small discrete joints over `(X, R, S)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-negative weights over a dense `X × R × S` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint3 {
    pub dims: [usize; 3],
    pub weights: Vec<f64>,
}

impl Joint3 {
    pub fn new(dims: [usize; 3]) -> Self {
        Self {
            dims,
            weights: vec![0.0; dims.iter().product()],
        }
    }

    fn index(&self, x: usize, r: usize, s: usize) -> usize {
        (x * self.dims[1] + r) * self.dims[2] + s
    }

    pub fn add(&mut self, x: usize, r: usize, s: usize, w: f64) {
        let i = self.index(x, r, s);
        self.weights[i] += w;
    }

    pub fn get(&self, x: usize, r: usize, s: usize) -> f64 {
        self.weights[self.index(x, r, s)]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Entropy (nats) of the marginal over the axes flagged in `keep`.
    pub fn marginal_entropy(&self, keep: [bool; 3]) -> f64 {
        let total = self.total();
        let dim = |a: usize| if keep[a] { self.dims[a] } else { 1 };
        let mut m = vec![0.0; dim(0) * dim(1) * dim(2)];
        for x in 0..self.dims[0] {
            for r in 0..self.dims[1] {
                for s in 0..self.dims[2] {
                    let k = |a: usize, v: usize| if keep[a] { v } else { 0 };
                    let i = (k(0, x) * dim(1) + k(1, r)) * dim(2) + k(2, s);
                    m[i] += self.get(x, r, s);
                }
            }
        }
        -m.iter()
            .filter(|w| **w > 0.0)
            .map(|w| {
                let p = w / total;
                p * p.ln()
            })
            .sum::<f64>()
    }
}

/// Conditional entropies of `S` and the conditional mutual information,
/// computed along two independent routes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyGap {
    /// `H(S|X)`, nats.
    pub h_s_x: f64,
    /// `H(S|X,R)`, nats.
    pub h_s_xr: f64,
    /// `I(S;R|X)` summed directly over the joint.
    pub cmi: f64,
}

impl EntropyGap {
    pub fn gap(&self) -> f64 {
        self.h_s_x - self.h_s_xr
    }

    /// `|gap − I(S;R|X)|`.
    pub fn discrepancy(&self) -> f64 {
        (self.gap() - self.cmi).abs()
    }
}

pub fn entropy_gap(j: &Joint3) -> Result<EntropyGap> {
    let total = j.total();
    if !(total > 0.0) || j.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid("entropy tally is empty or has invalid weights"));
    }
    // Route 1: differences of joint entropies.
    let h_x = j.marginal_entropy([true, false, false]);
    let h_xs = j.marginal_entropy([true, false, true]);
    let h_xr = j.marginal_entropy([true, true, false]);
    let h_xrs = j.marginal_entropy([true, true, true]);

    // Route 2: direct sum of p(x,r,s)·log[p(x,r,s)p(x) / (p(x,r)p(x,s))].
    let [nx, nr, ns] = j.dims;
    let mut cmi = 0.0;
    for x in 0..nx {
        let px: f64 = (0..nr).flat_map(|r| (0..ns).map(move |s| (r, s))).map(|(r, s)| j.get(x, r, s)).sum();
        if px == 0.0 {
            continue;
        }
        for r in 0..nr {
            let pxr: f64 = (0..ns).map(|s| j.get(x, r, s)).sum();
            for s in 0..ns {
                let p = j.get(x, r, s);
                if p == 0.0 {
                    continue;
                }
                let pxs: f64 = (0..nr).map(|rr| j.get(x, rr, s)).sum();
                cmi += p / total * (p * px / (pxr * pxs)).ln();
            }
        }
    }
    Ok(EntropyGap {
        h_s_x: h_xs - h_x,
        h_s_xr: h_xrs - h_xr,
        cmi,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn independence_gives_zero_gap() {
        let mut j = Joint3::new([2, 3, 4]);
        for x in 0..2 {
            for r in 0..3 {
                for s in 0..4 {
                    j.add(x, r, s, (x + 1) as f64 * (r + 1) as f64 * (s + 2) as f64);
                }
            }
        }
        let e = entropy_gap(&j).unwrap();
        assert!(e.gap().abs() < 1e-12 && e.cmi.abs() < 1e-12);
    }

    #[test]
    fn determinism_gives_zero_residual_entropy() {
        let mut j = Joint3::new([2, 4, 4]);
        for x in 0..2 {
            for r in 0..4 {
                j.add(x, r, (r + x) % 4, 1.0);
            }
        }
        let e = entropy_gap(&j).unwrap();
        assert_eq!(e.h_s_xr, 0.0);
        assert!((e.h_s_x - 4f64.ln()).abs() < 1e-12);
        assert!(e.discrepancy() < 1e-12);
    }

    #[test]
    fn random_joints_satisfy_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut j = Joint3::new([4, 4, 4]);
            for w in &mut j.weights {
                *w = if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() };
            }
            assert!(entropy_gap(&j).unwrap().discrepancy() < 1e-9);
        }
        assert!(entropy_gap(&Joint3::new([2, 2, 2])).is_err());
    }
}
