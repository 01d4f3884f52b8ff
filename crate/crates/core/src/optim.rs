//! AdamW with global-norm clipping and a warmup-cosine schedule.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: HashMap<String, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            state: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.cfg.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let precision = store.precision();
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i] * scale;
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                data[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            precision.round_slice(data);
        }
        norm
    }
}

/// Linear warmup to `peak`, then cosine decay to `peak · floor` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    peak * (floor + (1.0 - floor) * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;

    #[test]
    fn minimizes_a_quadratic() {
        let mut st = ParamStore::new(Precision::F64);
        st.insert("x", Array::from_vec(vec![3.0, -2.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..500 {
            let x = st.get("x").unwrap().clone();
            let g = Array::from_vec(x.data().iter().map(|v| 2.0 * v).collect());
            opt.step(&mut st, &BTreeMap::from([("x".to_string(), g)]), 0.05);
        }
        assert!(st.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(0, 100, 10, 1.0, 0.1), 0.1);
        assert_eq!(cosine_lr(9, 100, 10, 1.0, 0.1), 1.0);
        assert!((cosine_lr(100, 100, 10, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(50, 100, 10, 1.0, 0.1) < 1.0);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut st = ParamStore::new(Precision::F64);
        st.insert("x", Array::from_vec(vec![0.0]));
        let mut opt = AdamW::new(AdamWConfig::default());
        let n = opt.step(&mut st, &BTreeMap::from([("x".to_string(), Array::from_vec(vec![100.0]))]), 0.1);
        assert_eq!(n, 100.0);
        assert!((st.get("x").unwrap().item() + 0.1).abs() < 1e-6);
    }
}
