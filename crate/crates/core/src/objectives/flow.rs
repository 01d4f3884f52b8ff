//! Conditional noise-prediction decoder on the linear path
//! `z_t = (1 − t)·z0 + t·ε`, sampled with classifier-free guidance.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, init_mlp2, linear, mlp2};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::{Array, NodeId, Precision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub d_latent: usize,
    /// Number of distinct condition codes; index `n_cond` is the null code.
    pub n_cond: usize,
    pub d_cond: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    pub n_time_freq: usize,
    pub cond_dropout: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_latent: 8,
            n_cond: 8,
            d_cond: 8,
            hidden: 64,
            n_blocks: 2,
            n_time_freq: 4,
            cond_dropout: 0.1,
        }
    }
}

/// `(1 − s)·v_uncond + s·v_cond`; equal to `v_cond` at `s = 1` and to
/// `v_uncond` at `s = 0` without rounding.
pub fn guided_velocity(v_uncond: f64, v_cond: f64, scale: f64) -> f64 {
    (1.0 - scale) * v_uncond + scale * v_cond
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowDecoder {
    pub cfg: FlowConfig,
}

impl FlowDecoder {
    pub fn new(cfg: FlowConfig) -> Self {
        Self { cfg }
    }

    pub fn null_cond(&self) -> usize {
        self.cfg.n_cond
    }

    fn n_features(&self) -> usize {
        1 + 2 * self.cfg.n_time_freq
    }

    pub fn init(&self, seed: u64, precision: Precision) -> ParamStore {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = ParamStore::new(precision);
        st.insert("flow.cond", Array::randn(&[c.n_cond + 1, c.d_cond], 1.0, &mut rng));
        init_linear(&mut st, "flow.in", c.d_latent + self.n_features() + c.d_cond, c.hidden, 1.0, &mut rng);
        st.insert("flow.in_b", Array::zeros(&[c.hidden]));
        for i in 0..c.n_blocks {
            init_mlp2(&mut st, &format!("flow.block.{i}"), c.hidden, 2 * c.hidden, c.hidden, &mut rng);
        }
        // Zero output layer: the untrained prediction is exactly 0.
        st.insert("flow.out", Array::zeros(&[c.hidden, c.d_latent]));
        st.insert("flow.out_b", Array::zeros(&[c.d_latent]));
        st
    }

    fn time_features(&self, t: &[f64]) -> Array {
        let f = self.n_features();
        let mut out = Vec::with_capacity(t.len() * f);
        for &ti in t {
            out.push(ti);
            for k in 1..=self.cfg.n_time_freq {
                let a = std::f64::consts::PI * k as f64 * ti;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
        Array::new(vec![t.len(), f], out).expect("non-empty batch")
    }

    /// Noise prediction for a batch of latents (`B × d_latent`).
    pub fn predict(&self, s: &mut Session, z: NodeId, t: &[f64], cond: &[usize]) -> Result<NodeId> {
        let rows = s.g.shape(z)[0];
        if t.len() != rows || cond.len() != rows {
            return Err(Error::Shape {
                op: "flow-predict",
                lhs: s.g.shape(z).to_vec(),
                rhs: vec![t.len(), cond.len()],
            });
        }
        if let Some(&c) = cond.iter().find(|&&c| c > self.cfg.n_cond) {
            return Err(Error::Index {
                what: "flow condition",
                index: c,
                size: self.cfg.n_cond + 1,
            });
        }
        let tf = s.g.constant(self.time_features(t));
        let table = s.p("flow.cond")?;
        let ce = s.g.embedding(table, cond)?;
        let x = s.g.concat(&[z, tf, ce], 1)?;
        let mut h = linear(s, x, "flow.in")?;
        let b = s.p("flow.in_b")?;
        h = s.g.add(h, b)?;
        for i in 0..self.cfg.n_blocks {
            let a = s.g.gelu(h)?;
            let u = mlp2(s, a, &format!("flow.block.{i}"))?;
            h = s.g.add(h, u)?;
        }
        let a = s.g.gelu(h)?;
        let o = linear(s, a, "flow.out")?;
        let b = s.p("flow.out_b")?;
        s.g.add(o, b)
    }

    /// `mean_b ‖ε̂(z_t, t, s) − ε‖²` for given `t`, `ε` and conditions.
    pub fn loss_with(&self, s: &mut Session, z0: &Array, cond: &[usize], t: &[f64], eps: &Array) -> Result<NodeId> {
        if z0.shape() != eps.shape() || z0.cols() != self.cfg.d_latent {
            return Err(Error::Shape {
                op: "flow-loss",
                lhs: z0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let d = z0.cols();
        let zt: Vec<f64> = (0..z0.len())
            .map(|i| {
                let ti = t[i / d];
                (1.0 - ti) * z0.data()[i] + ti * eps.data()[i]
            })
            .collect();
        let z = s.g.constant(Array::new(z0.shape().to_vec(), zt)?);
        let pred = self.predict(s, z, t, cond)?;
        let target = s.g.constant(eps.clone());
        let diff = s.g.sub(pred, target)?;
        let ss = s.g.sum_of_squares(diff);
        Ok(s.g.scale(ss, 1.0 / z0.rows() as f64))
    }

    /// Training loss with `t ~ U[0,1]`, `ε ~ N(0, I)` and the condition
    /// replaced by the null code with probability `cond_dropout`.
    pub fn loss(&self, s: &mut Session, z0: &Array, cond: &[usize], rng: &mut impl Rng) -> Result<NodeId> {
        let n = z0.rows();
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let eps = Array::randn(z0.shape(), 1.0, rng);
        let cond: Vec<usize> = cond
            .iter()
            .map(|&c| if rng.random::<f64>() < self.cfg.cond_dropout { self.null_cond() } else { c })
            .collect();
        self.loss_with(s, z0, &cond, &t, &eps)
    }

    fn eval(&self, store: &ParamStore, z: &Array, t: f64, cond: &[usize]) -> Result<Array> {
        let mut s = Session::new(store, store.precision(), Trainable::Nothing);
        let zn = s.g.constant(z.clone());
        let tv = vec![t; z.rows()];
        let p = self.predict(&mut s, zn, &tv, cond)?;
        Ok(s.g.value(p).clone())
    }

    /// Guided noise prediction for a batch.
    pub fn guided(&self, store: &ParamStore, z: &Array, t: f64, cond: &[usize], scale: f64) -> Result<Array> {
        let vc = self.eval(store, z, t, cond)?;
        if scale == 1.0 {
            return Ok(vc);
        }
        let null = vec![self.null_cond(); cond.len()];
        let vu = self.eval(store, z, t, &null)?;
        let data = vu.data().iter().zip(vc.data()).map(|(u, c)| guided_velocity(*u, *c, scale)).collect();
        Array::new(vc.shape().to_vec(), data)
    }

    /// Deterministic Euler integration from pure noise at `t = 1` to `t = 0`
    /// over `steps` uniform steps. Each step recovers `ẑ0 = (z − t·ε̂)/(1 − t)`
    /// and moves along the path, so the final state is `ẑ0`. The denominator
    /// is clamped to half a step so the first update stays finite.
    pub fn sample(
        &self,
        store: &ParamStore,
        cond: &[usize],
        steps: usize,
        guidance: f64,
        rng: &mut impl Rng,
    ) -> Result<Array> {
        if steps == 0 {
            return Err(Error::invalid("sampling needs at least one step"));
        }
        if cond.is_empty() {
            return Err(Error::invalid("sampling needs at least one condition"));
        }
        let d = self.cfg.d_latent;
        let data = (0..cond.len() * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut z = Array::new(vec![cond.len(), d], data)?;
        let dt = 1.0 / steps as f64;
        for i in 0..steps {
            let t = 1.0 - i as f64 * dt;
            let t_next = 1.0 - (i + 1) as f64 * dt;
            let eps = self.guided(store, &z, t, cond, guidance)?;
            let denom = (1.0 - t).max(0.5 * dt);
            for (zi, ei) in z.data_mut().iter_mut().zip(eps.data()) {
                let z0 = (*zi - t * ei) / denom;
                *zi = (1.0 - t_next) * z0 + t_next * ei;
            }
        }
        Ok(z)
    }
}
