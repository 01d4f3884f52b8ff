//! Two-mode latent task for the noise-prediction decoder.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objectives::{FlowConfig, FlowDecoder};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::{Array, Precision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowToyConfig {
    /// Condition `c` puts all mass at `modes[c]`.
    pub modes: [f64; 2],
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub eval_batch: usize,
    pub n_samples: usize,
    pub sample_steps: usize,
    pub guidance: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FlowToyConfig {
    fn default() -> Self {
        Self {
            modes: [-1.5, 1.5],
            hidden: 32,
            steps: 2000,
            batch: 128,
            lr: 3e-3,
            warmup: 50,
            eval_batch: 2048,
            n_samples: 1000,
            sample_steps: 10,
            guidance: 1.5,
            tolerance: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowToyReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Fraction of samples within `tolerance` of their condition's mode.
    pub hit_rate: f64,
    pub wall_clock_s: f64,
}

impl FlowToyReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

pub fn flow_toy_decoder(cfg: &FlowToyConfig) -> FlowDecoder {
    FlowDecoder::new(FlowConfig {
        d_latent: 1,
        n_cond: 2,
        d_cond: 8,
        hidden: cfg.hidden,
        n_blocks: 2,
        n_time_freq: 4,
        cond_dropout: 0.1,
    })
}

fn batch(cfg: &FlowToyConfig, cond: &[usize]) -> Result<Array> {
    Array::new(vec![cond.len(), 1], cond.iter().map(|&c| cfg.modes[c]).collect())
}

/// Loss on a fixed evaluation batch with fixed noise.
fn eval_loss(cfg: &FlowToyConfig, f: &FlowDecoder, store: &ParamStore) -> Result<f64> {
    let cond: Vec<usize> = (0..cfg.eval_batch).map(|i| i % 2).collect();
    let z0 = batch(cfg, &cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let mut s = Session::new(store, store.precision(), Trainable::Nothing);
    let l = f.loss(&mut s, &z0, &cond, &mut rng)?;
    Ok(s.g.value(l).item())
}

pub fn train_flow_toy(cfg: &FlowToyConfig) -> Result<(FlowDecoder, ParamStore, FlowToyReport)> {
    let start = Instant::now();
    let f = flow_toy_decoder(cfg);
    let mut store = f.init(cfg.seed, Precision::F64);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let initial_loss = eval_loss(cfg, &f, &store)?;
    for step in 0..cfg.steps {
        let cond: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..2)).collect();
        let z0 = batch(cfg, &cond)?;
        let mut s = Session::new(&store, Precision::F64, Trainable::All);
        let l = f.loss(&mut s, &z0, &cond, &mut rng)?;
        let grads = s.g.backward(l)?.into_named();
        drop(s);
        opt.step(&mut store, &grads, cosine_lr(step, cfg.steps, cfg.warmup, cfg.lr, 0.1));
    }
    let final_loss = eval_loss(cfg, &f, &store)?;
    let cond: Vec<usize> = (0..cfg.n_samples).map(|i| i % 2).collect();
    let z = f.sample(&store, &cond, cfg.sample_steps, cfg.guidance, &mut rng)?;
    let hits = z
        .data()
        .iter()
        .zip(&cond)
        .filter(|(v, c)| (*v - cfg.modes[**c]).abs() < cfg.tolerance)
        .count();
    let report = FlowToyReport {
        initial_loss,
        final_loss,
        hit_rate: hits as f64 / cfg.n_samples.max(1) as f64,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok((f, store, report))
}
