//! GRPO fine-tuning on a verifiable toy task: given text token `q`, answer
//! with `q + 1 mod n`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, SamplingPolicy};
use crate::error::{Error, Result};
use crate::grpo::{grpo_objective, response_logprobs, rollout, RewardStub, RolloutGroup};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::NodeId;
use crate::vocab::Special;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Size of the answer alphabet (text indices `0..n_answers`).
    pub n_answers: u32,
    /// Query groups per step.
    pub groups: usize,
    /// Responses per group.
    pub g: usize,
    pub epsilon: f64,
    /// KL coefficient against the frozen reference policy.
    pub kl: f64,
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            n_answers: 8,
            groups: 4,
            g: 8,
            epsilon: 0.2,
            kl: 0.04,
            steps: 40,
            lr: 3e-3,
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// One row of the GRPO metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoStepMetrics {
    pub step: usize,
    pub reward_mean: f64,
    pub surrogate: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub first_reward: f64,
    pub last_reward: f64,
    pub wall_clock_s: f64,
    pub history: Vec<GrpoStepMetrics>,
}

pub fn task_prompt(model: &Model, q: u32) -> Vec<u32> {
    vec![Special::Bos.id(), model.vocab.text(q)]
}

pub fn task_reward(model: &Model, q: u32, n: u32) -> RewardStub {
    RewardStub::ExactMatch {
        target: vec![model.vocab.text((q + 1) % n)],
    }
}

/// Mean over outputs of the per-output mean k3 divergence to the reference.
fn kl_term(s: &mut Session, new: &[NodeId], reference: &[Vec<f64>]) -> Result<Option<NodeId>> {
    let mut acc: Option<NodeId> = None;
    let mut n = 0;
    for (node, r) in new.iter().zip(reference) {
        if r.is_empty() {
            continue;
        }
        let k = s.g.kl_penalty(*node, r)?;
        let m = s.g.mean(k);
        acc = Some(match acc {
            Some(a) => s.g.add(a, m)?,
            None => m,
        });
        n += 1;
    }
    Ok(acc.map(|a| s.g.scale(a, 1.0 / n as f64)))
}

fn reference_logprobs(model: &Model, reference: &ParamStore, group: &RolloutGroup) -> Result<Vec<Vec<f64>>> {
    let mut s = Session::new(reference, reference.precision(), Trainable::Nothing);
    let nodes = response_logprobs(model, &mut s, group)?;
    Ok(nodes
        .iter()
        .zip(&group.outputs)
        .map(|(n, o)| if o.is_empty() { vec![] } else { s.g.value(*n).data().to_vec() })
        .collect())
}

/// Maximizes `J − β·KL` with one update per batch of rollouts.
pub fn grpo_train(
    model: &Model,
    store: &mut ParamStore,
    cfg: &GrpoConfig,
    mut on_step: impl FnMut(&GrpoStepMetrics) -> Result<()>,
) -> Result<GrpoReport> {
    if cfg.n_answers == 0 || cfg.n_answers > model.vocab.n_text || cfg.groups == 0 || cfg.g == 0 {
        return Err(Error::Config("grpo needs 1..=n_text answers and non-empty groups".into()));
    }
    let reference = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut allowed: Vec<u32> = (0..cfg.n_answers).map(|i| model.vocab.text(i)).collect();
    allowed.push(Special::Eos.id());
    let policy = SamplingPolicy {
        temperature: cfg.temperature,
        max_len: 4,
        allowed_text: Some(allowed),
        ..SamplingPolicy::default()
    };
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut groups = Vec::with_capacity(cfg.groups);
        for k in 0..cfg.groups {
            let q = rng.random_range(0..cfg.n_answers);
            let reward = task_reward(model, q, cfg.n_answers);
            groups.push(rollout(model, store, k, &task_prompt(model, q), cfg.g, &policy, &reward, &mut rng)?);
        }
        let refs = groups
            .iter()
            .map(|g| reference_logprobs(model, &reference, g))
            .collect::<Result<Vec<_>>>()?;
        let mut s = Session::new(store, store.precision(), Trainable::All);
        let (mut sur, mut kl) = (0.0, 0.0);
        let mut loss: Option<NodeId> = None;
        for (group, r) in groups.iter().zip(&refs) {
            let new = response_logprobs(model, &mut s, group)?;
            let j = grpo_objective(&mut s.g, group, &new, cfg.epsilon)?;
            sur += s.g.value(j).item();
            let mut obj = j;
            if let Some(k) = kl_term(&mut s, &new, r)? {
                kl += s.g.value(k).item();
                let pen = s.g.scale(k, -cfg.kl);
                obj = s.g.add(obj, pen)?;
            }
            let neg = s.g.scale(obj, -1.0 / cfg.groups as f64);
            loss = Some(match loss {
                Some(l) => s.g.add(l, neg)?,
                None => neg,
            });
        }
        let grads = s.g.backward(loss.expect("at least one group"))?.into_named();
        drop(s);
        opt.step(store, &grads, cfg.lr);
        let n = cfg.groups as f64;
        let reward_mean = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / (n * cfg.g as f64);
        let m = GrpoStepMetrics {
            step,
            reward_mean,
            surrogate: sur / n,
            kl: kl / n,
        };
        on_step(&m)?;
        history.push(m);
    }
    Ok(GrpoReport {
        first_reward: history.first().map_or(f64::NAN, |m| m.reward_mean),
        last_reward: history.last().map_or(f64::NAN, |m| m.reward_mean),
        wall_clock_s: start.elapsed().as_secs_f64(),
        history,
    })
}
