//! Group-relative policy optimization: per-group normalized advantages, the
//! clipped surrogate, rule-based rewards and rollouts on text responses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{generate, Model, SamplingPolicy};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::NodeId;
use crate::vocab::{Item, TokenGrid};

/// `(r_i − mean) / std` with the population standard deviation; all zeros
/// when the rewards do not vary.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Scalar clipped surrogate term for one token.
pub fn surrogate_token(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Reference evaluation of the objective: token mean within each output,
/// then mean over outputs.
pub fn grpo_objective_value(old: &[Vec<f64>], new: &[Vec<f64>], adv: &[f64], eps: f64) -> Result<f64> {
    check_aligned(old, new, adv)?;
    let mut total = 0.0;
    let mut n = 0;
    for ((o, nw), a) in old.iter().zip(new).zip(adv) {
        if o.is_empty() {
            continue;
        }
        let s: f64 = o.iter().zip(nw).map(|(o, n)| surrogate_token((n - o).exp(), *a, eps)).sum();
        total += s / o.len() as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

fn check_aligned(old: &[Vec<f64>], new: &[Vec<f64>], adv: &[f64]) -> Result<()> {
    if old.len() != new.len() || old.len() != adv.len() {
        return Err(Error::Shape {
            op: "grpo",
            lhs: vec![old.len()],
            rhs: vec![new.len(), adv.len()],
        });
    }
    for (o, n) in old.iter().zip(new) {
        if o.len() != n.len() {
            return Err(Error::Shape {
                op: "grpo",
                lhs: vec![o.len()],
                rhs: vec![n.len()],
            });
        }
    }
    Ok(())
}

/// Sampled responses to one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: usize,
    pub prompt: Vec<u32>,
    pub outputs: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    /// Per-token log-probs frozen at sampling time.
    pub old_logp: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub truncated: Vec<bool>,
}

impl RolloutGroup {
    pub fn new(query_id: usize, prompt: Vec<u32>, outputs: Vec<Vec<u32>>, old_logp: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        if outputs.len() != rewards.len() {
            return Err(Error::invalid("one reward per output required"));
        }
        let adv = vec![0.0; rewards.len()];
        check_aligned(&outputs.iter().map(|o| vec![0.0; o.len()]).collect::<Vec<_>>(), &old_logp, &adv)?;
        let advantages = group_advantages(&rewards);
        let truncated = vec![false; outputs.len()];
        Ok(Self {
            query_id,
            prompt,
            outputs,
            rewards,
            old_logp,
            advantages,
            truncated,
        })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Clipped surrogate on the graph given per-output new log-prob vectors.
pub fn grpo_objective(g: &mut crate::tensor::Graph, group: &RolloutGroup, new_logp: &[NodeId], eps: f64) -> Result<NodeId> {
    if new_logp.len() != group.len() {
        return Err(Error::Shape {
            op: "grpo",
            lhs: vec![group.len()],
            rhs: vec![new_logp.len()],
        });
    }
    let mut acc: Option<NodeId> = None;
    let mut n = 0;
    for (i, &node) in new_logp.iter().enumerate() {
        if group.old_logp[i].is_empty() {
            continue;
        }
        let adv = vec![group.advantages[i]; group.old_logp[i].len()];
        let s = g.clipped_surrogate(node, &group.old_logp[i], &adv, eps)?;
        let m = g.mean(s);
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
        n += 1;
    }
    match acc {
        Some(a) => Ok(g.scale(a, 1.0 / n as f64)),
        None => Ok(g.constant(crate::tensor::Array::scalar(0.0))),
    }
}

/// Rule-based verifiable rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardStub {
    /// 1 when the response (without terminal EOS) equals the target.
    ExactMatch { target: Vec<u32> },
    /// `1 − levenshtein / max(len)`.
    EditDistance { target: Vec<u32> },
    /// Fraction of positions whose label matches.
    LabelAccuracy { labels: Vec<u32> },
}

impl RewardStub {
    pub fn score(&self, response: &[u32]) -> f64 {
        let eos = crate::vocab::Special::Eos.id();
        let r = match response.last() {
            Some(&l) if l == eos => &response[..response.len() - 1],
            _ => response,
        };
        match self {
            RewardStub::ExactMatch { target } => f64::from(u8::from(r == target.as_slice())),
            RewardStub::EditDistance { target } => {
                let m = r.len().max(target.len());
                if m == 0 {
                    return 1.0;
                }
                1.0 - strsim::generic_levenshtein(&r.to_vec(), target) as f64 / m as f64
            }
            RewardStub::LabelAccuracy { labels } => {
                if labels.is_empty() {
                    return 0.0;
                }
                let hits = labels.iter().zip(r).filter(|(a, b)| a == b).count();
                hits as f64 / labels.len() as f64
            }
        }
    }
}

/// Samples `g` responses to a text prompt and scores them.
pub fn rollout(
    model: &Model,
    store: &ParamStore,
    query_id: usize,
    prompt: &[u32],
    g: usize,
    policy: &SamplingPolicy,
    reward: &RewardStub,
    rng: &mut impl Rng,
) -> Result<RolloutGroup> {
    let mut outputs = Vec::with_capacity(g);
    let mut logps = Vec::with_capacity(g);
    let mut truncated = Vec::with_capacity(g);
    let items = [Item::Text(prompt.to_vec())];
    for _ in 0..g {
        let out = generate(model, store, &items, policy, rng)?;
        if out.items.iter().any(|i| matches!(i, Item::Audio { .. })) {
            return Err(Error::invalid("rollouts score text responses only"));
        }
        outputs.push(out.text_tokens);
        logps.push(out.text_logps);
        truncated.push(out.truncated);
    }
    let rewards = outputs.iter().map(|o| reward.score(o)).collect();
    let mut group = RolloutGroup::new(query_id, prompt.to_vec(), outputs, logps, rewards)?;
    group.truncated = truncated;
    Ok(group)
}

/// Teacher-forced log-probs of every response token in `group`, one node per
/// output (empty responses get no node and are skipped by the objective).
pub fn response_logprobs(model: &Model, s: &mut Session, group: &RolloutGroup) -> Result<Vec<NodeId>> {
    let rows: Vec<Vec<Vec<Item>>> = group
        .outputs
        .iter()
        .map(|o| vec![vec![Item::Text(group.prompt.iter().chain(o).copied().collect())]])
        .collect();
    let grid = TokenGrid::from_docs(&model.vocab, &rows, None)?;
    let hidden = model.forward(s, &grid)?;
    let p = group.prompt.len();
    let mut out = Vec::with_capacity(group.len());
    for (r, o) in group.outputs.iter().enumerate() {
        if o.is_empty() {
            let z = s.g.constant(crate::tensor::Array::scalar(0.0));
            out.push(z);
            continue;
        }
        let src: Vec<usize> = (0..o.len()).map(|j| r * grid.t + p - 1 + j).collect();
        let lp = model.text_logprobs(s, hidden.out, &src)?;
        let ids: Vec<usize> = o.iter().map(|&x| x as usize).collect();
        out.push(s.g.pick(lp, &ids)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
