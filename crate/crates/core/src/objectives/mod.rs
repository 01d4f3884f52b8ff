//! Training losses: text and frame-level audio next-token losses, their
//! weighted combination, the distillation term and a small flow decoder.

mod flow;

pub use flow::{guided_velocity, FlowConfig, FlowDecoder};

use serde::{Deserialize, Serialize};

use crate::backbone::{LocalOutput, Model, Targets};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::tensor::{Array, Graph, NodeId};
use crate::vocab::{FrameKind, TokenGrid, N_BOOKS};

pub const LAMBDA_TEXT: f64 = 1.6;
pub const LAMBDA_AUDIO: f64 = 1.0;

/// Per-book weights of the frame loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamWeights {
    pub w: [f64; N_BOOKS],
}

impl Default for StreamWeights {
    fn default() -> Self {
        Self {
            w: [2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0].map(|x| x / 8.0),
        }
    }
}

impl StreamWeights {
    pub fn uniform() -> Self {
        Self { w: [1.0 / N_BOOKS as f64; N_BOOKS] }
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        let w: [f64; N_BOOKS] = w
            .try_into()
            .map_err(|_| Error::invalid(format!("stream weights need {N_BOOKS} values, got {}", w.len())))?;
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("stream weights must be finite and non-negative"));
        }
        Ok(Self { w })
    }
}

/// Scalar pieces of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_text: f64,
    pub l_audio: f64,
    pub l_total: f64,
    /// Weighted per-book terms `w_ℓ · mean NLL_ℓ`; they sum to `l_audio`.
    pub per_stream: [f64; N_BOOKS],
    /// Unweighted mean NLL of each book over all frames.
    pub nll: [f64; N_BOOKS],
    pub l_distill: Option<f64>,
    pub l_flow: Option<f64>,
    pub n_text: usize,
    pub n_frames: usize,
}

/// Coefficients and switches of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_text: f64,
    pub lambda_audio: f64,
    /// Weight of the distillation term; `None` leaves it out.
    pub lambda_rec: Option<f64>,
    pub weights: StreamWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_text: LAMBDA_TEXT,
            lambda_audio: LAMBDA_AUDIO,
            lambda_rec: None,
            weights: StreamWeights::default(),
        }
    }
}

fn check_lambda(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")))
    }
}

/// `λ_text·l_text + λ_audio·l_audio`.
pub fn total_loss(l_text: f64, l_audio: f64, lambda_text: f64, lambda_audio: f64) -> Result<f64> {
    check_lambda("lambda_text", lambda_text)?;
    check_lambda("lambda_audio", lambda_audio)?;
    Ok(lambda_text * l_text + lambda_audio * l_audio)
}

/// Mean negative log-likelihood of `targets` under the rows of `logp`.
/// Returns `None` when there are no targets.
pub fn text_loss(g: &mut Graph, logp: NodeId, targets: &[usize]) -> Result<Option<NodeId>> {
    if targets.is_empty() {
        return Ok(None);
    }
    let picked = g.pick(logp, targets)?;
    let s = g.sum(picked);
    Ok(Some(g.scale(s, -1.0 / targets.len() as f64)))
}

/// Frame loss on the graph: for every frame `Σ_ℓ w_ℓ · NLL_ℓ`, averaged over
/// the `n_frames` frames covered by `local`. Also returns one node per book
/// holding that book's mean NLL.
pub fn audio_frame_loss(
    g: &mut Graph,
    local: &LocalOutput,
    n_frames: usize,
    weights: &StreamWeights,
) -> Result<Option<(NodeId, [NodeId; N_BOOKS])>> {
    if n_frames == 0 || local.heads.is_empty() {
        return Ok(None);
    }
    let mut per_book: [Option<NodeId>; N_BOOKS] = [None; N_BOOKS];
    for head in &local.heads {
        let s = g.sum(head.picked);
        per_book[head.book] = Some(match per_book[head.book] {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let mut nll = Vec::with_capacity(N_BOOKS);
    let mut total: Option<NodeId> = None;
    for (b, acc) in per_book.into_iter().enumerate() {
        let acc = acc.ok_or_else(|| Error::invalid(format!("no head output for book {b}")))?;
        let mean = g.scale(acc, -1.0 / n_frames as f64);
        let term = g.scale(mean, weights.w[b]);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
        nll.push(mean);
    }
    Ok(Some((total.unwrap(), nll.try_into().unwrap())))
}

/// Reference evaluation of the frame loss from per-frame, per-book NLLs.
pub fn frame_loss_value(nll: &[[f64; N_BOOKS]], weights: &StreamWeights) -> f64 {
    if nll.is_empty() {
        return 0.0;
    }
    let s: f64 = nll
        .iter()
        .map(|f| f.iter().zip(&weights.w).map(|(n, w)| w * n).sum::<f64>())
        .sum();
    s / nll.len() as f64
}

/// Mean squared error between decoder output `d` and a fixed target.
pub fn distill_mse(g: &mut Graph, d: NodeId, target: &Array) -> Result<NodeId> {
    if g.shape(d) != target.shape() {
        return Err(Error::Shape {
            op: "distill",
            lhs: g.shape(d).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = g.constant(target.clone());
    let diff = g.sub(d, t)?;
    let ss = g.sum_of_squares(diff);
    Ok(g.scale(ss, 1.0 / target.len() as f64))
}

/// `l_lm + λ_rec · MSE(d, target)`.
pub fn stage1_distill_loss(g: &mut Graph, l_lm: NodeId, d: NodeId, target: &Array, lambda_rec: f64) -> Result<NodeId> {
    check_lambda("lambda_rec", lambda_rec)?;
    let mse = distill_mse(g, d, target)?;
    let t = g.scale(mse, lambda_rec);
    g.add(l_lm, t)
}

/// Full language-model loss of a packed grid.
pub struct LossGraph {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Runs the model over `grid` and assembles the weighted objective.
pub fn lm_loss(model: &Model, s: &mut Session, grid: &TokenGrid, cfg: &LossConfig) -> Result<LossGraph> {
    check_lambda("lambda_text", cfg.lambda_text)?;
    check_lambda("lambda_audio", cfg.lambda_audio)?;
    let hidden = model.forward(s, grid)?;
    let targets = Targets::from_grid(grid);
    let mut b = LossBreakdown {
        n_text: targets.text.len(),
        n_frames: targets.frames.len(),
        ..LossBreakdown::default()
    };
    let mut parts: Vec<NodeId> = Vec::new();
    if !targets.text.is_empty() {
        let rows: Vec<usize> = targets.text.iter().map(|t| t.0).collect();
        let ids: Vec<usize> = targets.text.iter().map(|t| t.1 as usize).collect();
        let lp = model.text_logprobs(s, hidden.out, &rows)?;
        let lt = text_loss(&mut s.g, lp, &ids)?.unwrap();
        b.l_text = s.g.value(lt).item();
        parts.push(s.g.scale(lt, cfg.lambda_text));
    }
    let local = crate::backbone::local_logprobs(model, s, hidden.out, &targets.frames)?;
    if let Some((la, nll)) = audio_frame_loss(&mut s.g, &local, targets.frames.len(), &cfg.weights)? {
        b.l_audio = s.g.value(la).item();
        for (i, n) in nll.iter().enumerate() {
            b.nll[i] = s.g.value(*n).item();
            b.per_stream[i] = cfg.weights.w[i] * b.nll[i];
        }
        parts.push(s.g.scale(la, cfg.lambda_audio));
    }
    b.l_total = total_loss(b.l_text, b.l_audio, cfg.lambda_text, cfg.lambda_audio)?;
    if let Some(lr) = cfg.lambda_rec {
        check_lambda("lambda_rec", lr)?;
        let rows: Vec<usize> = (0..grid.positions())
            .filter(|&p| matches!(grid.frame_kind[p], FrameKind::Reason | FrameKind::Recon))
            .collect();
        if !rows.is_empty() {
            let frames: Vec<[u32; N_BOOKS]> = rows.iter().map(|&p| grid.frame(p)).collect();
            let d = model.distill(s, hidden.h_u, &rows)?;
            let mse = distill_mse(&mut s.g, d, &model.ssl_target(&frames))?;
            b.l_distill = Some(s.g.value(mse).item());
            parts.push(s.g.scale(mse, lr));
        }
    }
    let total = match parts.split_first() {
        None => {
            let z = s.g.constant(Array::scalar(0.0));
            s.g.scale(z, 1.0)
        }
        Some((first, rest)) => {
            let mut acc = *first;
            for p in rest {
                acc = s.g.add(acc, *p)?;
            }
            acc
        }
    };
    Ok(LossGraph { total, breakdown: b })
}

#[cfg(test)]
mod tests;
