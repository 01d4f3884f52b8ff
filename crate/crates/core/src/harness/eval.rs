//! Teacher-forced evaluation: per-book perplexity, top-1 accuracy and the
//! corpus entropy gap.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::stage::pack_rows;
use crate::backbone::{local_logprobs, Model, Targets};
use crate::error::{Error, Result};
use crate::forge::tally_joint;
use crate::info::{entropy_gap, EntropyGap};
use crate::params::{ParamStore, Session, Trainable};
use crate::vocab::{AudioKind, Record, TokenGrid, N_BOOKS, N_STREAMS, TEXT_STREAM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    WithReasoning,
    WithoutReasoning,
}

/// One teacher-forced prediction: stream `0..8` are the reconstruction
/// books, `TEXT_STREAM` is text. Ids are local to the stream's head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub stream: usize,
    pub predicted: u32,
    pub target: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Option<ConditionMode>,
    pub n_records: usize,
    pub n_frames: usize,
    pub n_text: usize,
    /// Mean NLL (nats) of each reconstruction book.
    pub nll: [f64; N_BOOKS],
    pub ppl: [f64; N_BOOKS],
    pub ppl_avg: f64,
    pub text_ppl: f64,
    /// Top-1 accuracy per stream: eight books, then text.
    pub accuracy: [f64; N_STREAMS],
    pub entropy: Option<EntropyGap>,
    pub wall_clock_s: f64,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Grids covering `records` in order, packed to `ctx`.
pub fn eval_grids(model: &Model, records: &[Record], mode: ConditionMode, ctx: usize) -> Result<Vec<TokenGrid>> {
    let with = mode == ConditionMode::WithReasoning;
    let seqs = records
        .iter()
        .map(|r| r.to_items(&model.vocab, with))
        .collect::<Result<Vec<_>>>()?;
    let ctx = ctx.min(model.cfg.t_max);
    pack_rows(seqs, ctx)?
        .into_iter()
        .map(|row| TokenGrid::from_docs(&model.vocab, &[row], Some(ctx)))
        .collect()
}

/// Reconstruction-stream NLL, perplexity and accuracy on `records`. With
/// reasoning, each clip's reasoning frames precede its reconstruction frames
/// as context; they are not scored.
pub fn evaluate(model: &Model, store: &ParamStore, records: &[Record], mode: ConditionMode, ctx: usize) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Corpus("empty evaluation corpus".into()));
    }
    let start = Instant::now();
    let mut nll_sum = [0.0; N_BOOKS];
    let mut text_sum = 0.0;
    let mut r = EvalReport {
        mode: Some(mode),
        n_records: records.len(),
        ..EvalReport::default()
    };
    for grid in eval_grids(model, records, mode, ctx)? {
        let mut s = Session::new(store, store.precision(), Trainable::Nothing);
        let hidden = model.forward(&mut s, &grid)?;
        let targets = Targets::from_grid(&grid);
        if !targets.text.is_empty() {
            let rows: Vec<usize> = targets.text.iter().map(|t| t.0).collect();
            let lp = model.text_logprobs(&mut s, hidden.out, &rows)?;
            let lp = s.g.value(lp);
            for (i, &(_, id)) in targets.text.iter().enumerate() {
                let row = lp.row(i);
                text_sum -= row[id as usize];
                r.predictions.push(Prediction {
                    stream: TEXT_STREAM,
                    predicted: argmax_lowest(row) as u32,
                    target: id,
                });
            }
            r.n_text += targets.text.len();
        }
        let frames: Vec<_> = targets.frames.into_iter().filter(|f| f.kind == AudioKind::Recon).collect();
        r.n_frames += frames.len();
        let local = local_logprobs(model, &mut s, hidden.out, &frames)?;
        for head in &local.heads {
            let off = model.vocab.book_offset(head.kind, head.book);
            let lp = s.g.value(head.logp);
            for (i, &f) in head.frames.iter().enumerate() {
                let row = lp.row(i);
                let tgt = frames[f].tokens[head.book] - off;
                nll_sum[head.book] -= row[tgt as usize];
                r.predictions.push(Prediction {
                    stream: head.book,
                    predicted: argmax_lowest(row) as u32,
                    target: tgt,
                });
            }
        }
    }
    if r.n_frames > 0 {
        for b in 0..N_BOOKS {
            r.nll[b] = nll_sum[b] / r.n_frames as f64;
            r.ppl[b] = r.nll[b].exp();
        }
        r.ppl_avg = r.ppl.iter().sum::<f64>() / N_BOOKS as f64;
    }
    if r.n_text > 0 {
        r.text_ppl = (text_sum / r.n_text as f64).exp();
    }
    r.accuracy = accuracy_from(&r.predictions);
    r.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(r)
}

/// Fraction of correct predictions per stream; streams without predictions
/// report 0.
pub fn accuracy_from(preds: &[Prediction]) -> [f64; N_STREAMS] {
    let mut hit = [0usize; N_STREAMS];
    let mut n = [0usize; N_STREAMS];
    for p in preds {
        n[p.stream] += 1;
        hit[p.stream] += usize::from(p.predicted == p.target);
    }
    std::array::from_fn(|i| if n[i] == 0 { 0.0 } else { hit[i] as f64 / n[i] as f64 })
}

/// Entropy gap of the corpus's pooled `(class, reasoning code, reconstruction
/// code)` tally.
pub fn eval_entropy(records: &[Record], n_classes: u32, alphabet: u32) -> Result<EvalReport> {
    let start = Instant::now();
    let joint = tally_joint(records, n_classes, alphabet, None)?;
    Ok(EvalReport {
        n_records: records.len(),
        entropy: Some(entropy_gap(&joint)?),
        wall_clock_s: start.elapsed().as_secs_f64(),
        ..EvalReport::default()
    })
}
