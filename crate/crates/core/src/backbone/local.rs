use rand::Rng;

use super::generate::{choose, SamplingPolicy};
use super::Model;
use crate::error::{Error, Result};
use crate::nn::{block, linear, rms_norm, AttnCtx};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::{Array, AttnLayout, NodeId};
use crate::vocab::{AudioKind, N_BOOKS};

/// An audio frame to be predicted from the hidden state at row `src`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameTarget {
    pub src: usize,
    /// Grid position of the frame itself.
    pub pos: usize,
    pub kind: AudioKind,
    pub tokens: [u32; N_BOOKS],
}

/// Per `(kind, book)` output of a teacher-forced local pass.
pub struct LocalHead {
    pub kind: AudioKind,
    pub book: usize,
    /// Indices into the frame list handed to [`local_logprobs`].
    pub frames: Vec<usize>,
    /// `frames.len() × per_book` log-probabilities over the book's legal ids.
    pub logp: NodeId,
    /// Log-probability of each target code.
    pub picked: NodeId,
}

pub struct LocalOutput {
    pub heads: Vec<LocalHead>,
}

fn kind_index(k: AudioKind) -> usize {
    match k {
        AudioKind::Reason => 0,
        AudioKind::Recon => 1,
    }
}

/// Teacher-forced local decoding: step `k` of a frame sees the global state
/// and codes `< k` of the same frame.
pub fn local_logprobs(model: &Model, s: &mut Session, out: NodeId, frames: &[FrameTarget]) -> Result<LocalOutput> {
    if frames.is_empty() {
        return Ok(LocalOutput { heads: vec![] });
    }
    let v = &model.vocab;
    let n = frames.len();
    let start_id = (v.size() - v.audio_offset()) as usize;
    let srcs: Vec<usize> = frames.iter().map(|f| f.src).collect();
    let h = s.g.embedding(out, &srcs)?;
    let proj = linear(s, h, "local.in")?;
    let expand: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, N_BOOKS)).collect();
    let x0 = s.g.embedding(proj, &expand)?;
    let pos_table = s.p("local.pos")?;
    let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..N_BOOKS).collect();
    let pos = s.g.embedding(pos_table, &pos_ids)?;
    let kind_table = s.p("local.kind")?;
    let kind_ids: Vec<usize> = expand.iter().map(|&i| kind_index(frames[i].kind)).collect();
    let kinds = s.g.embedding(kind_table, &kind_ids)?;
    let tok_table = s.p("local.embed")?;
    let mut tok_ids = Vec::with_capacity(n * N_BOOKS);
    for f in frames {
        tok_ids.push(start_id);
        for k in 1..N_BOOKS {
            tok_ids.push((f.tokens[k - 1] - v.audio_offset()) as usize);
        }
    }
    let toks = s.g.embedding(tok_table, &tok_ids)?;
    let mut x = s.g.add(x0, pos)?;
    x = s.g.add(x, kinds)?;
    x = s.g.add(x, toks)?;
    let ctx = AttnCtx {
        layout: AttnLayout::uniform_causal(n, N_BOOKS).into(),
        positions: vec![0.0; n * N_BOOKS].into(),
        n_heads: model.cfg.local_heads,
        rope_base: model.cfg.rope_base,
    };
    for i in 0..model.cfg.n_local {
        x = block(s, &format!("local.block.{i}"), x, &ctx)?;
    }
    let x = rms_norm(s, x, "local.norm")?;
    let mut heads = Vec::new();
    for kind in AudioKind::BOTH {
        let idx: Vec<usize> = (0..n).filter(|&i| frames[i].kind == kind).collect();
        if idx.is_empty() {
            continue;
        }
        for book in 0..N_BOOKS {
            let rows: Vec<usize> = idx.iter().map(|i| i * N_BOOKS + book).collect();
            let hs = s.g.embedding(x, &rows)?;
            let logits = linear(s, hs, &format!("local.head.{}.{book}", kind.name()))?;
            let logp = s.g.log_softmax(logits)?;
            let off = v.book_offset(kind, book);
            let tgt: Vec<usize> = idx.iter().map(|&i| (frames[i].tokens[book] - off) as usize).collect();
            let picked = s.g.pick(logp, &tgt)?;
            heads.push(LocalHead {
                kind,
                book,
                frames: idx.clone(),
                logp,
                picked,
            });
        }
    }
    Ok(LocalOutput { heads })
}

/// Samples one frame code by code from a final-normalized global state `h`
/// (`1 × d_model`). Returns global ids and the model log-probability of each.
pub fn decode_frame(
    model: &Model,
    store: &ParamStore,
    h: &Array,
    kind: AudioKind,
    policy: &SamplingPolicy,
    rng: &mut impl Rng,
) -> Result<([u32; N_BOOKS], [f64; N_BOOKS])> {
    if h.shape() != [1, model.cfg.d_model] {
        return Err(Error::Shape {
            op: "decode-frame",
            lhs: h.shape().to_vec(),
            rhs: vec![1, model.cfg.d_model],
        });
    }
    let v = &model.vocab;
    let mut tokens: [u32; N_BOOKS] = std::array::from_fn(|b| v.book_offset(kind, b));
    let mut logps = [0.0; N_BOOKS];
    for k in 0..N_BOOKS {
        let mut s = Session::new(store, store.precision(), Trainable::Nothing);
        let out = s.g.constant(h.clone());
        let frame = FrameTarget {
            src: 0,
            pos: 1,
            kind,
            tokens,
        };
        let lo = local_logprobs(model, &mut s, out, std::slice::from_ref(&frame))?;
        let head = lo
            .heads
            .iter()
            .find(|hd| hd.book == k)
            .ok_or_else(|| Error::invalid(format!("no local head for book {k}")))?;
        let logp = s.g.value(head.logp).row(0).to_vec();
        let allowed = policy.allowed_codes.as_ref().and_then(|a| a.get(k)).map(Vec::as_slice);
        let idx = choose(&logp, policy.temperature, policy.top_k, allowed, rng)?;
        tokens[k] = v.book_offset(kind, k) + idx as u32;
        logps[k] = logp[idx];
    }
    Ok((tokens, logps))
}
