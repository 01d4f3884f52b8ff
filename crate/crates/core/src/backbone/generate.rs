use rand::Rng;

use super::local::decode_frame;
use super::Model;
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::Array;
use crate::vocab::{AudioKind, Item, Special, TokenGrid};

/// Sampling controls for [`generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPolicy {
    /// `<= 0` selects greedy decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Total sequence length cap, prompt included.
    pub max_len: usize,
    /// Frames per reasoning run; when unset the text head decides when the
    /// closing marker is emitted.
    pub reason_frames: Option<usize>,
    pub recon_frames: Option<usize>,
    pub max_frames_per_run: usize,
    /// Per book, the local indices that may be sampled (empty = all).
    pub allowed_codes: Option<Vec<Vec<u32>>>,
    /// Text-stream ids that may be sampled; default is everything but PAD.
    pub allowed_text: Option<Vec<u32>>,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            max_len: 128,
            reason_frames: None,
            recon_frames: None,
            max_frames_per_run: 64,
            allowed_codes: None,
            allowed_text: None,
        }
    }
}

impl SamplingPolicy {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            ..Self::default()
        }
    }
}

/// Picks an index from log-probabilities under temperature, top-k and an
/// allow-list. Greedy ties resolve to the lowest index.
pub fn choose(
    logp: &[f64],
    temperature: f64,
    top_k: Option<usize>,
    allowed: Option<&[u32]>,
    rng: &mut impl Rng,
) -> Result<usize> {
    let mut cand: Vec<usize> = match allowed {
        Some(a) if !a.is_empty() => {
            let mut c: Vec<usize> = a.iter().map(|&i| i as usize).filter(|&i| i < logp.len()).collect();
            c.sort_unstable();
            c.dedup();
            c
        }
        _ => (0..logp.len()).collect(),
    };
    if cand.is_empty() {
        return Err(Error::invalid("no admissible token to sample"));
    }
    if temperature <= 0.0 {
        let mut best = cand[0];
        for &i in &cand {
            if logp[i] > logp[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    if let Some(k) = top_k {
        // Stable sort keeps lower ids first among equal scores.
        cand.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]));
        cand.truncate(k.max(1));
    }
    let mx = cand.iter().map(|&i| logp[i]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = cand.iter().map(|&i| ((logp[i] - mx) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (j, wi) in w.iter().enumerate() {
        if u < *wi {
            return Ok(cand[j]);
        }
        u -= wi;
    }
    Ok(*cand.last().unwrap())
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Generated {
    pub items: Vec<Item>,
    /// Length cap reached before EOS.
    pub truncated: bool,
    /// Sampled text-stream ids after the prompt and their model log-probs.
    pub text_tokens: Vec<u32>,
    pub text_logps: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Mode {
    Text,
    Audio(AudioKind, usize),
}

fn current_mode(items: &[Item]) -> Mode {
    let mut mode = Mode::Text;
    for item in items {
        match item {
            Item::Text(ids) => {
                for &id in ids {
                    if id == Special::ReasonBegin.id() {
                        mode = Mode::Audio(AudioKind::Reason, 0);
                    } else if id == Special::ReconBegin.id() {
                        mode = Mode::Audio(AudioKind::Recon, 0);
                    } else if id == Special::AudioEnd.id() {
                        mode = Mode::Text;
                    }
                }
            }
            Item::Audio { kind, frames } => {
                if let Mode::Audio(k, n) = mode {
                    if k == *kind {
                        mode = Mode::Audio(k, n + frames.len());
                    }
                }
            }
        }
    }
    mode
}

fn push_text(items: &mut Vec<Item>, id: u32) {
    match items.last_mut() {
        Some(Item::Text(t)) => t.push(id),
        _ => items.push(Item::Text(vec![id])),
    }
}

fn push_frame(items: &mut Vec<Item>, kind: AudioKind, f: [u32; 8]) {
    match items.last_mut() {
        Some(Item::Audio { kind: k, frames }) if *k == kind => frames.push(f),
        _ => items.push(Item::Audio { kind, frames: vec![f] }),
    }
}

/// Extends `prompt` one position at a time.
///
/// The modality of the next position follows the markers already present:
/// after a reasoning or reconstruction marker the model emits frames until the
/// closing marker (`RECON_BEGIN` after reasoning frames, `AUDIO_END` after
/// reconstruction frames), otherwise it emits text. Generation ends at EOS or
/// when the length cap is reached.
pub fn generate(
    model: &Model,
    store: &ParamStore,
    prompt: &[Item],
    policy: &SamplingPolicy,
    rng: &mut impl Rng,
) -> Result<Generated> {
    let mut items = prompt.to_vec();
    let mut out = Generated {
        items: vec![],
        truncated: false,
        text_tokens: vec![],
        text_logps: vec![],
    };
    let cap = policy.max_len.min(model.cfg.t_max);
    let default_text: Vec<u32> = (1..model.vocab.text_slot_size()).collect();
    let allowed_text = policy.allowed_text.as_deref().unwrap_or(&default_text);
    loop {
        let len: usize = items.iter().map(Item::len).sum();
        if len == 0 {
            return Err(Error::invalid("generation needs a non-empty prompt"));
        }
        if len >= cap {
            out.truncated = true;
            break;
        }
        let grid = TokenGrid::pack(&model.vocab, &items)?;
        let mut s = Session::new(store, store.precision(), Trainable::Nothing);
        let hidden = model.forward(&mut s, &grid)?;
        let last = grid.t - 1;
        let text_lp_node = model.text_logprobs(&mut s, hidden.out, &[last])?;
        let text_lp = s.g.value(text_lp_node).row(0).to_vec();
        let emit_text = |items: &mut Vec<Item>, out: &mut Generated, id: u32| {
            push_text(items, id);
            out.text_tokens.push(id);
            out.text_logps.push(text_lp[id as usize]);
        };
        match current_mode(&items) {
            Mode::Text => {
                let id = choose(&text_lp, policy.temperature, policy.top_k, Some(allowed_text), rng)? as u32;
                emit_text(&mut items, &mut out, id);
                if id == Special::Eos.id() {
                    break;
                }
            }
            Mode::Audio(kind, count) => {
                let (marker, declared) = match kind {
                    AudioKind::Reason => (Special::ReconBegin.id(), policy.reason_frames),
                    AudioKind::Recon => (Special::AudioEnd.id(), policy.recon_frames),
                };
                let close = match declared {
                    Some(n) => count >= n,
                    None => {
                        let argmax = choose(&text_lp, 0.0, None, None, rng)? as u32;
                        count >= policy.max_frames_per_run || (count >= 1 && argmax == marker)
                    }
                };
                if close {
                    emit_text(&mut items, &mut out, marker);
                } else {
                    let h = Array::new(
                        vec![1, model.cfg.d_model],
                        s.g.value(hidden.out).row(last).to_vec(),
                    )?;
                    let (frame, _) = decode_frame(model, store, &h, kind, policy, rng)?;
                    push_frame(&mut items, kind, frame);
                }
            }
        }
    }
    out.items = items;
    Ok(out)
}
