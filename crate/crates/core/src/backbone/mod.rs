//! Layer-specialized autoregressive transformer over packed token grids.
//!
//! Blocks are grouped bottom to top into understanding experts, cross-modal
//! layers and generation experts. Expert blocks update only audio positions:
//! `H' = H + M_aud ⊙ (f(H) − H)`, evaluated as an exact row selection so text
//! rows pass through bit for bit. A small local decoder emits the eight codes
//! of each audio frame.

mod generate;
mod local;

pub use generate::{choose, generate, Generated, SamplingPolicy};
pub use local::{decode_frame, local_logprobs, FrameTarget, LocalHead, LocalOutput};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{block, init_block, init_linear, init_mlp2, linear, mlp2, rms_norm, AttnCtx};
use crate::params::{ParamStore, Session};
use crate::tensor::{Array, NodeId, Precision};
use crate::vocab::{fuse_embeddings, AudioKind, FrameKind, TokenGrid, Vocabulary, N_BOOKS, N_STREAMS, TEXT_STREAM};

/// Parameter groups; every parameter name starts with one of these.
pub const GROUPS: [&str; 7] = ["embed", "understand", "crossmodal", "generate", "local", "head", "distill"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_understand: usize,
    pub n_crossmodal: usize,
    pub n_generate: usize,
    pub n_local: usize,
    pub d_local: usize,
    pub local_heads: usize,
    pub t_max: usize,
    pub rope_base: f64,
    /// Width of the stage-1 distillation target.
    pub d_ssl: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_understand: 2,
            n_crossmodal: 4,
            n_generate: 2,
            n_local: 2,
            d_local: 32,
            local_heads: 4,
            t_max: 256,
            rope_base: 10_000.0,
            d_ssl: 8,
        }
    }
}

impl BackboneConfig {
    /// Layer layout of the full-size reference model.
    pub fn reference() -> Self {
        Self {
            d_model: 4096,
            n_heads: 32,
            n_understand: 3,
            n_crossmodal: 28,
            n_generate: 2,
            n_local: 4,
            d_local: 1024,
            local_heads: 16,
            t_max: 2048,
            rope_base: 10_000.0,
            d_ssl: 1024,
        }
    }

    pub fn total_layers(&self) -> usize {
        self.n_understand + self.n_crossmodal + self.n_generate + self.n_local
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_understand, self.n_crossmodal, self.n_generate, self.n_local];
        if counts.contains(&0) || self.t_max == 0 {
            return Err(Error::Config("layer counts and t_max must be at least 1".into()));
        }
        for (d, h) in [(self.d_model, self.n_heads), (self.d_local, self.local_heads)] {
            if h == 0 || d % h != 0 || (d / h) % 2 != 0 {
                return Err(Error::Config(format!(
                    "width {d} must split into {h} heads of even size"
                )));
            }
        }
        Ok(())
    }
}

/// Hidden states of one forward pass.
pub struct Hidden {
    pub h_u: NodeId,
    pub h_c: NodeId,
    pub h_g: NodeId,
    /// Final-normalized `h_g`, read by the heads.
    pub out: NodeId,
    pub trace: Vec<BlockTrace>,
}

/// Input and output of one block, recorded for invariance checks.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub name: String,
    pub audio_expert: bool,
    pub input: NodeId,
    pub output: NodeId,
}

/// Next-token targets of a grid: text tokens predicted by the text head,
/// audio frames by the local decoder, each from the previous position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    /// `(source row, target id)`.
    pub text: Vec<(usize, u32)>,
    pub frames: Vec<FrameTarget>,
}

impl Targets {
    pub fn from_grid(grid: &TokenGrid) -> Self {
        let mut t = Targets::default();
        for (src, next) in grid.next_in_doc().into_iter().enumerate() {
            let Some(p) = next else { continue };
            if grid.is_pad(src) {
                continue;
            }
            match grid.frame_kind[p] {
                FrameKind::Text => t.text.push((src, grid.token(p, TEXT_STREAM))),
                FrameKind::Reason | FrameKind::Recon => t.frames.push(FrameTarget {
                    src,
                    pos: p,
                    kind: grid.frame_kind[p].audio_kind().unwrap(),
                    tokens: grid.frame(p),
                }),
                FrameKind::Pad => {}
            }
        }
        t
    }
}

/// Model definition: configuration plus vocabulary. Parameters live in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub cfg: BackboneConfig,
    pub vocab: Vocabulary,
}

impl Model {
    pub fn new(cfg: BackboneConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, vocab })
    }

    pub fn toy() -> Self {
        Self::new(BackboneConfig::default(), Vocabulary::toy()).unwrap()
    }

    pub fn block_names(&self) -> Vec<(String, bool)> {
        let c = &self.cfg;
        let mut v = Vec::new();
        for i in 0..c.n_understand {
            v.push((format!("understand.{i}"), true));
        }
        for i in 0..c.n_crossmodal {
            v.push((format!("crossmodal.{i}"), false));
        }
        for i in 0..c.n_generate {
            v.push((format!("generate.{i}"), true));
        }
        v
    }

    pub fn init(&self, seed: u64, precision: Precision) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &self.cfg;
        let (d, dl) = (c.d_model, c.d_local);
        let mut st = ParamStore::new(precision);
        let v = self.vocab.size() as usize;
        for s in 0..N_STREAMS {
            st.insert(format!("embed.stream.{s}"), Array::randn(&[v, d], 1.0, &mut rng));
        }
        let depth = c.n_understand + c.n_crossmodal + c.n_generate;
        for (name, _) in self.block_names() {
            init_block(&mut st, &name, d, depth, &mut rng);
        }
        st.insert("head.norm", Array::full(&[d], 1.0));
        st.insert("head.text", Array::zeros(&[d, self.vocab.text_slot_size() as usize]));

        init_linear(&mut st, "local.in", d, dl, 1.0, &mut rng);
        st.insert("local.pos", Array::randn(&[N_BOOKS, dl], 1.0, &mut rng));
        st.insert("local.kind", Array::randn(&[2, dl], 1.0, &mut rng));
        let n_audio = (self.vocab.size() - self.vocab.audio_offset()) as usize;
        st.insert("local.embed", Array::randn(&[n_audio + 1, dl], 1.0, &mut rng));
        for i in 0..c.n_local {
            init_block(&mut st, &format!("local.block.{i}"), dl, c.n_local, &mut rng);
        }
        st.insert("local.norm", Array::full(&[dl], 1.0));
        for kind in AudioKind::BOTH {
            for b in 0..N_BOOKS {
                st.insert(
                    format!("local.head.{}.{b}", kind.name()),
                    Array::zeros(&[dl, self.vocab.per_book(kind) as usize]),
                );
            }
        }
        init_mlp2(&mut st, "distill", d, d, c.d_ssl, &mut rng);
        st
    }

    pub fn stream_tables(&self, s: &mut Session) -> Result<Vec<NodeId>> {
        (0..N_STREAMS).map(|i| s.p(&format!("embed.stream.{i}"))).collect()
    }

    /// Runs the global stack over every position of `grid`.
    pub fn forward(&self, s: &mut Session, grid: &TokenGrid) -> Result<Hidden> {
        if grid.t > self.cfg.t_max {
            return Err(Error::Overlength {
                len: grid.t,
                max: self.cfg.t_max,
            });
        }
        let tables = self.stream_tables(s)?;
        let mut h = fuse_embeddings(&mut s.g, grid, &tables)?;
        let (layout, positions) = grid.attention_layout();
        let ctx = AttnCtx {
            layout,
            positions,
            n_heads: self.cfg.n_heads,
            rope_base: self.cfg.rope_base,
        };
        let mut trace = Vec::new();
        let (mut h_u, mut h_c) = (h, h);
        let n_u = self.cfg.n_understand;
        let n_c = self.cfg.n_crossmodal;
        for (i, (name, audio_expert)) in self.block_names().into_iter().enumerate() {
            let input = h;
            let f = block(s, &name, h, &ctx)?;
            h = if audio_expert {
                s.g.masked_select_add(h, f, &grid.audio_mask)?
            } else {
                f
            };
            trace.push(BlockTrace {
                name,
                audio_expert,
                input,
                output: h,
            });
            if i + 1 == n_u {
                h_u = h;
            }
            if i + 1 == n_u + n_c {
                h_c = h;
            }
        }
        let out = rms_norm(s, h, "head.norm")?;
        Ok(Hidden {
            h_u,
            h_c,
            h_g: h,
            out,
            trace,
        })
    }

    /// Text-head log-probabilities over the text-stream ids for `rows` of `out`.
    pub fn text_logprobs(&self, s: &mut Session, out: NodeId, rows: &[usize]) -> Result<NodeId> {
        let h = s.g.embedding(out, rows)?;
        let logits = linear(s, h, "head.text")?;
        s.g.log_softmax(logits)
    }

    /// Distillation decoder applied to understanding-expert states.
    pub fn distill(&self, s: &mut Session, h_u: NodeId, rows: &[usize]) -> Result<NodeId> {
        let h = s.g.embedding(h_u, rows)?;
        mlp2(s, h, "distill")
    }

    /// Fixed stand-in for self-supervised features of an audio frame: a seeded
    /// projection of its first two codes.
    pub fn ssl_target(&self, frames: &[[u32; N_BOOKS]]) -> Array {
        let d = self.cfg.d_ssl;
        let n_audio = (self.vocab.size() - self.vocab.audio_offset()) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0x55_4c_5f_74);
        let table = Array::randn(&[n_audio, d], 1.0, &mut rng);
        let off = self.vocab.audio_offset() as usize;
        let mut out = Vec::with_capacity(frames.len() * d);
        for f in frames {
            let (a, b) = (table.row(f[0] as usize - off), table.row(f[1] as usize - off));
            out.extend(a.iter().zip(b).map(|(x, y)| (x + y) / std::f64::consts::SQRT_2));
        }
        Array::new(vec![frames.len(), d], out).expect("non-empty frames")
    }
}

/// Parameter groups and their element counts.
pub fn group_sizes(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for (name, a) in store.iter() {
        *m.entry(crate::params::group_of(name).to_string()).or_insert(0) += a.len();
    }
    m
}
