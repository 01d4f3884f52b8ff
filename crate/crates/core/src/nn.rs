//! Shared layer builders: pre-norm transformer blocks and small perceptrons.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::tensor::{Array, AttnLayout, NodeId};

/// Attention geometry shared by every block of one forward pass.
#[derive(Clone)]
pub struct AttnCtx {
    pub layout: Rc<AttnLayout>,
    pub positions: Rc<[f64]>,
    pub n_heads: usize,
    pub rope_base: f64,
}

pub fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) {
    store.insert(name, Array::randn(&[d_in, d_out], gain / (d_in as f64).sqrt(), rng));
}

/// Parameters of one pre-norm block with 4× feed-forward expansion.
pub fn init_block(store: &mut ParamStore, prefix: &str, d: usize, depth: usize, rng: &mut impl Rng) {
    let out_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
    for w in ["wq", "wk", "wv"] {
        init_linear(store, &format!("{prefix}.attn.{w}"), d, d, 1.0, rng);
    }
    init_linear(store, &format!("{prefix}.attn.wo"), d, d, out_gain, rng);
    init_linear(store, &format!("{prefix}.mlp.w1"), d, 4 * d, 1.0, rng);
    init_linear(store, &format!("{prefix}.mlp.w2"), 4 * d, d, out_gain, rng);
    store.insert(format!("{prefix}.norm1"), Array::full(&[d], 1.0));
    store.insert(format!("{prefix}.norm2"), Array::full(&[d], 1.0));
}

pub fn linear(s: &mut Session, x: NodeId, name: &str) -> Result<NodeId> {
    let w = s.p(name)?;
    s.g.matmul(x, w)
}

/// RMS normalization followed by a learned per-channel gain.
pub fn rms_norm(s: &mut Session, x: NodeId, gain: &str) -> Result<NodeId> {
    let n = s.g.rms_norm(x, 1e-6)?;
    let g = s.p(gain)?;
    s.g.mul(n, g)
}

/// `x + Attn(norm(x))`, then `+ MLP(norm(·))`.
pub fn block(s: &mut Session, prefix: &str, x: NodeId, ctx: &AttnCtx) -> Result<NodeId> {
    let h = rms_norm(s, x, &format!("{prefix}.norm1"))?;
    let q = linear(s, h, &format!("{prefix}.attn.wq"))?;
    let k = linear(s, h, &format!("{prefix}.attn.wk"))?;
    let v = linear(s, h, &format!("{prefix}.attn.wv"))?;
    let q = s.g.rotary(q, ctx.positions.clone(), ctx.n_heads, ctx.rope_base)?;
    let k = s.g.rotary(k, ctx.positions.clone(), ctx.n_heads, ctx.rope_base)?;
    let a = s.g.attention(q, k, v, ctx.layout.clone(), ctx.n_heads)?;
    let o = linear(s, a, &format!("{prefix}.attn.wo"))?;
    let x = s.g.add(x, o)?;
    let h = rms_norm(s, x, &format!("{prefix}.norm2"))?;
    let h = linear(s, h, &format!("{prefix}.mlp.w1"))?;
    let h = s.g.gelu(h)?;
    let h = linear(s, h, &format!("{prefix}.mlp.w2"))?;
    s.g.add(x, h)
}

/// Two-layer perceptron `W2·gelu(W1·x + b1) + b2`.
pub fn init_mlp2(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    init_linear(store, &format!("{prefix}.w1"), d_in, hidden, 1.0, rng);
    store.insert(format!("{prefix}.b1"), Array::zeros(&[hidden]));
    init_linear(store, &format!("{prefix}.w2"), hidden, d_out, 1.0, rng);
    store.insert(format!("{prefix}.b2"), Array::zeros(&[d_out]));
}

pub fn mlp2(s: &mut Session, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = linear(s, x, &format!("{prefix}.w1"))?;
    let b1 = s.p(&format!("{prefix}.b1"))?;
    let h = s.g.add(h, b1)?;
    let h = s.g.gelu(h)?;
    let h = linear(s, h, &format!("{prefix}.w2"))?;
    let b2 = s.p(&format!("{prefix}.b2"))?;
    s.g.add(h, b2)
}
