//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] records every executed op as a node holding its value and its
//! parents. Nodes are appended in execution order, so the node list is already
//! a topological order and [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::str::FromStr;

use super::array::{Array, Precision};
use super::kernels::{gemm, View, ViewMut};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The op kinds reachable through the string-dispatched [`Graph::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    EmbeddingLookup,
    Softmax,
    LogSoftmax,
    RmsNormalize,
    Gelu,
    MaskedSelectAdd,
    Slice,
    Concat,
    Mean,
    SumOfSquares,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "embedding-lookup" => OpKind::EmbeddingLookup,
            "softmax" => OpKind::Softmax,
            "log-softmax" => OpKind::LogSoftmax,
            "rms-normalize" => OpKind::RmsNormalize,
            "gelu" => OpKind::Gelu,
            "masked-select-add" => OpKind::MaskedSelectAdd,
            "slice" => OpKind::Slice,
            "concat" => OpKind::Concat,
            "mean" => OpKind::Mean,
            "sum-of-squares" => OpKind::SumOfSquares,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

/// Attributes for [`Graph::forward_op`]; each kind reads only what it needs.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub trans_b: bool,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub eps: Option<f64>,
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

/// One independent attention window over a contiguous block of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub causal: bool,
    /// Keys marked `false` are invisible to every query except themselves.
    pub key_valid: Option<Vec<bool>>,
}

impl Segment {
    pub fn causal(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            causal: true,
            key_valid: None,
        }
    }

    pub fn full(start: usize, len: usize) -> Self {
        Self {
            start,
            len,
            causal: false,
            key_valid: None,
        }
    }

    #[inline]
    fn allowed(&self, qi: usize, kj: usize) -> bool {
        if self.causal && kj > qi {
            return false;
        }
        match &self.key_valid {
            Some(valid) => kj == qi || (valid[kj] && valid[qi]),
            None => true,
        }
    }
}

/// Partition of the rows of an attention input into independent segments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttnLayout {
    pub segments: Vec<Segment>,
}

impl AttnLayout {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Equal-length causal windows, e.g. the per-frame local decoder.
    pub fn uniform_causal(n_segments: usize, len: usize) -> Self {
        Self {
            segments: (0..n_segments)
                .map(|s| Segment::causal(s * len, len))
                .collect(),
        }
    }

    fn validate(&self, rows: usize) -> Result<()> {
        let mut covered = 0;
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| s.start);
        for s in sorted {
            if s.start != covered || s.len == 0 {
                return Err(Error::invalid(format!(
                    "attention segments must partition rows; gap or overlap at row {covered}"
                )));
            }
            if let Some(v) = &s.key_valid {
                if v.len() != s.len {
                    return Err(Error::invalid("key_valid length differs from segment length"));
                }
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(Error::invalid(format!(
                "attention segments cover {covered} rows, input has {rows}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, s: f64 },
    Embedding { table: NodeId, ids: Rc<[usize]> },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    RmsNorm { a: NodeId, eps: f64 },
    Gelu { a: NodeId },
    MaskedSelect { a: NodeId, b: NodeId, mask: Rc<[bool]> },
    Slice { a: NodeId, axis: usize, start: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Mean { a: NodeId },
    Sum { a: NodeId },
    SumOfSquares { a: NodeId },
    Pick { a: NodeId, idx: Rc<[usize]> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Rc<AttnLayout>,
        n_heads: usize,
        probs: Vec<f64>,
    },
    Rotary { a: NodeId, positions: Rc<[f64]>, n_heads: usize, base: f64 },
    StraightThrough { x: NodeId },
    ClippedSurrogate { new: NodeId, old: Rc<[f64]>, adv: Rc<[f64]>, eps: f64 },
    KlPenalty { new: NodeId, reference: Rc<[f64]> },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    names: BTreeMap<String, NodeId>,
    precision: Precision,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
    names: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Array> {
        self.names.get(name).and_then(|id| self.get(*id))
    }

    /// Gradients of every named leaf that requires grad.
    pub fn into_named(mut self) -> BTreeMap<String, Array> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.names {
            if let Some(g) = self.grads[id.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    a == b || b == [1] || (b.len() < a.len() && a.ends_with(b))
}

fn gelu_scalar(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            names: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Array) -> NodeId {
        let id = self.push_leaf(value, true);
        self.names.insert(name.to_string(), id);
        id
    }

    /// Trainable leaf without a name.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn named(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    fn push_leaf(&mut self, mut value: Array, requires_grad: bool) -> NodeId {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: Array, op: Op, parents: &[NodeId]) -> NodeId {
        self.precision.round_slice(value.data_mut());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Generic entry point dispatching on an op name.
    pub fn forward_op(&mut self, kind: &str, inputs: &[NodeId], attrs: &Attrs) -> Result<NodeId> {
        let kind: OpKind = kind.parse()?;
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                if attrs.trans_b {
                    self.matmul_nt(inputs[0], inputs[1])
                } else {
                    self.matmul(inputs[0], inputs[1])
                }
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::EmbeddingLookup => {
                arity(1)?;
                self.embedding(inputs[0], &attrs.ids)
            }
            OpKind::Softmax => {
                arity(1)?;
                if attrs.mask.is_empty() {
                    self.softmax(inputs[0])
                } else {
                    self.masked_softmax(inputs[0], &attrs.mask)
                }
            }
            OpKind::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            OpKind::RmsNormalize => {
                arity(1)?;
                self.rms_norm(inputs[0], attrs.eps.unwrap_or(1e-6))
            }
            OpKind::Gelu => {
                arity(1)?;
                self.gelu(inputs[0])
            }
            OpKind::MaskedSelectAdd => {
                arity(2)?;
                self.masked_select_add(inputs[0], inputs[1], &attrs.mask)
            }
            OpKind::Slice => {
                arity(1)?;
                self.slice(inputs[0], attrs.axis, attrs.start, attrs.len)
            }
            OpKind::Concat => self.concat(inputs, attrs.axis),
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::SumOfSquares => {
                arity(1)?;
                Ok(self.sum_of_squares(inputs[0]))
            }
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(self.value(a).data(), k),
            View::row_major(self.value(b).data(), n),
            0.0,
            ViewMut::row_major(&mut out, n),
        );
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a (m×k) · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (n, k2) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::row_major(self.value(a).data(), k),
            View::row_major(self.value(b).data(), k).transposed(),
            0.0,
            ViewMut::row_major(&mut out, n),
        );
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !trailing_broadcast(sa, sb) {
            return Err(Error::Shape {
                op: op_name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Array::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over trailing dimensions of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let v = Array::new(av.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Scale { a, s }, &[a])
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.dims2(table, "embedding-lookup")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup with no ids"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let v = Array::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            &[table],
        ))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row, None);
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { a }, &[a]))
    }

    /// Softmax over the last dim where `mask[i] == false` entries get exactly 0.
    pub fn masked_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let c = av.cols();
        let mut out = av.data().to_vec();
        for (row, m) in out.chunks_mut(c).zip(mask.chunks(c)) {
            softmax_row(row, Some(m));
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { a }, &[a]))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmax { a }, &[a]))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last dim.
    pub fn rms_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for x in row.iter_mut() {
                *x *= r;
            }
        }
        let v = Array::new(av.shape().to_vec(), out)?;
        Ok(self.push(v, Op::RmsNorm { a, eps }, &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu_scalar(x).0).collect();
        let v = Array::new(av.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Gelu { a }, &[a]))
    }

    /// Row-wise `a + m ⊙ (b − a)` for a binary row mask, evaluated as an exact
    /// selection: rows with `mask = 0` are copied from `a` bit for bit and rows
    /// with `mask = 1` from `b`.
    pub fn masked_select_add(&mut self, a: NodeId, b: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op: "masked-select-add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let rows = self.value(a).rows();
        if mask.len() != rows {
            return Err(Error::Shape {
                op: "masked-select-add",
                lhs: sa.to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let c = self.value(a).cols();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ad.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { bd } else { ad };
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let v = Array::new(sa.to_vec(), out)?;
        Ok(self.push(
            v,
            Op::MaskedSelect {
                a,
                b,
                mask: mask.into(),
            },
            &[a, b],
        ))
    }

    /// Contiguous slice along axis 0 (rows) or axis 1 (columns) of a 2-d array,
    /// or along axis 0 of a vector.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() > 2 || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let src = self.value(a).data();
        let (data, new_shape) = if shape.len() == 1 {
            (src[start..start + len].to_vec(), vec![len])
        } else if axis == 0 {
            let c = shape[1];
            (src[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            let c = shape[1];
            let mut d = Vec::with_capacity(shape[0] * len);
            for r in 0..shape[0] {
                d.extend_from_slice(&src[r * c + start..r * c + start + len]);
            }
            (d, vec![shape[0], len])
        };
        let v = Array::new(new_shape, data)?;
        Ok(self.push(v, Op::Slice { a, axis, start }, &[a]))
    }

    /// Concatenation of 2-d arrays along axis 0 or 1 (or of vectors along 0).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() || s0.len() > 2 {
            return Err(Error::Shape {
                op: "concat",
                lhs: s0,
                rhs: vec![axis],
            });
        }
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let (data, shape) = if axis == 0 {
            let mut d = Vec::new();
            for p in parts {
                d.extend_from_slice(self.value(*p).data());
            }
            let mut shape = s0.clone();
            shape[0] = total;
            (d, shape)
        } else {
            let rows = s0[0];
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    d.extend_from_slice(self.value(*p).row(r));
                }
            }
            (d, vec![rows, total])
        };
        let v = Array::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Array::scalar(m), Op::Mean { a }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Array::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn sum_of_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>();
        self.push(Array::scalar(s), Op::SumOfSquares { a }, &[a])
    }

    /// `out[i] = a[i, idx[i]]`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.dims2(a, "pick")?;
        if idx.len() != rows {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![rows, cols],
                rhs: vec![idx.len()],
            });
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(rows);
        for (r, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(Error::Index {
                    what: "pick column",
                    index: j,
                    size: cols,
                });
            }
            out.push(av[r * cols + j]);
        }
        let v = Array::new(vec![rows], out)?;
        Ok(self.push(v, Op::Pick { a, idx: idx.into() }, &[a]))
    }

    /// Multi-head scaled dot-product attention over independent row segments.
    /// `q`, `k`, `v` are `rows × d` with heads laid out as contiguous column
    /// blocks of width `d / n_heads`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Rc<AttnLayout>,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (rows, d) = self.dims2(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != [rows, d] {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: vec![rows, d],
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::invalid(format!(
                "width {d} not divisible into {n_heads} heads"
            )));
        }
        layout.validate(rows)?;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; rows * d];
        let total_p: usize = layout
            .segments
            .iter()
            .map(|s| s.len * s.len * n_heads)
            .sum();
        let mut probs = vec![0.0; total_p];
        let mut p_off = 0;
        for seg in &layout.segments {
            let l = seg.len;
            for h in 0..n_heads {
                let p = &mut probs[p_off..p_off + l * l];
                let base = seg.start * d + h * dh;
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    View {
                        data: qd,
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                    View {
                        data: kd,
                        offset: base,
                        rs: 1,
                        cs: d,
                    },
                    0.0,
                    ViewMut::row_major(p, l),
                );
                let mut mask = vec![false; l];
                for i in 0..l {
                    for (j, m) in mask.iter_mut().enumerate() {
                        *m = seg.allowed(i, j);
                    }
                    softmax_row(&mut p[i * l..(i + 1) * l], Some(&mask));
                }
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    View::row_major(p, l),
                    View {
                        data: vd,
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                    0.0,
                    ViewMut {
                        data: &mut out,
                        offset: base,
                        rs: d,
                        cs: 1,
                    },
                );
                p_off += l * l;
            }
        }
        let value = Array::new(vec![rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                n_heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Rotary position encoding applied per head (half-split pairing).
    pub fn rotary(
        &mut self,
        a: NodeId,
        positions: Rc<[f64]>,
        n_heads: usize,
        base: f64,
    ) -> Result<NodeId> {
        let (rows, d) = self.dims2(a, "rotary")?;
        if positions.len() != rows || n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::Shape {
                op: "rotary",
                lhs: vec![rows, d],
                rhs: vec![positions.len(), n_heads],
            });
        }
        let mut out = self.value(a).data().to_vec();
        rotate(&mut out, &positions, d, n_heads, base, 1.0);
        let v = Array::new(vec![rows, d], out)?;
        Ok(self.push(
            v,
            Op::Rotary {
                a,
                positions,
                n_heads,
                base,
            },
            &[a],
        ))
    }

    /// Forward value `q` (a constant of the same shape), gradient passed to `x`
    /// unchanged.
    pub fn straight_through(&mut self, x: NodeId, q: &Array) -> Result<NodeId> {
        if self.shape(x) != q.shape() {
            return Err(Error::Shape {
                op: "straight-through",
                lhs: self.shape(x).to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        Ok(self.push(q.clone(), Op::StraightThrough { x }, &[x]))
    }

    /// Per-token clipped surrogate `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` with
    /// `ρ = exp(new − old)`.
    pub fn clipped_surrogate(
        &mut self,
        new_logp: NodeId,
        old_logp: &[f64],
        adv: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let n = self.value(new_logp).len();
        if old_logp.len() != n || adv.len() != n {
            return Err(Error::Shape {
                op: "clipped-surrogate",
                lhs: vec![n],
                rhs: vec![old_logp.len(), adv.len()],
            });
        }
        let data = self
            .value(new_logp)
            .data()
            .iter()
            .zip(old_logp)
            .zip(adv)
            .map(|((&nw, &od), &a)| surrogate_term(nw, od, a, eps).0)
            .collect();
        let v = Array::new(vec![n], data)?;
        Ok(self.push(
            v,
            Op::ClippedSurrogate {
                new: new_logp,
                old: old_logp.into(),
                adv: adv.into(),
                eps,
            },
            &[new_logp],
        ))
    }

    /// Per-token `exp(ref − new) − (ref − new) − 1`, a non-negative estimate of
    /// KL(π_new ‖ π_ref).
    pub fn kl_penalty(&mut self, new_logp: NodeId, ref_logp: &[f64]) -> Result<NodeId> {
        let n = self.value(new_logp).len();
        if ref_logp.len() != n {
            return Err(Error::Shape {
                op: "kl-penalty",
                lhs: vec![n],
                rhs: vec![ref_logp.len()],
            });
        }
        let data = self
            .value(new_logp)
            .data()
            .iter()
            .zip(ref_logp)
            .map(|(&nw, &r)| {
                let d = r - nw;
                d.exp() - d - 1.0
            })
            .collect();
        let v = Array::new(vec![n], data)?;
        Ok(self.push(
            v,
            Op::KlPenalty {
                new: new_logp,
                reference: ref_logp.into(),
            },
            &[new_logp],
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Array::full(rv.shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for id in self.names.values() {
            if self.nodes[id.0].requires_grad && grads[id.0].is_none() {
                grads[id.0] = Some(Array::zeros(self.shape(*id)));
            }
        }
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array>], id: NodeId, g: Array) {
        if !self.wants(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Sum `g` (shape of `a`) down to the broadcast shape of `b`.
    fn reduce_to(&self, g: Vec<f64>, b: NodeId) -> Array {
        let bs = self.shape(b);
        let nb: usize = bs.iter().product();
        if nb == g.len() {
            return Array::new(bs.to_vec(), g).unwrap();
        }
        let mut out = vec![0.0; nb];
        for (i, x) in g.iter().enumerate() {
            out[i % nb] += x;
        }
        Array::new(bs.to_vec(), out).unwrap()
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    let bview = if *trans_b {
                        View::row_major(self.value(*b).data(), k)
                    } else {
                        View::row_major(self.value(*b).data(), n).transposed()
                    };
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::row_major(gd, n),
                        bview,
                        0.0,
                        ViewMut::row_major(&mut da, k),
                    );
                    self.accumulate(grads, *a, Array::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let av = View::row_major(self.value(*a).data(), k).transposed();
                    if *trans_b {
                        // db (n×k) = gᵀ (n×m) · a (m×k)
                        let mut db = vec![0.0; n * k];
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            View::row_major(gd, n).transposed(),
                            View::row_major(self.value(*a).data(), k),
                            0.0,
                            ViewMut::row_major(&mut db, k),
                        );
                        self.accumulate(grads, *b, Array::new(vec![n, k], db)?);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            av,
                            View::row_major(gd, n),
                            0.0,
                            ViewMut::row_major(&mut db, n),
                        );
                        self.accumulate(grads, *b, Array::new(vec![k, n], db)?);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = gd.iter().map(|x| sign * x).collect();
                    let r = self.reduce_to(gb, *b);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let nb = bd.len();
                if self.wants(*a) {
                    let ga: Vec<f64> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * bd[i % nb])
                        .collect();
                    self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = gd.iter().zip(ad).map(|(x, y)| x * y).collect();
                    let r = self.reduce_to(gb, *b);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Scale { a, s } => {
                let ga = gd.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut gt = vec![0.0; ts[0] * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in gt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *table, Array::new(ts, gt)?);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for ((gy, yy), out) in gd.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gy.iter().zip(yy).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        out[j] = yy[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for ((gy, yy), out) in gd.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let s: f64 = gy.iter().sum();
                    for j in 0..c {
                        out[j] = gy[j] - yy[j].exp() * s;
                    }
                }
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::RmsNorm { a, eps } => {
                let x = self.value(*a).data();
                let c = node.value.cols();
                let mut ga = vec![0.0; x.len()];
                for ((gy, xx), out) in gd.chunks(c).zip(x.chunks(c)).zip(ga.chunks_mut(c)) {
                    let ms = xx.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    let dot: f64 = gy.iter().zip(xx).map(|(p, q)| p * q).sum();
                    let coef = r * r * r * dot / c as f64;
                    for j in 0..c {
                        out[j] = r * gy[j] - xx[j] * coef;
                    }
                }
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(gy, &xx)| gy * gelu_scalar(xx).1)
                    .collect();
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::MaskedSelect { a, b, mask } => {
                let c = node.value.cols();
                let mut ga = vec![0.0; gd.len()];
                let mut gb = vec![0.0; gd.len()];
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut gb } else { &mut ga };
                    dst[r * c..(r + 1) * c].copy_from_slice(&gd[r * c..(r + 1) * c]);
                }
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Array::new(g.shape().to_vec(), gb)?);
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let mut ga = vec![0.0; s.iter().product()];
                if s.len() == 1 {
                    ga[*start..*start + gd.len()].copy_from_slice(gd);
                } else if *axis == 0 {
                    let c = s[1];
                    ga[start * c..start * c + gd.len()].copy_from_slice(gd);
                } else {
                    let c = s[1];
                    let len = node.value.cols();
                    for r in 0..s[0] {
                        ga[r * c + start..r * c + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                }
                self.accumulate(grads, *a, Array::new(s, ga)?);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let part = gd[off..off + n].to_vec();
                        off += n;
                        self.accumulate(grads, *p, Array::new(self.shape(*p).to_vec(), part)?);
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut part = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            part.extend_from_slice(&gd[r * total + col..r * total + col + w]);
                        }
                        col += w;
                        self.accumulate(grads, *p, Array::new(self.shape(*p).to_vec(), part)?);
                    }
                }
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, Array::full(self.shape(*a), gd[0] / n as f64));
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, Array::full(self.shape(*a), gd[0]));
            }
            Op::SumOfSquares { a } => {
                let x = self.value(*a);
                let ga = x.data().iter().map(|v| 2.0 * v * gd[0]).collect();
                self.accumulate(grads, *a, Array::new(x.shape().to_vec(), ga)?);
            }
            Op::Pick { a, idx } => {
                let s = self.shape(*a).to_vec();
                let cols = s[1];
                let mut ga = vec![0.0; s[0] * cols];
                for (r, &j) in idx.iter().enumerate() {
                    ga[r * cols + j] = gd[r];
                }
                self.accumulate(grads, *a, Array::new(s, ga)?);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                n_heads,
                probs,
            } => {
                let (rows, d) = (node.value.rows(), node.value.cols());
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut p_off = 0;
                for seg in &layout.segments {
                    let l = seg.len;
                    let mut dp = vec![0.0; l * l];
                    for h in 0..*n_heads {
                        let p = &probs[p_off..p_off + l * l];
                        let base = seg.start * d + h * dh;
                        let strided = |data| View {
                            data,
                            offset: base,
                            rs: d,
                            cs: 1,
                        };
                        // dV = Pᵀ dO
                        gemm(
                            l,
                            l,
                            dh,
                            1.0,
                            View::row_major(p, l).transposed(),
                            strided(gd),
                            0.0,
                            ViewMut {
                                data: &mut gv,
                                offset: base,
                                rs: d,
                                cs: 1,
                            },
                        );
                        // dP = dO Vᵀ
                        gemm(
                            l,
                            dh,
                            l,
                            1.0,
                            strided(gd),
                            strided(vd).transposed(),
                            0.0,
                            ViewMut::row_major(&mut dp, l),
                        );
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        for i in 0..l {
                            let pr = &p[i * l..(i + 1) * l];
                            let dr = &mut dp[i * l..(i + 1) * l];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..l {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        // dQ = dS K · scale ; dK = dSᵀ Q · scale
                        gemm(
                            l,
                            l,
                            dh,
                            scale,
                            View::row_major(&dp, l),
                            strided(kd),
                            0.0,
                            ViewMut {
                                data: &mut gq,
                                offset: base,
                                rs: d,
                                cs: 1,
                            },
                        );
                        gemm(
                            l,
                            l,
                            dh,
                            scale,
                            View::row_major(&dp, l).transposed(),
                            strided(qd),
                            0.0,
                            ViewMut {
                                data: &mut gk,
                                offset: base,
                                rs: d,
                                cs: 1,
                            },
                        );
                        p_off += l * l;
                    }
                }
                self.accumulate(grads, *q, Array::new(vec![rows, d], gq)?);
                self.accumulate(grads, *k, Array::new(vec![rows, d], gk)?);
                self.accumulate(grads, *v, Array::new(vec![rows, d], gv)?);
            }
            Op::Rotary {
                a,
                positions,
                n_heads,
                base,
            } => {
                let d = node.value.cols();
                let mut ga = gd.to_vec();
                rotate(&mut ga, positions, d, *n_heads, *base, -1.0);
                self.accumulate(grads, *a, Array::new(g.shape().to_vec(), ga)?);
            }
            Op::StraightThrough { x } => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::ClippedSurrogate { new, old, adv, eps } => {
                let nv = self.value(*new).data();
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(i, gy)| gy * surrogate_term(nv[i], old[i], adv[i], *eps).1)
                    .collect();
                self.accumulate(grads, *new, Array::new(self.shape(*new).to_vec(), ga)?);
            }
            Op::KlPenalty { new, reference } => {
                let nv = self.value(*new).data();
                let ga = gd
                    .iter()
                    .enumerate()
                    .map(|(i, gy)| gy * (1.0 - (reference[i] - nv[i]).exp()))
                    .collect();
                self.accumulate(grads, *new, Array::new(self.shape(*new).to_vec(), ga)?);
            }
        }
        Ok(())
    }
}

/// Value and derivative (w.r.t. the new log-prob) of one clipped surrogate term.
fn surrogate_term(new: f64, old: f64, adv: f64, eps: f64) -> (f64, f64) {
    let ratio = (new - old).exp();
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    let unclipped_val = ratio * adv;
    let clipped_val = clipped * adv;
    if unclipped_val <= clipped_val {
        (unclipped_val, ratio * adv)
    } else {
        // The clipped branch is constant in `new` outside the band.
        let inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
        (clipped_val, if inside { ratio * adv } else { 0.0 })
    }
}

fn softmax_row(row: &mut [f64], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.is_none_or(|m| m[j]);
    let mut mx = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if allowed(j) && x > mx {
            mx = x;
        }
    }
    if mx == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allowed(j) {
            *x = (*x - mx).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn rotate(data: &mut [f64], positions: &[f64], d: usize, n_heads: usize, base: f64, dir: f64) {
    let dh = d / n_heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut data[r * d..(r + 1) * d];
        for (i, f) in inv_freq.iter().enumerate() {
            let (s, c) = (dir * pos * f).sin_cos();
            for h in 0..n_heads {
                let (i1, i2) = (h * dh + i, h * dh + i + half);
                let (x1, x2) = (row[i1], row[i2]);
                row[i1] = x1 * c - x2 * s;
                row[i2] = x1 * s + x2 * c;
            }
        }
    }
}
