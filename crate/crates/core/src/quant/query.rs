use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{block, init_block, init_linear, linear, rms_norm, AttnCtx};
use crate::params::{ParamStore, Session};
use crate::tensor::{Array, AttnLayout, NodeId, Segment};

/// Input frames summarized by one query.
pub const INTERLEAVE: usize = 5;

/// Queries per attention chunk (10 s of input).
pub const CHUNK_QUERIES: usize = 50;

/// Number of query states for an input of `t` frames.
pub fn compressed_len(t: usize) -> usize {
    t.div_ceil(INTERLEAVE)
}

/// Learned queries attending jointly with the input frames through a small
/// bidirectional attention stack; the query rows are the output. Long inputs
/// are split into independent chunks.
#[derive(Clone, Debug)]
pub struct QueryCompressor {
    pub prefix: String,
    pub d_in: usize,
    pub d_q: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
}

fn sinusoid(m: usize, d: usize) -> Array {
    let mut a = Array::zeros(&[m, d]);
    for i in 0..m {
        for c in 0..d / 2 {
            let f = (i as f64) / 10_000f64.powf(2.0 * c as f64 / d as f64);
            a.data_mut()[i * d + 2 * c] = f.sin();
            a.data_mut()[i * d + 2 * c + 1] = f.cos();
        }
    }
    a
}

impl QueryCompressor {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_q: usize,
        n_blocks: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        init_linear(store, &format!("{prefix}.in"), d_in, d_q, 1.0, rng);
        store.insert(format!("{prefix}.query"), Array::randn(&[d_q], 0.5, rng));
        for b in 0..n_blocks {
            init_block(store, &format!("{prefix}.block.{b}"), d_q, n_blocks, rng);
        }
        store.insert(format!("{prefix}.norm"), Array::full(&[d_q], 1.0));
        Self {
            prefix: prefix.into(),
            d_in,
            d_q,
            n_blocks,
            n_heads,
        }
    }

    /// `h: T × d_in` → `ceil(T/5) × d_q`.
    pub fn compress(&self, s: &mut Session, h: NodeId) -> Result<NodeId> {
        let shape = s.g.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(Error::Shape {
                op: "query-compress",
                lhs: shape,
                rhs: vec![self.d_in],
            });
        }
        let t = shape[0];
        let m = compressed_len(t);
        let hp = linear(s, h, &format!("{}.in", self.prefix))?;
        let pos_q = s.g.constant(sinusoid(m, self.d_q));
        let base = s.p(&format!("{}.query", self.prefix))?;
        let q = s.g.add(pos_q, base)?;
        // Attention runs within chunks of CHUNK_QUERIES queries and their
        // input windows, laid out as [inputs, queries] per chunk. Each query
        // sits at the centre of the input window it summarizes.
        let mut pieces = Vec::new();
        let mut segments = Vec::new();
        let mut positions = Vec::with_capacity(t + m);
        let mut query_rows = Vec::with_capacity(m);
        for q0 in (0..m).step_by(CHUNK_QUERIES) {
            let q1 = (q0 + CHUNK_QUERIES).min(m);
            let (i0, i1) = (q0 * INTERLEAVE, (q1 * INTERLEAVE).min(t));
            let start = positions.len();
            pieces.push(s.g.slice(hp, 0, i0, i1 - i0)?);
            pieces.push(s.g.slice(q, 0, q0, q1 - q0)?);
            positions.extend((i0..i1).map(|i| i as f64));
            query_rows.extend(positions.len()..positions.len() + q1 - q0);
            positions.extend((q0..q1).map(|j| (j * INTERLEAVE + INTERLEAVE / 2) as f64));
            segments.push(Segment::full(start, positions.len() - start));
        }
        let mut x = s.g.concat(&pieces, 0)?;
        let ctx = AttnCtx {
            layout: AttnLayout::new(segments).into(),
            positions: positions.into(),
            n_heads: self.n_heads,
            rope_base: 10_000.0,
        };
        for b in 0..self.n_blocks {
            x = block(s, &format!("{}.block.{b}", self.prefix), x, &ctx)?;
        }
        let out = s.g.embedding(x, &query_rows)?;
        rms_norm(s, out, &format!("{}.norm", self.prefix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use crate::tensor::Precision;
    use rand::SeedableRng;

    #[test]
    fn output_length_law() {
        for (t, m) in [(23, 5), (5, 1), (1, 1), (10, 2), (11, 3)] {
            assert_eq!(compressed_len(t), m);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(Precision::F64);
        let qc = QueryCompressor::init(&mut store, "qc", 3, 8, 4, 2, &mut rng);
        for t in [1, 5, 23, 251, 600] {
            let mut s = Session::new(&store, Precision::F64, Trainable::Nothing);
            let h = s.g.constant(Array::randn(&[t, 3], 1.0, &mut rng));
            let out = qc.compress(&mut s, h).unwrap();
            assert_eq!(s.g.shape(out), &[compressed_len(t), 8]);
        }
    }

    #[test]
    fn chunks_do_not_interact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new(Precision::F64);
        let qc = QueryCompressor::init(&mut store, "qc", 3, 8, 2, 2, &mut rng);
        let h = Array::randn(&[300, 3], 1.0, &mut rng);
        let mut h2 = h.clone();
        h2.data_mut()[280 * 3] += 1.0;
        let run = |h: &Array| {
            let mut s = Session::new(&store, Precision::F64, Trainable::Nothing);
            let x = s.g.constant(h.clone());
            let out = qc.compress(&mut s, x).unwrap();
            s.g.value(out).clone()
        };
        let (a, b) = (run(&h), run(&h2));
        assert_eq!(a.data()[..CHUNK_QUERIES * 8], b.data()[..CHUNK_QUERIES * 8]);
        assert_ne!(a.data()[CHUNK_QUERIES * 8..], b.data()[CHUNK_QUERIES * 8..]);
    }
}
