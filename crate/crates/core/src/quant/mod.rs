//! Vector quantizers: single-book VQ, residual VQ, group-wise VQ, and
//! query-based temporal compression, plus the synthetic feature bank and the
//! end-to-end tokenizer built from them.

mod features;
mod group;
mod query;
mod tokenizer;

pub use features::{ClipFeatures, SyntheticFeatureBank};
pub use group::{GroupQuantizer, GroupResult, ENV_LEVELS};
pub use query::{compressed_len, QueryCompressor, INTERLEAVE};
pub use tokenizer::{Tokenizer, TokenizerConfig, TokenizedClip};

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::{Array, Graph, NodeId};

/// Commitment coefficient of the straight-through quantizer.
pub const BETA: f64 = 0.25;

/// One codebook. When `pinned_zero` is set, entry 0 is the zero vector and is
/// never moved by updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub entries: Array,
    pub usage: Vec<u64>,
    pub pinned_zero: bool,
}

impl Codebook {
    pub fn new(entries: Array, pinned_zero: bool) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 entries of shape [n, d], got {:?}",
                entries.shape()
            )));
        }
        let mut entries = entries;
        if pinned_zero {
            let d = entries.cols();
            entries.data_mut()[..d].fill(0.0);
        }
        Ok(Self {
            usage: vec![0; entries.rows()],
            entries,
            pinned_zero,
        })
    }

    /// Gaussian entries with index 0 pinned to zero.
    pub fn random(n: usize, d: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self::new(Array::randn(&[n, d], std, rng), true).expect("n >= 2")
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entry(&self, i: usize) -> &[f64] {
        self.entries.row(i)
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.len() {
            let d: f64 = x
                .iter()
                .zip(self.entry(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn store(&self, store: &mut ParamStore, name: &str) {
        store.insert(name, self.entries.clone());
    }

    pub fn load(store: &ParamStore, name: &str, pinned_zero: bool) -> Result<Self> {
        Self::new(store.get(name)?.clone(), pinned_zero)
    }
}

/// Output of a (residual) quantizer over a batch of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    /// `codes[level][frame]`.
    pub codes: Vec<Vec<u32>>,
    pub quantized: Array,
    /// Residual remaining after each level.
    pub residuals: Vec<Array>,
    /// Mean L2 norm of the residual after each level.
    pub residual_norms: Vec<f64>,
    pub commit_loss: f64,
}

fn mean_row_norm(a: &Array) -> f64 {
    let c = a.cols();
    a.data()
        .chunks(c)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / a.rows() as f64
}

/// Single-book quantization of the rows of `x`.
pub fn vq_quantize(x: &Array, book: &Codebook) -> Result<QuantizationResult> {
    rvq_quantize(x, std::slice::from_ref(book), 1)
}

/// Residual quantization through the first `n_levels` books.
pub fn rvq_quantize(x: &Array, books: &[Codebook], n_levels: usize) -> Result<QuantizationResult> {
    if n_levels == 0 || n_levels > books.len() {
        return Err(Error::invalid(format!(
            "n_levels must be in 1..={}, got {n_levels}",
            books.len()
        )));
    }
    let d = x.cols();
    for b in &books[..n_levels] {
        if b.dim() != d {
            return Err(Error::Shape {
                op: "vq",
                lhs: x.shape().to_vec(),
                rhs: b.entries.shape().to_vec(),
            });
        }
    }
    let frames = x.rows();
    let mut residual = x.clone();
    let mut quantized = Array::zeros(&[frames, d]);
    let mut codes = Vec::with_capacity(n_levels);
    let mut residuals = Vec::with_capacity(n_levels);
    let mut residual_norms = Vec::with_capacity(n_levels);
    for book in &books[..n_levels] {
        let mut level = Vec::with_capacity(frames);
        for f in 0..frames {
            let i = book.nearest(residual.row(f));
            level.push(i as u32);
            let e = book.entry(i);
            for c in 0..d {
                quantized.data_mut()[f * d + c] += e[c];
                residual.data_mut()[f * d + c] -= e[c];
            }
        }
        codes.push(level);
        residual_norms.push(mean_row_norm(&residual));
        residuals.push(residual.clone());
    }
    let commit_loss = BETA
        * x.data()
            .iter()
            .zip(quantized.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
        / frames as f64;
    Ok(QuantizationResult {
        codes,
        quantized,
        residuals,
        residual_norms,
        commit_loss,
    })
}

/// Sum of the selected entries of each level.
pub fn dequantize(codes: &[Vec<u32>], books: &[Codebook]) -> Result<Array> {
    let frames = codes.first().map_or(0, Vec::len);
    if frames == 0 {
        return Err(Error::invalid("no frames to dequantize"));
    }
    let d = books[0].dim();
    let mut out = Array::zeros(&[frames, d]);
    for (level, book) in codes.iter().zip(books) {
        for (f, &c) in level.iter().enumerate() {
            let c = c as usize;
            if c >= book.len() {
                return Err(Error::Index {
                    what: "codebook",
                    index: c,
                    size: book.len(),
                });
            }
            for (o, e) in out.data_mut()[f * d..(f + 1) * d].iter_mut().zip(book.entry(c)) {
                *o += e;
            }
        }
    }
    Ok(out)
}

/// Quantizes a node on the tape with a straight-through estimator. Returns the
/// quantized node (value `q`, gradient passed to `x`) and the commitment loss
/// `β · mean_frames ‖x − sg(q)‖²`.
pub fn vq_straight_through(
    g: &mut Graph,
    x: NodeId,
    books: &[Codebook],
    n_levels: usize,
) -> Result<(NodeId, NodeId, QuantizationResult)> {
    let res = rvq_quantize(g.value(x), books, n_levels)?;
    let q = g.straight_through(x, &res.quantized)?;
    let qc = g.constant(res.quantized.clone());
    let diff = g.sub(x, qc)?;
    let sq = g.sum_of_squares(diff);
    let commit = g.scale(sq, BETA / res.quantized.rows() as f64);
    Ok((q, commit, res))
}

/// Codebook-side loss `mean_frames ‖sg(x) − e_code‖²` for gradient-mode updates,
/// with the entries bound as parameter `name` on the session.
pub fn codebook_loss(sess: &mut Session, x: &Array, codes: &[u32], name: &str) -> Result<NodeId> {
    let e = sess.p(name)?;
    let ids: Vec<usize> = codes.iter().map(|c| *c as usize).collect();
    let q = sess.g.embedding(e, &ids)?;
    let xc = sess.g.constant(x.clone());
    let diff = sess.g.sub(xc, q)?;
    let sq = sess.g.sum_of_squares(diff);
    Ok(sess.g.scale(sq, 1.0 / codes.len() as f64))
}

/// Exponential-moving-average codebook updates with dead-entry reseeding.
#[derive(Clone, Debug)]
pub struct EmaUpdater {
    pub decay: f64,
}

impl Default for EmaUpdater {
    fn default() -> Self {
        Self { decay: 0.99 }
    }
}

impl EmaUpdater {
    /// `e_k ← decay·e_k + (1 − decay)·mean{x : code(x) = k}` for every entry
    /// that received at least one vector; usage counters accumulate.
    pub fn update(&self, book: &mut Codebook, x: &Array, codes: &[u32]) {
        let d = book.dim();
        let n = book.len();
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0u64; n];
        for (f, &c) in codes.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(f)) {
                *s += v;
            }
        }
        for k in 0..n {
            book.usage[k] += counts[k];
            if counts[k] == 0 || (k == 0 && book.pinned_zero) {
                continue;
            }
            let inv = 1.0 / counts[k] as f64;
            for c in 0..d {
                let e = &mut book.entries.data_mut()[k * d + c];
                *e = self.decay * *e + (1.0 - self.decay) * sums[k * d + c] * inv;
            }
        }
    }

    /// Reseeds entries unused since the last call from random rows of `pool`
    /// and resets all usage counters. Returns the reseeded indices.
    pub fn end_epoch(&self, book: &mut Codebook, pool: &Array, rng: &mut impl Rng) -> Vec<usize> {
        let d = book.dim();
        let mut reseeded = Vec::new();
        for k in 0..book.len() {
            if book.usage[k] == 0 && !(k == 0 && book.pinned_zero) {
                let r = rng.random_range(0..pool.rows());
                book.entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(pool.row(r));
                reseeded.push(k);
            }
        }
        book.usage.fill(0);
        reseeded
    }
}

/// Fits residual books to `x` with a few EMA passes (k-means-like).
pub fn fit_rvq(books: &mut [Codebook], x: &Array, epochs: usize, decay: f64, rng: &mut impl Rng) -> Result<()> {
    let ema = EmaUpdater { decay };
    for _ in 0..epochs {
        let mut residual = x.clone();
        for level in 0..books.len() {
            let res = vq_quantize(&residual, &books[level])?;
            ema.update(&mut books[level], &residual, &res.codes[0]);
            ema.end_epoch(&mut books[level], &residual, rng);
            residual = res.residuals[0].clone();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[Vec<f64>]) -> Codebook {
        Codebook::new(Array::from_rows(rows).unwrap(), false).unwrap()
    }

    #[test]
    fn exact_match_and_ties() {
        let b = book(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0], vec![1.0, 1.0]]);
        let x = Array::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = vq_quantize(&x, &b).unwrap();
        assert_eq!(r.codes[0], vec![3, 0]);
        assert_eq!(r.residuals[0].row(0), &[0.0, 0.0]);
    }

    #[test]
    fn too_small_books_and_levels() {
        assert!(Codebook::new(Array::zeros(&[1, 2]), true).is_err());
        let b = book(&[vec![0.0], vec![1.0]]);
        assert!(rvq_quantize(&Array::zeros(&[1, 1]), &[b], 0).is_err());
    }

    #[test]
    fn dequantize_matches_quantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let books: Vec<Codebook> = (0..4).map(|_| Codebook::random(8, 3, 1.0, &mut rng)).collect();
        let x = Array::randn(&[20, 3], 1.0, &mut rng);
        let r = rvq_quantize(&x, &books, 4).unwrap();
        assert_eq!(dequantize(&r.codes, &books).unwrap(), r.quantized);
    }

    #[test]
    fn ema_recursion_closed_form() {
        let mut b = book(&[vec![4.0, -2.0], vec![9.0, 9.0]]);
        let v = [1.0, 1.0];
        let x = Array::from_rows(&[v.to_vec(), v.to_vec()]).unwrap();
        let ema = EmaUpdater { decay: 0.9 };
        let mut prev = f64::INFINITY;
        for t in 1..=50 {
            ema.update(&mut b, &x, &[0, 0]);
            let dist = ((b.entry(0)[0] - 1.0).powi(2) + (b.entry(0)[1] - 1.0).powi(2)).sqrt();
            assert!(dist < prev);
            let want = 1.0 + 0.9f64.powi(t) * 3.0;
            assert!((b.entry(0)[0] - want).abs() < 1e-12);
            prev = dist;
        }
        let before = b.clone();
        EmaUpdater { decay: 1.0 }.update(&mut b, &x, &[0, 1]);
        assert_eq!(b.entries, before.entries);
    }

    #[test]
    fn dead_entries_reseeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Codebook::random(4, 2, 1.0, &mut rng);
        let x = Array::from_rows(&[b.entry(1).to_vec()]).unwrap();
        let ema = EmaUpdater::default();
        ema.update(&mut b, &x, &[1]);
        let reseeded = ema.end_epoch(&mut b, &x, &mut rng);
        assert_eq!(reseeded, vec![2, 3]);
        assert!(b.usage.iter().all(|u| *u == 0));
        assert_eq!(b.entry(0), &[0.0, 0.0]);
    }
}
