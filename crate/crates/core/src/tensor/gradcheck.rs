//! Central finite-difference checks against [`Graph::backward`].

use rand::seq::index::sample;
use rand::Rng;

use super::{Array, Graph, NodeId, Precision};
use crate::error::Result;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative tolerance used throughout the crate's gradient checks.
pub const REL_TOL: f64 = 1e-4;
/// Absolute error below which a coordinate always passes.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares gradients of a scalar function of `inputs` with central
/// differences of step `h`, evaluated in 64-bit mode.
///
/// `build` must create the scalar loss from the leaves it is handed. When
/// `max_coords` is `Some(n)`, at most `n` randomly chosen coordinates per input
/// are perturbed.
pub fn check<F>(
    inputs: &[Array],
    build: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut impl Rng,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let ids: Vec<NodeId> = arrays.iter().map(|a| g.constant(a.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new(Precision::F64);
    let ids: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&mut g, &ids)?;
    let grads = g.backward(root)?;

    let mut report = CheckReport::default();
    let mut work = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let n = inputs[which].len();
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[which].shape()));
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => sample(rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[which].data()[c];
            work[which].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            // A denominator floor of ABS_FLOOR / REL_TOL makes `rel < REL_TOL`
            // equivalent to "relative error < REL_TOL or absolute error < ABS_FLOOR".
            let rel = relative_error(a, numeric, ABS_FLOOR / REL_TOL);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((which, c));
            }
        }
    }
    Ok(report)
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One seeded gradient-check case for a single op.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Array>,
    build: Builder,
}

impl OpCase {
    pub fn run(&self, rng: &mut impl Rng) -> Result<CheckReport> {
        check(&self.inputs, &self.build, 1e-4, None, rng)
    }
}

/// Contracts `out` against a fixed random array so every output element
/// contributes to the scalar with a distinct weight.
fn project(g: &mut Graph, out: NodeId, w: &Array) -> Result<NodeId> {
    let wn = g.constant(w.clone());
    let p = g.mul(out, wn)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Array>,
    out_shape: &[usize],
    rng: &mut impl Rng,
    f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> OpCase {
    let w = Array::randn(out_shape, 1.0, rng);
    OpCase {
        name,
        inputs,
        build: Box::new(move |g, ids| {
            let out = f(g, ids)?;
            project(g, out, &w)
        }),
    }
}

/// Small random instances of every differentiable op on the tape.
///
/// The straight-through op is excluded: its forward value does not depend on
/// its input, so finite differences are zero by construction.
pub fn op_cases(rng: &mut impl Rng) -> Vec<OpCase> {
    use std::rc::Rc;

    use super::{AttnLayout, Segment};

    let (m, k, n) = (
        rng.random_range(1..5usize),
        rng.random_range(1..5usize),
        rng.random_range(1..5usize),
    );
    let mut r = |shape: &[usize]| Array::randn(shape, 1.0, rng);
    let a_mk = r(&[m, k]);
    let b_kn = r(&[k, n]);
    let b_nk = r(&[n, k]);
    let x = r(&[m, n]);
    let y = r(&[m, n]);
    let row = r(&[n]);
    let table = r(&[6, n]);
    let cols = r(&[m, 4]);
    let attn_q = r(&[7, 4]);
    let attn_k = r(&[7, 4]);
    let attn_v = r(&[7, 4]);
    let rot = r(&[3, 8]);
    let logp = r(&[6]).into_data().iter().map(|v| v * 0.3 - 1.0).collect::<Vec<_>>();
    let old: Vec<f64> = logp.iter().map(|v| v + 0.05).collect();
    let adv: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 } else { -0.7 }).collect();
    let far: Vec<f64> = logp.iter().map(|v| v - 0.9).collect();

    let mask: Vec<bool> = (0..m * n).map(|i| i % 3 != 1).collect();
    let row_mask: Vec<bool> = (0..m).map(|i| i % 2 == 0).collect();
    let ids: Vec<usize> = (0..5).map(|i| (i * 4 + 1) % 6).collect();
    let pick_idx: Vec<usize> = (0..m).map(|i| i % n).collect();
    let layout = Rc::new(AttnLayout::new(vec![
        Segment::causal(0, 3),
        Segment {
            start: 3,
            len: 4,
            causal: true,
            key_valid: Some(vec![true, false, true, true]),
        },
    ]));
    let full_layout = Rc::new(AttnLayout::new(vec![Segment::full(0, 7)]));
    let positions: Rc<[f64]> = vec![0.0, 3.0, 11.0].into();

    let mut cases = Vec::new();
    let mut add = |c: OpCase| cases.push(c);
    add(case("matmul", vec![a_mk.clone(), b_kn], &[m, n], rng, |g, i| {
        g.matmul(i[0], i[1])
    }));
    add(case("matmul-nt", vec![a_mk, b_nk], &[m, n], rng, |g, i| {
        g.matmul_nt(i[0], i[1])
    }));
    add(case("add", vec![x.clone(), y.clone()], &[m, n], rng, |g, i| {
        g.add(i[0], i[1])
    }));
    add(case("add-broadcast", vec![x.clone(), row.clone()], &[m, n], rng, |g, i| {
        g.add(i[0], i[1])
    }));
    add(case("sub", vec![x.clone(), y.clone()], &[m, n], rng, |g, i| {
        g.sub(i[0], i[1])
    }));
    add(case("mul", vec![x.clone(), y.clone()], &[m, n], rng, |g, i| {
        g.mul(i[0], i[1])
    }));
    add(case("mul-broadcast", vec![x.clone(), row], &[m, n], rng, |g, i| {
        g.mul(i[0], i[1])
    }));
    add(case("scale", vec![x.clone()], &[m, n], rng, |g, i| Ok(g.scale(i[0], -1.7))));
    add(case("embedding-lookup", vec![table], &[5, n], rng, move |g, i| {
        g.embedding(i[0], &ids)
    }));
    add(case("softmax", vec![x.clone()], &[m, n], rng, |g, i| g.softmax(i[0])));
    {
        let mask = mask.clone();
        add(case("masked-softmax", vec![x.clone()], &[m, n], rng, move |g, i| {
            let mut mk = mask.clone();
            // Keep at least one entry per row.
            for rr in 0..mk.len() / n {
                mk[rr * n] = true;
            }
            g.masked_softmax(i[0], &mk)
        }));
    }
    add(case("log-softmax", vec![x.clone()], &[m, n], rng, |g, i| g.log_softmax(i[0])));
    add(case("rms-normalize", vec![x.clone()], &[m, n], rng, |g, i| {
        g.rms_norm(i[0], 1e-6)
    }));
    add(case("gelu", vec![x.clone()], &[m, n], rng, |g, i| g.gelu(i[0])));
    add(case(
        "masked-select-add",
        vec![x.clone(), y.clone()],
        &[m, n],
        rng,
        move |g, i| g.masked_select_add(i[0], i[1], &row_mask),
    ));
    add(case("slice-rows", vec![cols.clone()], &[1, 4], rng, move |g, i| {
        g.slice(i[0], 0, m - 1, 1)
    }));
    add(case("slice-cols", vec![cols.clone()], &[m, 2], rng, |g, i| g.slice(i[0], 1, 1, 2)));
    add(case(
        "concat-rows",
        vec![x.clone(), y.clone()],
        &[2 * m, n],
        rng,
        |g, i| g.concat(&[i[0], i[1]], 0),
    ));
    add(case(
        "concat-cols",
        vec![x.clone(), cols],
        &[m, n + 4],
        rng,
        |g, i| g.concat(&[i[0], i[1]], 1),
    ));
    add(case("mean", vec![x.clone()], &[1], rng, |g, i| Ok(g.mean(i[0]))));
    add(case("sum", vec![x.clone()], &[1], rng, |g, i| Ok(g.sum(i[0]))));
    add(case("sum-of-squares", vec![x.clone()], &[1], rng, |g, i| {
        Ok(g.sum_of_squares(i[0]))
    }));
    add(case("pick", vec![x], &[m], rng, move |g, i| g.pick(i[0], &pick_idx)));
    add(case(
        "attention",
        vec![attn_q.clone(), attn_k.clone(), attn_v.clone()],
        &[7, 4],
        rng,
        move |g, i| g.attention(i[0], i[1], i[2], layout.clone(), 2),
    ));
    add(case(
        "attention-bidirectional",
        vec![attn_q, attn_k, attn_v],
        &[7, 4],
        rng,
        move |g, i| g.attention(i[0], i[1], i[2], full_layout.clone(), 1),
    ));
    add(case("rotary", vec![rot], &[3, 8], rng, move |g, i| {
        g.rotary(i[0], positions.clone(), 2, 10_000.0)
    }));
    {
        let (old, adv) = (old.clone(), adv.clone());
        add(case(
            "clipped-surrogate",
            vec![Array::from_vec(logp.clone())],
            &[6],
            rng,
            move |g, i| g.clipped_surrogate(i[0], &old, &adv, 0.2),
        ));
    }
    add(case(
        "clipped-surrogate-saturated",
        vec![Array::from_vec(logp.clone())],
        &[6],
        rng,
        move |g, i| g.clipped_surrogate(i[0], &far, &adv, 0.2),
    ));
    add(case("kl-penalty", vec![Array::from_vec(logp)], &[6], rng, move |g, i| {
        g.kl_penalty(i[0], &old)
    }));
    cases
}
