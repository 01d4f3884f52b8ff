//! Acceptance suite: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use factorlm::backbone::Model;
use factorlm::forge::{check_record, synth_corpus, Strategy, SyntheticCorpusSpec};
use factorlm::grpo::group_advantages;
use factorlm::harness::{
    evaluate, forge_corpus, pack_rows, run_stage, train_flow_toy, ConditionMode, FlowToyConfig, StageSpec,
    TrainOptions,
};
use factorlm::info::{entropy_gap, Joint3};
use factorlm::objectives::{guided_velocity, lm_loss, LossConfig};
use factorlm::params::{ParamStore, Session, Trainable};
use factorlm::quant::{rvq_quantize, vq_quantize, vq_straight_through, Codebook, Tokenizer, TokenizerConfig};
use factorlm::tensor::gradcheck::{op_cases, relative_error, ABS_FLOOR, REL_TOL};
use factorlm::tensor::{Array, Graph, Precision};
use factorlm::vocab::{fuse_embeddings, frame_budget, Item, Record, TokenGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("runtime {:.1}s exceeds {limit_s}s", elapsed.as_secs_f64())
    })
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Finite differences of the full toy loss over sampled coordinates of every
/// parameter tensor.
fn toy_loss_gradcheck(seed: u64, coords_per_tensor: usize) -> Result<f64, String> {
    let model = Model::toy();
    let store = common::dense_store(&model, seed, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let docs = vec![
        vec![common::mixed_sequence(&model.vocab, 3, &mut rng)],
        vec![common::mixed_sequence(&model.vocab, 2, &mut rng), common::mixed_sequence(&model.vocab, 2, &mut rng)],
    ];
    let grid = TokenGrid::from_docs(&model.vocab, &docs, None).map_err(e)?;
    let cfg = LossConfig {
        lambda_rec: Some(0.5),
        ..LossConfig::default()
    };
    let loss = |st: &ParamStore| -> Result<f64, String> {
        let mut s = Session::new(st, Precision::F64, Trainable::Nothing);
        let lg = lm_loss(&model, &mut s, &grid, &cfg).map_err(e)?;
        Ok(s.g.value(lg.total).item())
    };
    let mut s = Session::new(&store, Precision::F64, Trainable::All);
    let lg = lm_loss(&model, &mut s, &grid, &cfg).map_err(e)?;
    let grads = s.g.backward(lg.total).map_err(e)?.into_named();
    let mut work = store.clone();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (name, a) in store.iter() {
        let g = grads.get(name).ok_or_else(|| format!("no gradient for {name}"))?;
        for _ in 0..coords_per_tensor {
            let c = rng.random_range(0..a.len());
            let orig = a.data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + h;
            let plus = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - h;
            let minus = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            let num = (plus - minus) / (2.0 * h);
            let err = relative_error(g.data()[c], num, ABS_FLOOR / REL_TOL);
            if err >= REL_TOL {
                return Err(format!("seed {seed} {name}[{c}]: analytic {} numeric {num}", g.data()[c]));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn c1_gradients() -> Check {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut n_ops = BTreeSet::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for case in op_cases(&mut rng) {
            let r = case.run(&mut rng).map_err(e)?;
            ensure(r.passes(REL_TOL), || format!("{} seed {seed}: {:e}", case.name, r.max_rel_err))?;
            worst = worst.max(r.max_rel_err);
            n_ops.insert(case.name);
        }
    }
    let mut worst_model: f64 = 0.0;
    for seed in 0..20 {
        worst_model = worst_model.max(toy_loss_gradcheck(seed, 2)?);
    }
    within(t.elapsed(), 120.0)?;
    Ok(format!(
        "{} ops x 20 seeds max rel err {worst:.1e}; toy loss x 20 seeds {worst_model:.1e}; {:.1}s",
        n_ops.len(),
        t.elapsed().as_secs_f64()
    ))
}

fn c2_expert_invariance() -> Check {
    let t = Instant::now();
    let model = Model::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut blocks = 0;
    let mut rows = 0;
    for k in 0..100 {
        let store = common::fuzz_store(&model.init(k, Precision::F32), 0.2, &mut rng);
        let docs = vec![vec![
            common::mixed_sequence(&model.vocab, 6, &mut rng),
            common::mixed_sequence(&model.vocab, 4, &mut rng),
        ]];
        let grid = TokenGrid::from_docs(&model.vocab, &docs, None).map_err(e)?;
        let mut s = Session::new(&store, Precision::F32, Trainable::Nothing);
        let h = model.forward(&mut s, &grid).map_err(e)?;
        let text: Vec<usize> = (0..grid.positions()).filter(|&p| !grid.audio_mask[p]).collect();
        for tr in h.trace.iter().filter(|tr| tr.audio_expert) {
            let (a, b) = (s.g.value(tr.input), s.g.value(tr.output));
            for &p in &text {
                let same = a.row(p).iter().zip(b.row(p)).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure(same, || format!("param set {k}: {} changed text row {p}", tr.name))?;
            }
            blocks += 1;
            rows += text.len();
        }
    }
    within(t.elapsed(), 60.0)?;
    Ok(format!("{blocks} expert blocks, {rows} text rows bit-identical; {:.1}s", t.elapsed().as_secs_f64()))
}

fn c3_fusion_masking() -> Check {
    let model = Model::toy();
    let store = model.init(3, Precision::F32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut slots = 0;
    for k in 0..1000 {
        let n_docs = rng.random_range(1..4);
        let docs: Vec<Vec<Vec<Item>>> = vec![(0..n_docs).map(|_| common::mixed_sequence(&model.vocab, 3, &mut rng)).collect()];
        let len: usize = docs[0].iter().flatten().map(Item::len).sum();
        let grid = TokenGrid::from_docs(&model.vocab, &docs, Some(len + rng.random_range(0..8))).map_err(e)?;
        let mut noisy = grid.clone();
        for (i, present) in grid.stream_mask.iter().enumerate() {
            if !present {
                noisy.tokens[i] = rng.random_range(0..model.vocab.size());
                slots += 1;
            }
        }
        let fused = |g: &TokenGrid| -> Result<Vec<u64>, String> {
            let mut s = Session::new(&store, Precision::F32, Trainable::Nothing);
            let tables = model.stream_tables(&mut s).map_err(e)?;
            let h = fuse_embeddings(&mut s.g, g, &tables).map_err(e)?;
            Ok(s.g.value(h).data().iter().map(|x| x.to_bits()).collect())
        };
        ensure(fused(&grid)? == fused(&noisy)?, || format!("draw {k}: PAD ids leaked into fused embeddings"))?;
    }
    ensure(slots > 0, || "no PAD slots were fuzzed".into())?;
    Ok(format!("1000 draws, {slots} PAD slots randomized, fused embeddings identical"))
}

fn c4_quantizers() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let book = Codebook::new(Array::randn(&[64, 6], 1.0, &mut rng), false).map_err(e)?;
    let x = Array::randn(&[10_000, 6], 1.2, &mut rng);
    let res = vq_quantize(&x, &book).map_err(e)?;
    for f in 0..x.rows() {
        let mut best = (f64::INFINITY, 0);
        for i in 0..book.len() {
            let d: f64 = x.row(f).iter().zip(book.entry(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        ensure(res.codes[0][f] as usize == best.1, || {
            format!("frame {f}: code {} but exhaustive search gives {}", res.codes[0][f], best.1)
        })?;
    }

    let mut batches = 0;
    for _ in 0..50 {
        let books: Vec<Codebook> = (0..8).map(|_| Codebook::random(32, 6, 0.6, &mut rng)).collect();
        let x = Array::randn(&[rng.random_range(1..200), 6], rng.random_range(0.1..3.0), &mut rng);
        let r = rvq_quantize(&x, &books, 8).map_err(e)?;
        let mut prev = x.data().chunks(6).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / x.rows() as f64;
        for (lvl, &n) in r.residual_norms.iter().enumerate() {
            ensure(n <= prev, || format!("level {lvl}: mean residual norm rose from {prev} to {n}"))?;
            prev = n;
        }
        batches += 1;
    }

    let mut g = Graph::new(Precision::F64);
    let xs = Array::randn(&[5, 6], 1.0, &mut rng);
    let w = Array::randn(&[5, 6], 1.0, &mut rng);
    let xn = g.leaf(xs.clone());
    let books = [book];
    let (q, _, res) = vq_straight_through(&mut g, xn, &books, 1).map_err(e)?;
    ensure(g.value(q).data() == res.quantized.data(), || "straight-through value differs from q".into())?;
    let wn = g.constant(w.clone());
    let p = g.mul(q, wn).map_err(e)?;
    let root = g.sum(p);
    let grads = g.backward(root).map_err(e)?;
    ensure(grads.get(xn).map(|a| a.data()) == Some(w.data()), || {
        "straight-through Jacobian is not the identity".into()
    })?;
    Ok(format!(
        "VQ = exhaustive search on 10000 frames; RVQ norms non-increasing over {batches} batches x 8 levels; straight-through Jacobian = I"
    ))
}

fn c5_grpo_algebra() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 0.2;
    let (mut worst_affine, mut worst_mean): (f64, f64) = (0.0, 0.0);
    for k in 0..1000 {
        let n = rng.random_range(2..17);
        let rewards: Vec<f64> = if k % 10 == 0 {
            vec![rng.random::<f64>(); n]
        } else {
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let adv = group_advantages(&rewards);
        let (a, b) = (rng.random_range(0.01..100.0), rng.random_range(-50.0..50.0));
        let scaled: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
        let adv2 = group_advantages(&scaled);
        for (x, y) in adv.iter().zip(&adv2) {
            worst_affine = worst_affine.max((x - y).abs());
        }
        let mean = adv.iter().sum::<f64>() / n as f64;
        worst_mean = worst_mean.max(mean.abs());
        if k % 10 == 0 {
            ensure(adv.iter().all(|&x| x == 0.0), || format!("group {k}: constant rewards gave non-zero advantages"))?;
        }

        // Per-token ratios inside, above and below the band.
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..-0.1)).collect();
        let new: Vec<f64> = old.iter().map(|o| o + rng.random_range(-0.6..0.6)).collect();
        let mut g = Graph::new(Precision::F64);
        let nn = g.leaf(Array::from_vec(new.clone()));
        let s = g.clipped_surrogate(nn, &old, &adv, eps).map_err(e)?;
        let sum = g.sum(s);
        let grad = g.backward(sum).map_err(e)?.get(nn).cloned().unwrap_or_else(|| Array::zeros(&[n]));
        let vals = g.value(s).data();
        for i in 0..n {
            let ratio = (new[i] - old[i]).exp();
            let inside = ratio > 1.0 - eps && ratio < 1.0 + eps;
            if inside {
                ensure(vals[i] == ratio * adv[i] && grad.data()[i] == ratio * adv[i], || {
                    format!("group {k} token {i}: clipping active inside the band")
                })?;
            }
            let clipped = (adv[i] > 0.0 && ratio > 1.0 + eps) || (adv[i] < 0.0 && ratio < 1.0 - eps);
            if clipped {
                ensure(grad.data()[i] == 0.0, || format!("group {k} token {i}: non-zero gradient when clipped"))?;
            }
        }
    }
    ensure(worst_affine < 1e-9, || format!("affine invariance violated by {worst_affine:e}"))?;
    ensure(worst_mean < 1e-12, || format!("advantage mean {worst_mean:e}"))?;
    within(t.elapsed(), 30.0)?;
    Ok(format!(
        "1000 groups: affine diff {worst_affine:.1e}, |mean A| {worst_mean:.1e}, band and clip gradients exact; {:.2}s",
        t.elapsed().as_secs_f64()
    ))
}

/// `H(S|·)` computed straight from conditional frequencies.
fn conditional_entropy(j: &Joint3, with_r: bool) -> f64 {
    let [nx, nr, ns] = j.dims;
    let total = j.total();
    let mut h = 0.0;
    for x in 0..nx {
        let rs: Vec<Vec<usize>> = if with_r { (0..nr).map(|r| vec![r]).collect() } else { vec![(0..nr).collect()] };
        for group in rs {
            let ps: Vec<f64> = (0..ns).map(|s| group.iter().map(|&r| j.get(x, r, s)).sum()).collect();
            let pc: f64 = ps.iter().sum();
            for p in ps.into_iter().filter(|p| *p > 0.0) {
                h -= p / total * (p / pc).ln();
            }
        }
    }
    h
}

fn c6_entropy_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let dims = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
        let mut j = Joint3::new(dims);
        for w in j.weights.iter_mut() {
            if rng.random_bool(0.7) {
                *w = rng.random::<f64>();
            }
        }
        j.weights[0] += 1e-3;
        let g = entropy_gap(&j).map_err(e)?;
        let direct = conditional_entropy(&j, false) - conditional_entropy(&j, true);
        let err = g.discrepancy().max((direct - g.cmi).abs());
        ensure(err < 1e-9, || format!("joint {k} {dims:?}: identity off by {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("100 joints, max |gap - I(S;R|X)| = {worst:.1e}"))
}

fn trend_corpus(n: usize) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        seed: 11,
        n_records: n,
        min_duration: 0.4,
        max_duration: 0.8,
        strength: 0.9,
        alphabet: 64,
        ..SyntheticCorpusSpec::default()
    }
}

fn c7_reasoning_trend() -> Check {
    let t = Instant::now();
    let n_train = 30_000;
    let mut records = synth_corpus(&trend_corpus(n_train + 128)).map_err(e)?;
    let held = records.split_off(n_train);
    let model = Model::toy();
    let mut store = model.init(0, Precision::F32);
    let mut spec = StageSpec::for_stage(3).map_err(e)?;
    spec.lr = 3e-3;
    let opts = TrainOptions {
        rows: 4,
        reason_drop: 0.5,
        ..TrainOptions::default()
    };
    run_stage(&model, &mut store, &spec, &opts, &records, |_| Ok(())).map_err(e)?;
    let with = evaluate(&model, &store, &held, ConditionMode::WithReasoning, model.cfg.t_max).map_err(e)?;
    let without = evaluate(&model, &store, &held, ConditionMode::WithoutReasoning, model.cfg.t_max).map_err(e)?;
    let ratio = with.ppl_avg / without.ppl_avg;
    let detail = format!(
        "{} steps: PPL with reasoning {:.2}, without {:.2}, ratio {ratio:.3}; {:.0}s",
        spec.steps,
        with.ppl_avg,
        without.ppl_avg,
        t.elapsed().as_secs_f64()
    );
    ensure(ratio <= 0.9, || detail.clone())?;
    within(t.elapsed(), 900.0)?;
    Ok(detail)
}

fn c8_freezing() -> Check {
    let model = Model::toy();
    let records = synth_corpus(&SyntheticCorpusSpec {
        n_records: 64,
        caption_len: 2,
        ..SyntheticCorpusSpec::default()
    })
    .map_err(e)?;
    let mut store = model.init(8, Precision::F32);
    let mut out = Vec::new();
    for stage in [1u8, 2] {
        let mut spec = StageSpec::for_stage(stage).map_err(e)?;
        spec.steps = 20;
        let before: Vec<(String, Vec<u8>)> = store.groups().into_iter().map(|g| { let b = store.group_bytes(&g); (g, b) }).collect();
        let report = run_stage(&model, &mut store, &spec, &TrainOptions::default(), &records, |_| Ok(())).map_err(e)?;
        let frozen: BTreeSet<&str> = spec.frozen_groups().into_iter().collect();
        let mut moved = 0;
        for (g, bytes) in &before {
            let same = store.group_bytes(g) == *bytes;
            if frozen.contains(g.as_str()) {
                ensure(same, || format!("stage {stage}: frozen group {g} changed"))?;
            } else if !same {
                moved += 1;
            }
        }
        ensure(report.frozen_changed.is_empty(), || format!("stage {stage}: {:?}", report.frozen_changed))?;
        ensure(moved == spec.trainable.len(), || {
            format!("stage {stage}: only {moved} of {} trainable groups moved", spec.trainable.len())
        })?;
        out.push(format!("stage {stage}: {} frozen groups unchanged", frozen.len()));
    }
    Ok(out.join("; "))
}

fn full_corpus_loss(model: &Model, store: &ParamStore, records: &[Record]) -> Result<f64, String> {
    let seqs = records.iter().map(|r| r.to_items(&model.vocab, true)).collect::<Result<Vec<_>, _>>().map_err(e)?;
    let rows = pack_rows(seqs, model.cfg.t_max).map_err(e)?;
    let grid = TokenGrid::from_docs(&model.vocab, &rows, None).map_err(e)?;
    let mut s = Session::new(store, store.precision(), Trainable::Nothing);
    let lg = lm_loss(model, &mut s, &grid, &LossConfig::default()).map_err(e)?;
    Ok(lg.breakdown.l_total)
}

fn c9_overfit() -> Check {
    let t = Instant::now();
    let records = synth_corpus(&SyntheticCorpusSpec {
        seed: 7,
        n_records: 32,
        min_duration: 0.4,
        max_duration: 0.8,
        strength: 1.0,
        n_classes: 32,
        alphabet: 64,
        caption_len: 3,
        cycle_classes: true,
    })
    .map_err(e)?;
    let model = Model::toy();
    let mut store = model.init(0, Precision::F32);
    let mut spec = StageSpec::for_stage(3).map_err(e)?;
    spec.steps = 200;
    spec.lr = 5e-3;
    let l0 = full_corpus_loss(&model, &store, &records)?;
    let opts = TrainOptions { rows: 2, ..TrainOptions::default() };
    run_stage(&model, &mut store, &spec, &opts, &records, |_| Ok(())).map_err(e)?;
    let l1 = full_corpus_loss(&model, &store, &records)?;
    let ev = evaluate(&model, &store, &records, ConditionMode::WithReasoning, model.cfg.t_max).map_err(e)?;
    let worst = ev.ppl.iter().cloned().fold(0.0, f64::max);
    let drop = 1.0 - l1 / l0;
    let detail = format!(
        "loss {l0:.3} -> {l1:.3} ({:.1}% lower), max per-book PPL {worst:.3}; {:.0}s",
        100.0 * drop,
        t.elapsed().as_secs_f64()
    );
    ensure(drop >= 0.9 && worst <= 1.2, || detail.clone())?;
    within(t.elapsed(), 600.0)?;
    Ok(detail)
}

fn c10_flow_toy() -> Check {
    let cases = [(0.0, 0.25, 1.75, 0.25), (1.0, 0.25, 1.75, 1.75), (1.5, 0.25, 1.75, 2.5), (1.5, -1.0, 3.0, 5.0)];
    for (s, vu, vc, want) in cases {
        let got = guided_velocity(vu, vc, s);
        ensure(got == want, || format!("guidance scale {s}: {got} != {want}"))?;
    }
    let (_, _, report) = train_flow_toy(&FlowToyConfig::default()).map_err(e)?;
    let detail = format!(
        "loss ratio {:.4}, {:.1}% of samples within 0.2 of a mode; guidance exact; {:.0}s",
        report.loss_ratio(),
        100.0 * report.hit_rate,
        report.wall_clock_s
    );
    ensure(report.loss_ratio() < 0.1 && report.hit_rate >= 0.9, || detail.clone())?;
    Ok(detail)
}

fn c11_frame_budget() -> Check {
    for k in 1..=1000u32 {
        let d = 0.4 * f64::from(k);
        let (r, s) = frame_budget(d).map_err(e)?;
        ensure(r + s == 7 * k as usize && (r, s) == (2 * k as usize, 5 * k as usize), || {
            format!("{d}s: {r} + {s} frames, want {}", 7 * k)
        })?;
    }
    for d in [2.0, 4.0, 10.0, 30.0] {
        let (r, s) = frame_budget(d).map_err(e)?;
        ensure((r + s) as f64 == 17.5 * d, || format!("{d}s: {} frames", r + s))?;
    }
    Ok("total = 17.5 D for 1000 integral durations".into())
}

fn c12_forge_structure() -> Check {
    let t = Instant::now();
    let tok = Tokenizer::new(TokenizerConfig::default()).map_err(e)?;
    let vocab = Model::toy().vocab;
    let mut checked = 0;
    for ctx in [1024, 2048] {
        for (i, strategy) in Strategy::ALL.into_iter().enumerate() {
            let records = forge_corpus(&tok, vocab.n_text, Some(strategy), 1000, ctx, 100 + i as u64).map_err(e)?;
            for r in &records {
                let issues = check_record(r, &vocab, ctx);
                ensure(issues.is_empty(), || format!("{strategy:?} ctx {ctx} {}: {issues:?}", r.id))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} sentences, zero violations; {:.0}s", t.elapsed().as_secs_f64()))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "gradient certification", c1_gradients),
        (2, "expert-block text invariance", c2_expert_invariance),
        (3, "fusion masking", c3_fusion_masking),
        (4, "quantizer oracles", c4_quantizers),
        (5, "GRPO algebra", c5_grpo_algebra),
        (6, "entropy-gap identity", c6_entropy_identity),
        (7, "reasoning-prefix PPL trend", c7_reasoning_trend),
        (8, "stage freezing", c8_freezing),
        (9, "toy overfit", c9_overfit),
        (10, "flow toy", c10_flow_toy),
        (11, "frame budget", c11_frame_budget),
        (12, "sentence-forge structure", c12_forge_structure),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
