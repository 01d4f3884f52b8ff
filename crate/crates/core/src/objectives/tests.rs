use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{BackboneConfig, Model};
use crate::backbone::LocalOutput;
use crate::params::{ParamStore, Trainable};
use crate::tensor::Precision;
use crate::vocab::{AudioKind, Item, Special, Vocabulary};

fn ln(x: f64) -> f64 {
    x.ln()
}

#[test]
fn text_loss_examples() {
    let mut g = Graph::new(Precision::F64);
    let lp = g.constant(Array::from_rows(&[vec![ln(0.5), ln(0.5)], vec![ln(0.25), ln(0.75)]]).unwrap());
    let l = text_loss(&mut g, lp, &[0, 0]).unwrap().unwrap();
    assert!((g.value(l).item() - (ln(2.0) + ln(4.0)) / 2.0).abs() < 1e-12);
    assert!((g.value(l).item() - 1.0397).abs() < 1e-4);

    let v = 7.0;
    let uni = g.constant(Array::full(&[3, 7], -ln(v)));
    let l = text_loss(&mut g, uni, &[1, 2, 6]).unwrap().unwrap();
    assert!((g.value(l).item() - ln(v)).abs() < 1e-12);

    let sure = g.constant(Array::from_rows(&[vec![0.0, f64::NEG_INFINITY]]).unwrap());
    let l = text_loss(&mut g, sure, &[0]).unwrap().unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(text_loss(&mut g, sure, &[]).unwrap().is_none());
}

fn uniform_local(g: &mut Graph, n: usize, k: usize) -> LocalOutput {
    let heads = (0..N_BOOKS)
        .map(|book| {
            let logp = g.constant(Array::full(&[n, k], -ln(k as f64)));
            let picked = g.pick(logp, &vec![0; n]).unwrap();
            crate::backbone::LocalHead {
                kind: AudioKind::Recon,
                book,
                frames: (0..n).collect(),
                logp,
                picked,
            }
        })
        .collect();
    LocalOutput { heads }
}

#[test]
fn audio_frame_loss_examples() {
    let mut g = Graph::new(Precision::F64);
    let local = uniform_local(&mut g, 3, 4);
    let (l, nll) = audio_frame_loss(&mut g, &local, 3, &StreamWeights::default()).unwrap().unwrap();
    assert!((g.value(l).item() - 11.0 / 8.0 * ln(4.0)).abs() < 1e-12);
    assert!((g.value(l).item() - 1.9062).abs() < 1e-4);
    for n in nll {
        assert!((g.value(n).item() - ln(4.0)).abs() < 1e-12);
    }
    let (l, _) = audio_frame_loss(&mut g, &local, 3, &StreamWeights::uniform()).unwrap().unwrap();
    assert!((g.value(l).item() - ln(4.0)).abs() < 1e-12);

    assert!(StreamWeights::from_slice(&[0.1; 7]).is_err());
    assert!(StreamWeights::from_slice(&[-0.1; 8]).is_err());
    assert_eq!(StreamWeights::from_slice(&StreamWeights::default().w).unwrap(), StreamWeights::default());
}

#[test]
fn weighted_frame_loss_matches_explicit_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nll: Vec<[f64; N_BOOKS]> = (0..10).map(|_| std::array::from_fn(|_| rng.random::<f64>() * 3.0)).collect();
    let got = frame_loss_value(&nll, &StreamWeights::default());
    let want = nll
        .iter()
        .map(|f| 0.25 * (f[0] + f[1] + f[2]) + 0.125 * f[3..].iter().sum::<f64>())
        .sum::<f64>()
        / 10.0;
    assert!((got - want).abs() < 1e-12);
    let unweighted = frame_loss_value(&nll, &StreamWeights::uniform());
    let mean = nll.iter().flatten().sum::<f64>() / 80.0;
    assert!((unweighted - mean).abs() < 1e-12);
}

#[test]
fn total_loss_examples() {
    assert!((total_loss(1.0, 2.0, LAMBDA_TEXT, LAMBDA_AUDIO).unwrap() - 3.6).abs() < 1e-15);
    assert_eq!(total_loss(1.5, 2.0, 1.6, 0.0).unwrap(), 1.6 * 1.5);
    assert_eq!(total_loss(0.0, 0.0, 1.6, 1.0).unwrap(), 0.0);
    assert!(total_loss(1.0, 1.0, -0.1, 1.0).is_err());
}

#[test]
fn distill_examples() {
    let mut g = Graph::new(Precision::F64);
    let z = Array::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
    let d = g.leaf(z.clone());
    let lm = g.constant(Array::scalar(0.7));
    let l = stage1_distill_loss(&mut g, lm, d, &z, 1.0).unwrap();
    assert_eq!(g.value(l).item(), 0.7);
    let shifted = Array::new(vec![2, 2], z.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let m = distill_mse(&mut g, d, &shifted).unwrap();
    assert_eq!(g.value(m).item(), 1.0);
    let l = stage1_distill_loss(&mut g, lm, d, &shifted, 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.7);
    assert!(distill_mse(&mut g, d, &Array::zeros(&[3, 2])).is_err());
}

fn small_model() -> Model {
    let cfg = BackboneConfig {
        d_model: 16,
        n_heads: 2,
        n_understand: 1,
        n_crossmodal: 1,
        n_generate: 1,
        n_local: 1,
        d_local: 8,
        local_heads: 2,
        t_max: 64,
        rope_base: 10_000.0,
        d_ssl: 4,
    };
    Model::new(cfg, Vocabulary::new(12, 5, 5).unwrap()).unwrap()
}

fn dense(m: &Model, seed: u64) -> ParamStore {
    let mut st = m.init(seed, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names: Vec<String> = st.names().filter(|n| n.starts_with("head.text") || n.starts_with("local.head")).cloned().collect();
    for n in names {
        let shape = st.get(&n).unwrap().shape().to_vec();
        st.insert(n, Array::randn(&shape, 0.5, &mut rng));
    }
    st
}

fn sequence(v: &Vocabulary) -> Vec<Item> {
    let f = |k: AudioKind, i: u32| -> [u32; N_BOOKS] { std::array::from_fn(|b| v.audio(k, b, (i * 3 + b as u32) % v.per_book(k))) };
    vec![
        Item::Text(vec![Special::Bos.id(), v.text(2), Special::AudioBegin.id(), Special::ReasonBegin.id()]),
        Item::Audio { kind: AudioKind::Reason, frames: vec![f(AudioKind::Reason, 0), f(AudioKind::Reason, 1)] },
        Item::Text(vec![Special::ReconBegin.id()]),
        Item::Audio { kind: AudioKind::Recon, frames: (0..5).map(|i| f(AudioKind::Recon, i)).collect() },
        Item::Text(vec![Special::AudioEnd.id(), Special::Eos.id()]),
    ]
}

#[test]
fn breakdown_recombines_exactly() {
    let m = small_model();
    let st = dense(&m, 1);
    let grid = TokenGrid::pack(&m.vocab, &sequence(&m.vocab)).unwrap();
    let mut s = Session::new(&st, Precision::F64, Trainable::Nothing);
    let lg = lm_loss(&m, &mut s, &grid, &LossConfig::default()).unwrap();
    let b = &lg.breakdown;
    assert!((s.g.value(lg.total).item() - (1.6 * b.l_text + b.l_audio)).abs() < 1e-12);
    assert!((b.l_total - s.g.value(lg.total).item()).abs() < 1e-12);
    assert!((b.per_stream.iter().sum::<f64>() - b.l_audio).abs() < 1e-12);
    assert_eq!(b.n_frames, 7);
    assert_eq!(b.n_text, grid.t - 1 - 7);
}

#[test]
fn weighted_loss_matches_per_frame_reference() {
    let m = small_model();
    let st = dense(&m, 2);
    let grid = TokenGrid::pack(&m.vocab, &sequence(&m.vocab)).unwrap();
    let mut s = Session::new(&st, Precision::F64, Trainable::Nothing);
    let lg = lm_loss(&m, &mut s, &grid, &LossConfig::default()).unwrap();
    let t = Targets::from_grid(&grid);
    let h = m.forward(&mut s, &grid).unwrap();
    let local = crate::backbone::local_logprobs(&m, &mut s, h.out, &t.frames).unwrap();
    let mut per_frame = vec![[0.0; N_BOOKS]; t.frames.len()];
    for hd in &local.heads {
        for (j, &f) in hd.frames.iter().enumerate() {
            per_frame[f][hd.book] = -s.g.value(hd.picked).data()[j];
        }
    }
    let want = frame_loss_value(&per_frame, &StreamWeights::default());
    assert!((lg.breakdown.l_audio - want).abs() < 1e-12);
}

#[test]
fn pads_do_not_change_losses() {
    let m = small_model();
    let st = dense(&m, 3);
    let grid = TokenGrid::pack(&m.vocab, &sequence(&m.vocab)).unwrap();
    let padded = grid.with_pads_inserted(&[0, 3, 3, 6, 9, grid.t]);
    let run = |g: &TokenGrid| {
        let mut s = Session::new(&st, Precision::F64, Trainable::Nothing);
        let cfg = LossConfig {
            lambda_rec: Some(1.0),
            ..LossConfig::default()
        };
        lm_loss(&m, &mut s, g, &cfg).unwrap().breakdown
    };
    let (a, b) = (run(&grid), run(&padded));
    assert_eq!((a.n_text, a.n_frames), (b.n_text, b.n_frames));
    for (x, y) in [(a.l_text, b.l_text), (a.l_audio, b.l_audio), (a.l_total, b.l_total), (a.l_distill.unwrap(), b.l_distill.unwrap())] {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn guidance_formula_cases() {
    assert_eq!(guided_velocity(1.0, 2.0, 1.5), 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (u, c): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        assert_eq!(guided_velocity(u, c, 1.0), c);
        assert_eq!(guided_velocity(u, c, 0.0), u);
    }
}

fn tiny_flow() -> FlowDecoder {
    FlowDecoder::new(FlowConfig {
        d_latent: 3,
        n_cond: 2,
        d_cond: 4,
        hidden: 8,
        n_blocks: 2,
        n_time_freq: 2,
        cond_dropout: 0.1,
    })
}

#[test]
fn untrained_flow_loss_is_latent_width() {
    let f = FlowDecoder::new(FlowConfig::default());
    let st = f.init(0, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z0 = Array::randn(&[4000, 8], 1.0, &mut rng);
    let cond: Vec<usize> = (0..4000).map(|i| i % 8).collect();
    let mut s = Session::new(&st, Precision::F64, Trainable::Nothing);
    let l = f.loss(&mut s, &z0, &cond, &mut rng).unwrap();
    assert!((s.g.value(l).item() - 8.0).abs() < 0.3);
}

#[test]
fn flow_loss_gradient_matches_finite_differences() {
    let f = tiny_flow();
    let mut st = f.init(1, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    st.insert("flow.out", Array::randn(&[8, 3], 0.5, &mut rng));
    let z0 = Array::randn(&[5, 3], 1.0, &mut rng);
    let eps = Array::randn(&[5, 3], 1.0, &mut rng);
    let t: Vec<f64> = (0..5).map(|_| rng.random()).collect();
    let cond = [0, 1, 2, 1, 0];
    let loss = |st: &ParamStore| {
        let mut s = Session::new(st, Precision::F64, Trainable::All);
        let l = f.loss_with(&mut s, &z0, &cond, &t, &eps).unwrap();
        (s.g.value(l).item(), s.g.backward(l).unwrap().into_named())
    };
    let (_, grads) = loss(&st);
    let h = 1e-4;
    for name in st.names().cloned().collect::<Vec<_>>() {
        let n = st.get(&name).unwrap().len();
        for c in [0, n / 2, n - 1] {
            let mut p = st.clone();
            p.get_mut(&name).unwrap().data_mut()[c] += h;
            let mut m = st.clone();
            m.get_mut(&name).unwrap().data_mut()[c] -= h;
            let num = (loss(&p).0 - loss(&m).0) / (2.0 * h);
            let ana = grads[&name].data()[c];
            let err = crate::tensor::gradcheck::relative_error(ana, num, 1e-2);
            assert!(err < 1e-4, "{name}[{c}] {ana} vs {num}");
        }
    }
}

#[test]
fn sampler_rejects_zero_steps() {
    let f = tiny_flow();
    let st = f.init(0, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(f.sample(&st, &[0], 0, 1.5, &mut rng).is_err());
    let z = f.sample(&st, &[0, 1], 10, 1.5, &mut rng).unwrap();
    assert_eq!(z.shape(), &[2, 3]);
    assert!(z.is_finite());
}

