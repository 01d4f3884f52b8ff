use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::BackboneConfig;
use crate::params::Trainable;
use crate::tensor::{Array, Graph, Precision};
use crate::vocab::{Special, Vocabulary};

#[test]
fn advantage_examples() {
    let a = group_advantages(&[1.0, 2.0, 3.0]);
    let s = (1.5f64).sqrt();
    assert!((a[0] + s).abs() < 1e-12 && a[1] == 0.0 && (a[2] - s).abs() < 1e-12);
    assert!((a[2] - 1.2247).abs() < 1e-4);
    assert_eq!(group_advantages(&[0.3; 5]), vec![0.0; 5]);
    assert_eq!(group_advantages(&[0.0, 1.0]), vec![-1.0, 1.0]);
    assert_eq!(group_advantages(&[4.0]), vec![0.0]);
}

#[test]
fn surrogate_examples() {
    assert_eq!(surrogate_token(1.0, 1.0, 0.2), 1.0);
    assert_eq!(surrogate_token(1.5, 1.0, 0.2), 1.2);
    assert_eq!(surrogate_token(0.5, -1.0, 0.2), -0.8);
}

#[test]
fn objective_rejects_misaligned_inputs() {
    let old = vec![vec![0.0, 0.0]];
    assert!(grpo_objective_value(&old, &[vec![0.0]], &[1.0], 0.2).is_err());
    assert!(grpo_objective_value(&old, &old, &[1.0, 2.0], 0.2).is_err());
}

#[test]
fn graph_objective_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g_n = rng.random_range(2..6);
        let outputs: Vec<Vec<u32>> = (0..g_n).map(|_| vec![1; rng.random_range(1..5)]).collect();
        let old: Vec<Vec<f64>> = outputs.iter().map(|o| o.iter().map(|_| -rng.random::<f64>() * 2.0).collect()).collect();
        let new: Vec<Vec<f64>> = old.iter().map(|o| o.iter().map(|v| v + rng.random_range(-0.4..0.4)).collect()).collect();
        let rewards: Vec<f64> = (0..g_n).map(|_| rng.random()).collect();
        let group = RolloutGroup::new(0, vec![], outputs, old.clone(), rewards).unwrap();
        let mut g = Graph::new(Precision::F64);
        let nodes: Vec<_> = new.iter().map(|n| g.leaf(Array::from_vec(n.clone()))).collect();
        let obj = grpo_objective(&mut g, &group, &nodes, 0.2).unwrap();
        let want = grpo_objective_value(&old, &new, &group.advantages, 0.2).unwrap();
        assert!((g.value(obj).item() - want).abs() < 1e-12);
    }
}

#[test]
fn rewards_are_bounded_and_deterministic() {
    let eos = Special::Eos.id();
    let t = vec![10, 11, 12];
    let exact = RewardStub::ExactMatch { target: t.clone() };
    assert_eq!(exact.score(&[10, 11, 12, eos]), 1.0);
    assert_eq!(exact.score(&[10, 11]), 0.0);
    let edit = RewardStub::EditDistance { target: t.clone() };
    assert_eq!(edit.score(&[10, 11, 12]), 1.0);
    assert!((edit.score(&[10, 13, 12]) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(edit.score(&[]), 0.0);
    let label = RewardStub::LabelAccuracy { labels: vec![1, 2, 3, 4] };
    assert_eq!(label.score(&[1, 9, 3]), 0.5);
}

fn tiny() -> Model {
    let cfg = BackboneConfig {
        d_model: 16,
        n_heads: 2,
        n_understand: 1,
        n_crossmodal: 1,
        n_generate: 1,
        n_local: 1,
        d_local: 8,
        local_heads: 2,
        t_max: 32,
        rope_base: 10_000.0,
        d_ssl: 4,
    };
    Model::new(cfg, Vocabulary::new(10, 4, 4).unwrap()).unwrap()
}

fn store(m: &Model) -> ParamStore {
    let mut st = m.init(5, Precision::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = st.get("head.text").unwrap().shape().to_vec();
    st.insert("head.text", Array::randn(&shape, 0.5, &mut rng));
    st
}

#[test]
fn recorded_logprobs_match_teacher_forcing() {
    let m = tiny();
    let st = store(&m);
    let v = &m.vocab;
    let allowed: Vec<u32> = (0..4).map(|i| v.text(i)).chain([Special::Eos.id()]).collect();
    let policy = SamplingPolicy {
        max_len: 7,
        allowed_text: Some(allowed),
        ..SamplingPolicy::default()
    };
    let reward = RewardStub::ExactMatch { target: vec![v.text(1)] };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prompt = [Special::Bos.id(), v.text(0)];
    let group = rollout(&m, &st, 0, &prompt, 6, &policy, &reward, &mut rng).unwrap();
    assert_eq!(group.len(), 6);
    let mut s = Session::new(&st, Precision::F64, Trainable::All);
    let nodes = response_logprobs(&m, &mut s, &group).unwrap();
    for (i, n) in nodes.iter().enumerate() {
        let got = s.g.value(*n).data();
        for (a, b) in got.iter().zip(&group.old_logp[i]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert_eq!(group.truncated[i], group.outputs[i].last() != Some(&Special::Eos.id()));
    }
    let obj = grpo_objective(&mut s.g, &group, &nodes, 0.2).unwrap();
    // Fresh rollouts: every ratio is 1, so the objective is the mean advantage.
    assert!(s.g.value(obj).item().abs() < 1e-9);
}

#[test]
fn greedy_rollouts_have_zero_advantage_and_gradient() {
    let m = tiny();
    let st = store(&m);
    let v = &m.vocab;
    let policy = SamplingPolicy {
        max_len: 6,
        ..SamplingPolicy::greedy()
    };
    let reward = RewardStub::EditDistance { target: vec![v.text(2), v.text(3)] };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let group = rollout(&m, &st, 0, &[Special::Bos.id()], 8, &policy, &reward, &mut rng).unwrap();
    assert!(group.outputs.windows(2).all(|w| w[0] == w[1]));
    assert!(group.advantages.iter().all(|a| *a == 0.0));
    let mut s = Session::new(&st, Precision::F64, Trainable::All);
    let nodes = response_logprobs(&m, &mut s, &group).unwrap();
    let obj = grpo_objective(&mut s.g, &group, &nodes, 0.2).unwrap();
    let grads = s.g.backward(obj).unwrap().into_named();
    assert!(grads.values().all(|g| g.data().iter().all(|x| *x == 0.0)));
}
