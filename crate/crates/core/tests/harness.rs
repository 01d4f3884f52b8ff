//! Training harness, evaluation, configuration and CLI round trips.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use factorlm::backbone::Model;
use factorlm::checkpoint;
use factorlm::forge::{synth_corpus, SyntheticCorpusSpec};
use factorlm::harness::{eval_grids, evaluate, forge_corpus, run_stage, ConditionMode, KeyValues, StageSpec, TrainConfig, TrainOptions, TRAIN_KEYS};
use factorlm::objectives::{lm_loss, LossConfig};
use factorlm::params::{Session, Trainable};
use factorlm::quant::{Tokenizer, TokenizerConfig};
use factorlm::tensor::Precision;
use factorlm::vocab::{read_corpus, AudioKind, RecordKind};

fn small_corpus(n: usize, seed: u64) -> Vec<factorlm::vocab::Record> {
    synth_corpus(&SyntheticCorpusSpec {
        seed,
        n_records: n,
        min_duration: 0.4,
        max_duration: 0.8,
        caption_len: 2,
        ..SyntheticCorpusSpec::default()
    })
    .unwrap()
}

#[test]
fn untrained_model_is_uniform_over_each_book() {
    let model = Model::toy();
    let store = model.init(0, Precision::F64);
    let ev = evaluate(&model, &store, &small_corpus(4, 1), ConditionMode::WithReasoning, 256).unwrap();
    let per_book = f64::from(model.vocab.per_book(AudioKind::Recon));
    for p in ev.ppl {
        assert!((p - per_book).abs() < 1e-9, "{p}");
    }
}

#[test]
fn eval_perplexity_matches_the_training_loss() {
    let model = Model::toy();
    let store = common::dense_store(&model, 5, Precision::F64);
    let records = small_corpus(6, 2);
    let ev = evaluate(&model, &store, &records, ConditionMode::WithoutReasoning, 256).unwrap();
    let grids = eval_grids(&model, &records, ConditionMode::WithoutReasoning, 256).unwrap();
    let mut sums = [0.0; 8];
    let mut frames = 0;
    for grid in &grids {
        let mut s = Session::new(&store, Precision::F64, Trainable::Nothing);
        let lg = lm_loss(&model, &mut s, grid, &LossConfig::default()).unwrap();
        for (acc, nll) in sums.iter_mut().zip(lg.breakdown.nll) {
            *acc += nll * lg.breakdown.n_frames as f64;
        }
        frames += lg.breakdown.n_frames;
    }
    assert_eq!(frames, ev.n_frames);
    for b in 0..8 {
        let nll = sums[b] / frames as f64;
        assert!((ev.nll[b] - nll).abs() < 1e-9, "book {b}: {} vs {nll}", ev.nll[b]);
        assert!((ev.ppl[b] - nll.exp()).abs() < 1e-9 * ev.ppl[b]);
    }
}

#[test]
fn conditioning_mode_controls_reasoning_context() {
    let model = Model::toy();
    let records = small_corpus(3, 3);
    let with = eval_grids(&model, &records, ConditionMode::WithReasoning, 256).unwrap();
    let without = eval_grids(&model, &records, ConditionMode::WithoutReasoning, 256).unwrap();
    let reason_positions = |gs: &[factorlm::vocab::TokenGrid]| {
        gs.iter()
            .flat_map(|g| g.frame_kind.iter())
            .filter(|k| k.audio_kind() == Some(AudioKind::Reason))
            .count()
    };
    let n_reason: usize = records
        .iter()
        .flat_map(|r| &r.items)
        .filter(|i| i.kind == RecordKind::Reason)
        .map(|i| i.frames().unwrap().len())
        .sum();
    assert_eq!(reason_positions(&with), n_reason);
    assert_eq!(reason_positions(&without), 0);
}

#[test]
fn stage_runs_are_deterministic_and_respect_freezing() {
    let model = Model::toy();
    let records = small_corpus(16, 4);
    let mut spec = StageSpec::for_stage(2).unwrap();
    spec.steps = 3;
    let run = || {
        let mut store = model.init(9, Precision::F32);
        let before = store.clone();
        let report = run_stage(&model, &mut store, &spec, &TrainOptions::default(), &records, |_| Ok(())).unwrap();
        (before, store, report)
    };
    let (before, a, report) = run();
    let (_, b, _) = run();
    assert!(checkpoint::diff(&a, &b).changed.is_empty());
    assert!(report.frozen_changed.is_empty());
    let frozen: BTreeSet<&str> = spec.frozen_groups().into_iter().collect();
    for g in before.groups() {
        assert_eq!(before.group_bytes(&g) == a.group_bytes(&g), frozen.contains(g.as_str()), "group {g}");
    }
    assert_eq!(report.history.len(), 3);
    assert!(report.history.iter().all(|m| m.l_total.is_finite()));
}

#[test]
fn environment_overrides_the_config_file() {
    let mut kv = KeyValues::parse("stage = 2\nlr = 1e-3  # comment\nsteps = 5\n").unwrap();
    kv.apply_env(TRAIN_KEYS, |k| match k {
        "UA2_LR" => Some("0.5".into()),
        "UA2_steps" => Some("7".into()),
        _ => None,
    });
    let cfg = TrainConfig::from_kv(&kv).unwrap();
    assert_eq!((cfg.stage, cfg.lr, cfg.steps), (2, Some(0.5), Some(7)));
    assert!(TrainConfig::from_kv(&KeyValues::parse("bogus = 1").unwrap()).is_err());
    assert!(TrainConfig::from_kv(&KeyValues::parse("stage = 9").unwrap()).is_err());
}

#[test]
fn toy_context_sentences_fit_the_model() {
    let tok = Tokenizer::new(TokenizerConfig::default()).unwrap();
    let model = Model::toy();
    let records = forge_corpus(&tok, model.vocab.n_text, None, 200, model.cfg.t_max, 12).unwrap();
    for r in &records {
        assert!(r.serialized_len(&model.vocab, true).unwrap() <= model.cfg.t_max, "{}", r.id);
    }
}

fn factorlm(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_factorlm"))
        .args(args)
        .current_dir(dir)
        .env_remove("UA2_STEPS")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "factorlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn cli_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    factorlm(d, &["synth-corpus", "--n", "12", "--seed", "3", "--max-duration", "0.8", "--out", "corpus.jsonl"]);
    assert_eq!(read_corpus(&d.join("corpus.jsonl")).unwrap().len(), 12);
    factorlm(d, &["tokenize-synth", "--n", "3", "--out", "tok.jsonl"]);
    assert_eq!(read_corpus(&d.join("tok.jsonl")).unwrap().len(), 3);
    factorlm(d, &["forge", "--strategy", "mix", "--ctx", "256", "--n", "4", "--out", "forged.jsonl"]);
    assert_eq!(read_corpus(&d.join("forged.jsonl")).unwrap().len(), 4);

    std::fs::write(
        d.join("train.cfg"),
        "stage = 3\nsteps = 2\ncorpus = corpus.jsonl\nforged = forged.jsonl\nout = ckpt.bin\nmetrics = metrics.csv\n",
    )
    .unwrap();
    let summary: serde_json::Value = serde_json::from_str(&factorlm(d, &["train", "--config", "train.cfg"])).unwrap();
    assert_eq!(summary["steps"], 2);
    let csv = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let eval: serde_json::Value = serde_json::from_str(&factorlm(
        d,
        &["eval", "--mode", "ppl", "--corpus", "corpus.jsonl", "--checkpoint", "ckpt.bin", "--condition", "without"],
    ))
    .unwrap();
    assert!(eval["ppl_avg"].as_f64().unwrap() > 1.0);
    let inspect = factorlm(d, &["checkpoint", "inspect", "ckpt.bin"]);
    assert!(inspect.contains("embed"));
    factorlm(d, &["checkpoint", "diff", "ckpt.bin", "ckpt.bin"]);
    factorlm(d, &["grpo-train", "--groups", "1", "--g", "2", "--steps", "1", "--out", "rl.bin"]);
    assert!(d.join("rl.bin").exists());
}
