use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use factorlm::backbone::Model;
use factorlm::checkpoint;
use factorlm::forge::{synth_corpus, Strategy, SyntheticCorpusSpec};
use factorlm::harness::{
    eval_entropy, evaluate, forge_corpus, grpo_train, run_stage, tokenize_synth, write_json, ConditionMode, GrpoConfig,
    MetricsWriter, TrainConfig,
};
use factorlm::params::ParamStore;
use factorlm::quant::{Tokenizer, TokenizerConfig};
use factorlm::vocab::{read_corpus, write_corpus};
use factorlm::Result;

#[derive(Parser)]
#[command(name = "factorlm", version, about = "Toy-scale audio tokenization and multi-stream LM tooling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Tokenize synthetic clips into a JSON-lines corpus.
    TokenizeSynth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        min_duration: f64,
        #[arg(long, default_value_t = 4.0)]
        max_duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted-dependency corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        strength: f64,
        #[arg(long, default_value_t = 4)]
        classes: u32,
        #[arg(long, default_value_t = 64)]
        alphabet: u32,
        #[arg(long, default_value_t = 0.4)]
        min_duration: f64,
        #[arg(long, default_value_t = 1.6)]
        max_duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build auditory sentences.
    Forge {
        /// 1..5, or `mix` for a uniform draw per sentence.
        #[arg(long, default_value = "mix")]
        strategy: String,
        #[arg(long, default_value_t = 2048)]
        ctx: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long)]
        stage: Option<u8>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Policy optimization on the successor task.
    GrpoTrain {
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 8)]
        g: usize,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.04)]
        kl: f64,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a corpus.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Condition::With)]
        condition: Condition,
        #[arg(long, default_value_t = 4)]
        classes: u32,
        #[arg(long, default_value_t = 64)]
        alphabet: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or compare checkpoints.
    Checkpoint {
        #[command(subcommand)]
        op: CkptOp,
    },
}

#[derive(Subcommand)]
enum CkptOp {
    Inspect { path: PathBuf },
    Diff { a: PathBuf, b: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Ppl,
    Acc,
    Entropy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Condition {
    With,
    Without,
}

fn load_or_init(model: &Model, cfg: &TrainConfig, init: Option<&Path>) -> Result<ParamStore> {
    let fresh = model.init(cfg.seed, cfg.precision);
    match init {
        Some(p) => {
            let store = checkpoint::load(p)?;
            store.check_compatible(&fresh)?;
            Ok(store)
        }
        None => Ok(fresh),
    }
}

fn emit<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("serializable report"));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TokenizeSynth { n, seed, min_duration, max_duration, out } => {
            let tok = Tokenizer::new(TokenizerConfig { seed, ..TokenizerConfig::default() })?;
            let recs = tokenize_synth(&tok, 64, n, seed, (min_duration, max_duration))?;
            write_corpus(&out, &recs)?;
            eprintln!("wrote {} records to {}", recs.len(), out.display());
        }
        Cmd::SynthCorpus { n, seed, strength, classes, alphabet, min_duration, max_duration, out } => {
            let spec = SyntheticCorpusSpec {
                seed,
                n_records: n,
                strength,
                n_classes: classes,
                alphabet,
                min_duration,
                max_duration,
                ..SyntheticCorpusSpec::default()
            };
            write_corpus(&out, &synth_corpus(&spec)?)?;
        }
        Cmd::Forge { strategy, ctx, n, seed, out } => {
            let s = match strategy.as_str() {
                "mix" => None,
                id => Some(Strategy::from_id(
                    id.parse()
                        .map_err(|_| factorlm::Error::Config(format!("strategy must be 1..5 or mix, got `{id}`")))?,
                )?),
            };
            let tok = Tokenizer::new(TokenizerConfig { seed, ..TokenizerConfig::default() })?;
            let recs = forge_corpus(&tok, 64, s, n, ctx, seed)?;
            write_corpus(&out, &recs)?;
            eprintln!("wrote {} sentences to {}", recs.len(), out.display());
        }
        Cmd::Train { stage, config } => {
            let mut cfg = TrainConfig::load(config.as_deref())?;
            if let Some(s) = stage {
                cfg.stage = s;
            }
            let model = cfg.model()?;
            let mut store = load_or_init(&model, &cfg, cfg.init.as_deref())?;
            let corpus = cfg
                .corpus
                .as_deref()
                .ok_or_else(|| factorlm::Error::Config("`corpus` is required for training".into()))?;
            let mut records = read_corpus(corpus)?;
            if let Some(f) = cfg.forged.as_deref() {
                records.extend(read_corpus(f)?);
            }
            let spec = cfg.stage_spec()?;
            let mut metrics = cfg.metrics.as_deref().map(MetricsWriter::create).transpose()?;
            let report = run_stage(&model, &mut store, &spec, &cfg.options(), &records, |m| {
                if let Some(w) = metrics.as_mut() {
                    w.write(m)?;
                }
                if m.step % 20 == 0 {
                    eprintln!("step {:>4}  loss {:.4}  text {:.4}  audio {:.4}", m.step, m.l_total, m.l_text, m.l_audio);
                }
                Ok(())
            })?;
            if let Some(out) = cfg.out.as_deref() {
                checkpoint::save(&store, out)?;
            }
            let mut summary = serde_json::to_value(&report).expect("serializable report");
            summary["history"] = serde_json::Value::Null;
            emit(&summary, None)?;
        }
        Cmd::GrpoTrain { groups, g, epsilon, kl, steps, seed, config, init, metrics, out } => {
            let cfg = TrainConfig::load(config.as_deref())?;
            let model = cfg.model()?;
            let mut store = load_or_init(&model, &cfg, init.as_deref())?;
            let gc = GrpoConfig { groups, g, epsilon, kl, steps, seed, ..GrpoConfig::default() };
            let mut w = metrics.as_deref().map(MetricsWriter::create).transpose()?;
            let report = grpo_train(&model, &mut store, &gc, |m| {
                if let Some(w) = w.as_mut() {
                    w.write(m)?;
                }
                eprintln!("step {:>4}  reward {:.3}  surrogate {:+.4}  kl {:.5}", m.step, m.reward_mean, m.surrogate, m.kl);
                Ok(())
            })?;
            if let Some(out) = out.as_deref() {
                checkpoint::save(&store, out)?;
            }
            emit(&serde_json::json!({ "first_reward": report.first_reward, "last_reward": report.last_reward, "wall_clock_s": report.wall_clock_s }), None)?;
        }
        Cmd::Eval { mode, corpus, config, checkpoint: ckpt, condition, classes, alphabet, out } => {
            let records = read_corpus(&corpus)?;
            let report = match mode {
                EvalMode::Entropy => eval_entropy(&records, classes, alphabet)?,
                EvalMode::Ppl | EvalMode::Acc => {
                    let cfg = TrainConfig::load(config.as_deref())?;
                    let model = cfg.model()?;
                    let store = load_or_init(&model, &cfg, ckpt.as_deref())?;
                    let cond = match condition {
                        Condition::With => ConditionMode::WithReasoning,
                        Condition::Without => ConditionMode::WithoutReasoning,
                    };
                    evaluate(&model, &store, &records, cond, cfg.ctx.unwrap_or(model.cfg.t_max))?
                }
            };
            emit(&report, out.as_deref())?;
        }
        Cmd::Checkpoint { op } => match op {
            CkptOp::Inspect { path } => print!("{}", checkpoint::manifest(&checkpoint::load(&path)?)),
            CkptOp::Diff { a, b } => {
                let d = checkpoint::diff(&checkpoint::load(&a)?, &checkpoint::load(&b)?);
                emit(&d, None)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
