//! Training recipe, evaluation and corpus tooling at toy scale, plus the
//! metric and report writers used by the command-line front end.

mod config;
mod eval;
mod flow_toy;
mod rl;
mod stage;

pub use config::{KeyValues, TrainConfig, ENV_PREFIX, TRAIN_KEYS};
pub use eval::{accuracy_from, argmax_lowest, eval_entropy, eval_grids, evaluate, ConditionMode, EvalReport, Prediction};
pub use flow_toy::{flow_toy_decoder, train_flow_toy, FlowToyConfig, FlowToyReport};
pub use rl::{grpo_train, task_prompt, task_reward, GrpoConfig, GrpoReport, GrpoStepMetrics};
pub use stage::{pack_rows, run_stage, Batcher, MixtureTag, StageReport, StageSpec, StepMetrics, TrainOptions};

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::forge::{Forge, Strategy};
use crate::objectives::LossConfig;
use crate::optim::AdamWConfig;
use crate::quant::Tokenizer;
use crate::vocab::{AudioKind, Record, RecordItem};

/// CSV sink with a header fixed by the row type.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let inner = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        Ok(Self { inner })
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner
            .serialize(row)
            .and_then(|_| Ok(self.inner.flush()?))
            .map_err(|e| Error::Invalid(format!("metrics: {e}")))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Invalid(format!("json: {e}")))?;
    writeln!(f).map_err(|e| Error::io(path, e))
}

impl TrainConfig {
    pub fn model(&self) -> Result<Model> {
        Model::new(self.model.clone(), self.vocab.clone())
    }

    /// Stage defaults with this config's overrides applied.
    pub fn stage_spec(&self) -> Result<StageSpec> {
        let mut spec = StageSpec::for_stage(self.stage)?;
        if let Some(n) = self.steps {
            spec.steps = n;
        }
        if let Some(lr) = self.lr {
            spec.lr = lr;
        }
        if let Some(c) = self.ctx {
            spec.ctx = c;
        }
        spec.warmup = self.warmup;
        if spec.lambda_rec.is_some() {
            spec.lambda_rec = Some(self.lambda_rec);
        }
        Ok(spec)
    }

    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            rows: self.rows,
            seed: self.seed,
            lr_floor: self.lr_floor,
            adamw: AdamWConfig {
                weight_decay: self.weight_decay,
                clip: (self.clip > 0.0).then_some(self.clip),
                ..AdamWConfig::default()
            },
            loss: LossConfig {
                lambda_text: self.lambda_text,
                lambda_audio: self.lambda_audio,
                lambda_rec: None,
                weights: self.weights,
            },
            reason_drop: self.reason_drop,
        }
    }
}

/// Clips drawn from the tokenizer's feature bank, each stored as a caption
/// followed by its reasoning and reconstruction codes.
pub fn tokenize_synth(tok: &Tokenizer, n_text: u32, n: usize, seed: u64, durations: (f64, f64)) -> Result<Vec<Record>> {
    if !(durations.0 > 0.0 && durations.0 <= durations.1) {
        return Err(Error::Config("durations must satisfy 0 < min <= max".into()));
    }
    let forge = Forge::new(tok, n_text);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let d = if durations.0 == durations.1 { durations.0 } else { rng.random_range(durations.0..durations.1) };
        let codes = tok.encode(&tok.bank.clip(d, &mut rng)?)?;
        out.push(Record {
            id: format!("clip-{i}"),
            items: vec![
                RecordItem::text(forge.caption(&codes)),
                RecordItem::audio(AudioKind::Reason, codes.reason.clone()),
                RecordItem::audio(AudioKind::Recon, codes.recon),
            ],
            meta: json!({ "duration_s": d }),
        });
    }
    Ok(out)
}

/// `n` forged sentences. `strategy = None` draws strategies uniformly.
pub fn forge_corpus(tok: &Tokenizer, n_text: u32, strategy: Option<Strategy>, n: usize, ctx: usize, seed: u64) -> Result<Vec<Record>> {
    let forge = Forge::new(tok, n_text);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let s = strategy.unwrap_or_else(|| Strategy::ALL[rng.random_range(0..Strategy::ALL.len())]);
            Ok(forge.sentence(s, ctx, &mut rng)?.to_record(format!("sentence-{i}")))
        })
        .collect()
}
