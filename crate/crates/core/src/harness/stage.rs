//! The four-stage recipe: which groups train, on what mixture, for how long.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Model, GROUPS};
use crate::error::{Error, Result};
use crate::objectives::{lm_loss, LossBreakdown, LossConfig};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{ParamStore, Session, Trainable};
use crate::vocab::{Item, Record, RecordKind, TokenGrid};

/// How a record is laid out when it enters a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixtureTag {
    /// Audio items first, then text: audio-to-text tasks.
    Understanding,
    /// Text first, then audio: text-to-audio tasks.
    Generation,
    /// Items in their stored order (forged sentences, dialogues).
    AsStored,
}

impl MixtureTag {
    /// Forged sentences (records with `meta.strategy`) always keep their order.
    pub fn arrange(self, record: &Record) -> Record {
        let mut r = record.clone();
        if record.meta.get("strategy").is_some() {
            return r;
        }
        let is_text = |k: RecordKind| k == RecordKind::Text;
        match self {
            MixtureTag::AsStored => {}
            MixtureTag::Understanding => r.items.sort_by_key(|i| is_text(i.kind)),
            MixtureTag::Generation => r.items.sort_by_key(|i| !is_text(i.kind)),
        }
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: u8,
    pub trainable: BTreeSet<String>,
    pub mixture: Vec<MixtureTag>,
    pub ctx: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Weight of the stage-1 distillation term; `None` in later stages.
    pub lambda_rec: Option<f64>,
}

impl StageSpec {
    pub fn for_stage(stage: u8) -> Result<Self> {
        let groups = |g: &[&str]| g.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let all = groups(&["embed", "understand", "crossmodal", "generate", "local", "head"]);
        use MixtureTag::*;
        let (trainable, mixture, ctx, steps, lr, lambda_rec) = match stage {
            1 => (groups(&["understand", "distill"]), vec![Understanding], 1024, 200, 2e-4, Some(1.0)),
            2 => (groups(&["generate", "local"]), vec![Generation], 1024, 200, 2e-4, None),
            3 => (all, vec![Understanding, Generation], 1024, 500, 2e-4, None),
            4 => (all, vec![Understanding, Generation, AsStored], 2048, 300, 1e-4, None),
            _ => return Err(Error::Config(format!("stage must be 1..4, got {stage}"))),
        };
        Ok(Self {
            stage,
            trainable,
            mixture,
            ctx,
            steps,
            lr,
            warmup: 20,
            lambda_rec,
        })
    }

    pub fn frozen_groups(&self) -> Vec<&'static str> {
        GROUPS.iter().copied().filter(|g| !self.trainable.contains(*g)).collect()
    }
}

/// Run-time knobs shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub rows: usize,
    pub seed: u64,
    pub lr_floor: f64,
    pub adamw: AdamWConfig,
    pub loss: LossConfig,
    pub reason_drop: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            rows: 1,
            seed: 0,
            lr_floor: 0.1,
            adamw: AdamWConfig::default(),
            loss: LossConfig::default(),
            reason_drop: 0.0,
        }
    }
}

/// Packs sequences into rows of at most `ctx` positions, in order. A row is
/// closed when the next sequence does not fit.
pub fn pack_rows(seqs: Vec<Vec<Item>>, ctx: usize) -> Result<Vec<Vec<Vec<Item>>>> {
    let mut rows: Vec<Vec<Vec<Item>>> = Vec::new();
    let mut cur: Vec<Vec<Item>> = Vec::new();
    let mut used = 0;
    for s in seqs {
        let n: usize = s.iter().map(Item::len).sum();
        if n > ctx {
            return Err(Error::Overlength { len: n, max: ctx });
        }
        if used + n > ctx {
            rows.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += n;
        cur.push(s);
    }
    if !cur.is_empty() {
        rows.push(cur);
    }
    Ok(rows)
}

/// Endless shuffled pass over a corpus, one arranged sequence at a time.
pub struct Batcher<'a> {
    records: &'a [Record],
    model: &'a Model,
    mixture: Vec<MixtureTag>,
    reason_drop: f64,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(model: &'a Model, records: &'a [Record], mixture: &[MixtureTag], reason_drop: f64, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Corpus("empty training corpus".into()));
        }
        if mixture.is_empty() {
            return Err(Error::Config("empty data mixture".into()));
        }
        Ok(Self {
            records,
            model,
            mixture: mixture.to_vec(),
            reason_drop,
            order: vec![],
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn next_seq(&mut self) -> Result<Vec<Item>> {
        if self.cursor == self.order.len() {
            self.order = (0..self.records.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rec = &self.records[self.order[self.cursor]];
        self.cursor += 1;
        let tag = self.mixture[self.rng.random_range(0..self.mixture.len())];
        let keep_reason = !(self.reason_drop > 0.0 && self.rng.random::<f64>() < self.reason_drop);
        tag.arrange(rec).to_items(&self.model.vocab, keep_reason)
    }

    /// Fills `rows` rows of `ctx` positions. The sequence that overflows the
    /// last row is carried into the next batch.
    pub fn next_batch(&mut self, rows: usize, ctx: usize) -> Result<TokenGrid> {
        let mut out: Vec<Vec<Vec<Item>>> = vec![Vec::new(); rows];
        let mut r = 0;
        let mut used = 0;
        loop {
            let seq = self.next_seq()?;
            let n: usize = seq.iter().map(Item::len).sum();
            if n > ctx {
                return Err(Error::Overlength { len: n, max: ctx });
            }
            if used + n > ctx {
                r += 1;
                used = 0;
                if r == rows {
                    self.cursor -= 1;
                    break;
                }
            }
            used += n;
            out[r].push(seq);
        }
        TokenGrid::from_docs(&self.model.vocab, &out, Some(ctx))
    }
}

/// One row of the per-step metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_text: f64,
    pub l_audio: f64,
    pub l_total: f64,
    pub nll_1: f64,
    pub nll_2: f64,
    pub nll_3: f64,
    pub nll_4: f64,
    pub nll_5: f64,
    pub nll_6: f64,
    pub nll_7: f64,
    pub nll_8: f64,
    pub tokens_per_sec: f64,
}

impl StepMetrics {
    fn new(step: usize, b: &LossBreakdown, tokens_per_sec: f64) -> Self {
        let n = b.nll;
        Self {
            step,
            l_text: b.l_text,
            l_audio: b.l_audio,
            l_total: b.l_total,
            nll_1: n[0],
            nll_2: n[1],
            nll_3: n[2],
            nll_4: n[3],
            nll_5: n[4],
            nll_6: n[5],
            nll_7: n[6],
            nll_8: n[7],
            tokens_per_sec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub frozen_groups: Vec<String>,
    /// Frozen groups whose bytes changed; empty when freezing held.
    pub frozen_changed: Vec<String>,
    pub wall_clock_s: f64,
    pub history: Vec<StepMetrics>,
}

/// Trains `store` for `spec.steps` steps on `records`. The context is capped
/// at the model's `t_max`. `on_step` sees every step's metrics.
pub fn run_stage(
    model: &Model,
    store: &mut ParamStore,
    spec: &StageSpec,
    opts: &TrainOptions,
    records: &[Record],
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<StageReport> {
    store.check_compatible(&model.init(0, store.precision()))?;
    let frozen: BTreeMap<&str, Vec<u8>> = spec.frozen_groups().into_iter().map(|g| (g, store.group_bytes(g))).collect();
    let ctx = spec.ctx.min(model.cfg.t_max);
    let mut batcher = Batcher::new(model, records, &spec.mixture, opts.reason_drop, opts.seed ^ u64::from(spec.stage) << 32)?;
    let mut opt = AdamW::new(opts.adamw.clone());
    let trainable = Trainable::Groups(spec.trainable.clone());
    let loss_cfg = LossConfig {
        lambda_rec: spec.lambda_rec,
        ..opts.loss.clone()
    };
    let start = Instant::now();
    let mut history = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let t0 = Instant::now();
        let grid = batcher.next_batch(opts.rows.max(1), ctx)?;
        let tokens = (0..grid.positions()).filter(|&p| !grid.is_pad(p)).count();
        let mut s = Session::new(store, store.precision(), trainable.clone());
        let lg = lm_loss(model, &mut s, &grid, &loss_cfg)?;
        let grads = s.g.backward(lg.total)?.into_named();
        drop(s);
        let lr = cosine_lr(step, spec.steps, spec.warmup, spec.lr, opts.lr_floor);
        opt.step(store, &grads, lr);
        let m = StepMetrics::new(step, &lg.breakdown, tokens as f64 / t0.elapsed().as_secs_f64().max(1e-9));
        on_step(&m)?;
        history.push(m);
    }
    let frozen_changed = frozen
        .iter()
        .filter(|(g, bytes)| store.group_bytes(g) != **bytes)
        .map(|(g, _)| g.to_string())
        .collect();
    Ok(StageReport {
        stage: spec.stage,
        steps: spec.steps,
        first_loss: history.first().map_or(f64::NAN, |m| m.l_total),
        last_loss: history.last().map_or(f64::NAN, |m| m.l_total),
        frozen_groups: frozen.keys().map(|g| g.to_string()).collect(),
        frozen_changed,
        wall_clock_s: start.elapsed().as_secs_f64(),
        history,
    })
}
