//! Flat `key = value` configuration with `UA2_<key>` environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::objectives::StreamWeights;
use crate::tensor::Precision;
use crate::vocab::Vocabulary;

pub const ENV_PREFIX: &str = "UA2_";

/// Raw key/value pairs. Lines are `key = value`; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.map.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    /// Applies `UA2_<key>` (exact or upper-case) for each of `keys`.
    pub fn apply_env<'a>(&mut self, keys: impl IntoIterator<Item = &'a str>, env: impl Fn(&str) -> Option<String>) {
        for k in keys {
            let exact = format!("{ENV_PREFIX}{k}");
            let upper = format!("{ENV_PREFIX}{}", k.to_uppercase());
            if let Some(v) = env(&exact).or_else(|| env(&upper)) {
                self.set(k, v);
            }
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    fn take<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`")))?;
        }
        Ok(())
    }
}

/// Every key the training harness understands, with defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    /// Overrides the stage's default step count when set.
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub warmup: usize,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Rows of `ctx` positions per step.
    pub rows: usize,
    pub ctx: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    pub corpus: Option<PathBuf>,
    /// Forged sentences mixed in as stored (stage 4).
    pub forged: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub lambda_text: f64,
    pub lambda_audio: f64,
    pub lambda_rec: f64,
    pub weights: StreamWeights,
    /// Probability of serializing a record without its reasoning frames.
    pub reason_drop: f64,
    pub model: BackboneConfig,
    pub vocab: Vocabulary,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 3,
            steps: None,
            lr: None,
            warmup: 20,
            lr_floor: 0.1,
            weight_decay: 0.0,
            clip: 1.0,
            rows: 1,
            ctx: None,
            seed: 0,
            precision: Precision::F32,
            corpus: None,
            forged: None,
            init: None,
            out: None,
            metrics: None,
            lambda_text: crate::objectives::LAMBDA_TEXT,
            lambda_audio: crate::objectives::LAMBDA_AUDIO,
            lambda_rec: 1.0,
            weights: StreamWeights::default(),
            reason_drop: 0.0,
            model: BackboneConfig::default(),
            vocab: Vocabulary::toy(),
        }
    }
}

pub const TRAIN_KEYS: [&str; 35] = [
    "stage", "steps", "lr", "warmup", "lr_floor", "weight_decay", "clip", "rows", "ctx", "seed", "precision", "corpus",
    "init", "out", "metrics", "lambda_text", "lambda_audio", "lambda_rec", "weights", "reason_drop", "d_model",
    "n_heads", "n_understand", "n_crossmodal", "n_generate", "n_local", "d_local", "local_heads", "t_max",
    "rope_base", "d_ssl", "n_text", "n_reason", "n_recon", "forged",
];

fn opt<T: FromStr>(kv: &KeyValues, key: &str) -> Result<Option<T>> {
    kv.get(key)
        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for key `{key}`"))))
        .transpose()
}

impl TrainConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !TRAIN_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let mut c = Self::default();
        kv.take("stage", &mut c.stage)?;
        c.steps = opt(kv, "steps")?;
        c.lr = opt(kv, "lr")?;
        kv.take("warmup", &mut c.warmup)?;
        kv.take("lr_floor", &mut c.lr_floor)?;
        kv.take("weight_decay", &mut c.weight_decay)?;
        kv.take("clip", &mut c.clip)?;
        kv.take("rows", &mut c.rows)?;
        c.ctx = opt(kv, "ctx")?;
        kv.take("seed", &mut c.seed)?;
        if let Some(p) = kv.get("precision") {
            c.precision = match p {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => return Err(Error::Config(format!("precision must be f32 or f64, got `{p}`"))),
            };
        }
        c.corpus = kv.get("corpus").map(PathBuf::from);
        c.forged = kv.get("forged").map(PathBuf::from);
        c.init = kv.get("init").map(PathBuf::from);
        c.out = kv.get("out").map(PathBuf::from);
        c.metrics = kv.get("metrics").map(PathBuf::from);
        kv.take("lambda_text", &mut c.lambda_text)?;
        kv.take("lambda_audio", &mut c.lambda_audio)?;
        kv.take("lambda_rec", &mut c.lambda_rec)?;
        if let Some(w) = kv.get("weights") {
            let vals = w
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("bad weights `{w}`")))?;
            c.weights = StreamWeights::from_slice(&vals)?;
        }
        kv.take("reason_drop", &mut c.reason_drop)?;
        let m = &mut c.model;
        kv.take("d_model", &mut m.d_model)?;
        kv.take("n_heads", &mut m.n_heads)?;
        kv.take("n_understand", &mut m.n_understand)?;
        kv.take("n_crossmodal", &mut m.n_crossmodal)?;
        kv.take("n_generate", &mut m.n_generate)?;
        kv.take("n_local", &mut m.n_local)?;
        kv.take("d_local", &mut m.d_local)?;
        kv.take("local_heads", &mut m.local_heads)?;
        kv.take("t_max", &mut m.t_max)?;
        kv.take("rope_base", &mut m.rope_base)?;
        kv.take("d_ssl", &mut m.d_ssl)?;
        let (mut nt, mut nr, mut ns) = (c.vocab.n_text, c.vocab.n_reason, c.vocab.n_recon);
        kv.take("n_text", &mut nt)?;
        kv.take("n_reason", &mut nr)?;
        kv.take("n_recon", &mut ns)?;
        c.vocab = Vocabulary::new(nt, nr, ns)?;
        c.model.validate()?;
        if !(1..=4).contains(&c.stage) {
            return Err(Error::Config(format!("stage must be 1..4, got {}", c.stage)));
        }
        if !(0.0..=1.0).contains(&c.reason_drop) {
            return Err(Error::Config("reason_drop must lie in [0,1]".into()));
        }
        Ok(c)
    }

    /// Reads `path` (if any), applies process-environment overrides and
    /// validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        kv.apply_env(TRAIN_KEYS, |k| std::env::var(k).ok());
        Self::from_kv(&kv)
    }
}
