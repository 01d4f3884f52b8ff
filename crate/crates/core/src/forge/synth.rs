use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::film::upsample_index;
use crate::info::Joint3;
use crate::vocab::{frame_budget, AudioKind, Record, RecordItem, RecordKind, N_BOOKS};

/// Parameters of the planted-dependency corpus.
///
/// Each record is a class token `X` (plus `caption_len` tokens determined by
/// `X`) followed by one clip. Every reasoning frame carries one latent symbol
/// drawn from a half-width window of the alphabet whose position depends on
/// `X`; each book shows it through a fixed per-book permutation. Each
/// reconstruction code is, with probability `strength`, a fixed per-book
/// permutation of the aligned reasoning code, and uniform otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub n_records: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub strength: f64,
    pub n_classes: u32,
    /// Codes used per book (at most the book size of the target vocabulary).
    pub alphabet: u32,
    pub caption_len: usize,
    /// Record `i` gets class `i mod n_classes` instead of a random one.
    pub cycle_classes: bool,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_records: 256,
            min_duration: 0.4,
            max_duration: 1.6,
            strength: 0.9,
            n_classes: 4,
            alphabet: 64,
            caption_len: 0,
            cycle_classes: false,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("strength must lie in [0,1], got {}", self.strength)));
        }
        if self.alphabet < 2 || self.n_classes < 1 {
            return Err(Error::Config("alphabet needs at least 2 codes and one class".into()));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return Err(Error::Config("durations must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }

    /// The per-book permutations applied to reasoning codes.
    pub fn permutations(&self) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7065_726d);
        (0..N_BOOKS)
            .map(|_| {
                let mut p: Vec<u32> = (0..self.alphabet).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect()
    }

    /// Per-book permutations that render a reasoning frame's latent symbol.
    pub fn render_permutations(&self) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7265_6e64);
        (0..N_BOOKS)
            .map(|_| {
                let mut p: Vec<u32> = (0..self.alphabet).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect()
    }

    pub fn caption(&self, x: u32) -> Vec<u32> {
        (0..self.caption_len as u32)
            .map(|k| (x * (k + 2) + k + 1) % self.n_classes)
            .collect()
    }
}

pub fn synth_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<Record>> {
    spec.validate()?;
    let perms = spec.permutations();
    let render = spec.render_permutations();
    let a = spec.alphabet;
    let half = a.div_ceil(2);
    let mut out = Vec::with_capacity(spec.n_records);
    for i in 0..spec.n_records {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let x = if spec.cycle_classes { i as u32 % spec.n_classes } else { rng.random_range(0..spec.n_classes) };
        let d = if spec.min_duration == spec.max_duration {
            spec.min_duration
        } else {
            rng.random_range(spec.min_duration..spec.max_duration)
        };
        let (nr, ns) = frame_budget(d)?;
        let (nr, ns) = (nr.max(1), ns.max(1));
        let shift = (x as u64 * a as u64 / spec.n_classes as u64) as u32;
        let reason: Vec<[u32; N_BOOKS]> = (0..nr)
            .map(|_| {
                let u = ((rng.random_range(0..half) + shift) % a) as usize;
                std::array::from_fn(|b| render[b][u])
            })
            .collect();
        let align = upsample_index(ns, nr);
        let recon: Vec<[u32; N_BOOKS]> = align
            .iter()
            .map(|&f| {
                std::array::from_fn(|b| {
                    if rng.random::<f64>() < spec.strength {
                        perms[b][reason[f][b] as usize]
                    } else {
                        rng.random_range(0..a)
                    }
                })
            })
            .collect();
        let mut text = vec![x];
        text.extend(spec.caption(x));
        out.push(Record {
            id: format!("synth-{i}"),
            items: vec![
                RecordItem::text(text),
                RecordItem::audio(AudioKind::Reason, reason),
                RecordItem::audio(AudioKind::Recon, recon),
            ],
            meta: json!({ "class": x, "strength": spec.strength }),
        });
    }
    Ok(out)
}

/// Counts `(X, R, S)` over every reconstruction frame of `records`, where `X`
/// is the class token, `S` the frame's code in `book` and `R` the code of
/// the aligned reasoning frame in the same book. `None` pools all books.
pub fn tally_joint(records: &[Record], n_classes: u32, alphabet: u32, book: Option<usize>) -> Result<Joint3> {
    let mut j = Joint3::new([n_classes as usize, alphabet as usize, alphabet as usize]);
    for rec in records {
        let x = rec
            .items
            .iter()
            .find(|i| i.kind == RecordKind::Text)
            .and_then(|i| i.text_tokens().ok()?.first().copied())
            .ok_or_else(|| Error::Corpus(format!("record {} has no class token", rec.id)))?;
        let frames = |k: RecordKind| -> Result<Vec<[u32; N_BOOKS]>> {
            rec.items.iter().find(|i| i.kind == k).map_or(Ok(vec![]), |i| i.frames())
        };
        let (r, s) = (frames(RecordKind::Reason)?, frames(RecordKind::Recon)?);
        if r.is_empty() {
            continue;
        }
        let align = upsample_index(s.len(), r.len());
        let books: Vec<usize> = book.map_or((0..N_BOOKS).collect(), |b| vec![b]);
        for (jj, sf) in s.iter().enumerate() {
            for &b in &books {
                let (rv, sv) = (r[align[jj]][b], sf[b]);
                if x >= n_classes || rv >= alphabet || sv >= alphabet {
                    return Err(Error::Corpus(format!("record {} exceeds the tally alphabet", rec.id)));
                }
                j.add(x as usize, rv as usize, sv as usize, 1.0);
            }
        }
    }
    Ok(j)
}
