use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AudioKind, Item, Special, Vocabulary, N_BOOKS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Text,
    Reason,
    Recon,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordTokens {
    Flat(Vec<u32>),
    Rows(Vec<Vec<u32>>),
}

/// One item of a corpus record. Token values are indices local to their
/// kind (text index, or within-book index for audio rows).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordItem {
    pub kind: RecordKind,
    pub tokens: RecordTokens,
}

impl RecordItem {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self {
            kind: RecordKind::Text,
            tokens: RecordTokens::Flat(tokens),
        }
    }

    pub fn audio(kind: AudioKind, frames: Vec<[u32; N_BOOKS]>) -> Self {
        Self {
            kind: match kind {
                AudioKind::Reason => RecordKind::Reason,
                AudioKind::Recon => RecordKind::Recon,
            },
            tokens: RecordTokens::Rows(frames.into_iter().map(|f| f.to_vec()).collect()),
        }
    }

    pub fn text_tokens(&self) -> Result<&[u32]> {
        match (&self.kind, &self.tokens) {
            (RecordKind::Text, RecordTokens::Flat(t)) => Ok(t),
            (RecordKind::Text, RecordTokens::Rows(r)) if r.is_empty() => Ok(&[]),
            _ => Err(Error::Corpus("text item must hold a flat token list".into())),
        }
    }

    /// Frames of an audio item, checked to be `N_BOOKS` wide.
    pub fn frames(&self) -> Result<Vec<[u32; N_BOOKS]>> {
        let rows: &[Vec<u32>] = match &self.tokens {
            RecordTokens::Rows(r) => r,
            RecordTokens::Flat(f) if f.is_empty() => &[],
            RecordTokens::Flat(_) => {
                return Err(Error::Corpus("audio item must hold token rows".into()))
            }
        };
        rows.iter()
            .map(|r| {
                <[u32; N_BOOKS]>::try_from(r.as_slice()).map_err(|_| {
                    Error::Corpus(format!("audio row has {} tokens, expected {N_BOOKS}", r.len()))
                })
            })
            .collect()
    }
}

/// One line of a JSON-lines corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub items: Vec<RecordItem>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Record {
    /// Serialized item list with global ids:
    /// `BOS text… AUDIO_BEGIN [REASON_BEGIN r…] RECON_BEGIN s… AUDIO_END … EOS`.
    ///
    /// A reasoning item directly followed by a reconstruction item forms one
    /// audio clip. With `with_reasoning = false` reasoning frames and their
    /// marker are omitted.
    pub fn to_items(&self, vocab: &Vocabulary, with_reasoning: bool) -> Result<Vec<Item>> {
        let mut out: Vec<Item> = Vec::new();
        let push_text = |out: &mut Vec<Item>, ids: &[u32]| match out.last_mut() {
            Some(Item::Text(t)) => t.extend_from_slice(ids),
            _ => out.push(Item::Text(ids.to_vec())),
        };
        let push_audio = |out: &mut Vec<Item>, kind, item: &RecordItem| -> Result<()> {
            let n = vocab.per_book(kind);
            let frames = item
                .frames()?
                .into_iter()
                .map(|f| {
                    let mut g = [0; N_BOOKS];
                    for (b, &i) in f.iter().enumerate() {
                        if i >= n {
                            return Err(Error::TokenRange {
                                id: i,
                                slot: format!("{} book {} (local index)", kind.name(), b + 1),
                            });
                        }
                        g[b] = vocab.audio(kind, b, i);
                    }
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            if !frames.is_empty() {
                out.push(Item::Audio { kind, frames });
            }
            Ok(())
        };
        push_text(&mut out, &[Special::Bos.id()]);
        let mut i = 0;
        while i < self.items.len() {
            let item = &self.items[i];
            match item.kind {
                RecordKind::Text => {
                    let ids = item
                        .text_tokens()?
                        .iter()
                        .map(|&t| {
                            if t < vocab.n_text {
                                Ok(vocab.text(t))
                            } else {
                                Err(Error::TokenRange {
                                    id: t,
                                    slot: "text (local index)".into(),
                                })
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    push_text(&mut out, &ids);
                    i += 1;
                }
                RecordKind::Reason | RecordKind::Recon => {
                    push_text(&mut out, &[Special::AudioBegin.id()]);
                    if item.kind == RecordKind::Reason {
                        if with_reasoning {
                            push_text(&mut out, &[Special::ReasonBegin.id()]);
                            push_audio(&mut out, AudioKind::Reason, item)?;
                        }
                        i += 1;
                    }
                    if let Some(next) = self.items.get(i).filter(|n| n.kind == RecordKind::Recon) {
                        push_text(&mut out, &[Special::ReconBegin.id()]);
                        push_audio(&mut out, AudioKind::Recon, next)?;
                        i += 1;
                    }
                    push_text(&mut out, &[Special::AudioEnd.id()]);
                }
            }
        }
        push_text(&mut out, &[Special::Eos.id()]);
        Ok(out)
    }

    /// Serialized length in positions.
    pub fn serialized_len(&self, vocab: &Vocabulary, with_reasoning: bool) -> Result<usize> {
        Ok(self.to_items(vocab, with_reasoning)?.iter().map(Item::len).sum())
    }
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<Record>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Corpus(format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
