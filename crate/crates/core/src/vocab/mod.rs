//! Joint token vocabulary, multi-stream grids, and the JSON-lines corpus.

mod corpus;
mod grid;

pub use corpus::{read_corpus, write_corpus, Record, RecordItem, RecordKind, RecordTokens};
pub use grid::{fuse_embeddings, unpack_sequence, FrameKind, Item, TokenGrid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Audio codebooks per frame.
pub const N_BOOKS: usize = 8;
/// Streams per position: the audio books followed by the text stream.
pub const N_STREAMS: usize = N_BOOKS + 1;
pub const TEXT_STREAM: usize = N_BOOKS;

/// Control symbols occupying the first ids of the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    AudioBegin = 3,
    AudioEnd = 4,
    ReasonBegin = 5,
    ReconBegin = 6,
    Sep = 7,
}

pub const N_SPECIALS: u32 = 8;

impl Special {
    pub const ALL: [Special; 8] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::AudioBegin,
        Special::AudioEnd,
        Special::ReasonBegin,
        Special::ReconBegin,
        Special::Sep,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioKind {
    Reason,
    Recon,
}

impl AudioKind {
    pub const BOTH: [AudioKind; 2] = [AudioKind::Reason, AudioKind::Recon];

    pub fn name(self) -> &'static str {
        match self {
            AudioKind::Reason => "reason",
            AudioKind::Recon => "recon",
        }
    }

    pub fn marker(self) -> Special {
        match self {
            AudioKind::Reason => Special::ReasonBegin,
            AudioKind::Recon => Special::ReconBegin,
        }
    }
}

/// What a vocabulary id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Special(Special),
    Text(u32),
    Audio { kind: AudioKind, book: usize, index: u32 },
}

/// Partitioned id space `[specials | text | reasoning books | reconstruction books]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_text: u32,
    pub n_reason: u32,
    pub n_recon: u32,
}

impl Vocabulary {
    pub fn new(n_text: u32, n_reason: u32, n_recon: u32) -> Result<Self> {
        for (what, n) in [("n_text", n_text), ("n_reason", n_reason), ("n_recon", n_recon)] {
            if n < 2 {
                return Err(Error::invalid(format!("{what} must be at least 2, got {n}")));
            }
        }
        Ok(Self {
            n_text,
            n_reason,
            n_recon,
        })
    }

    pub fn toy() -> Self {
        Self::new(64, 64, 64).unwrap()
    }

    pub fn size(&self) -> u32 {
        N_SPECIALS + self.n_text + N_BOOKS as u32 * (self.n_reason + self.n_recon)
    }

    pub fn per_book(&self, kind: AudioKind) -> u32 {
        match kind {
            AudioKind::Reason => self.n_reason,
            AudioKind::Recon => self.n_recon,
        }
    }

    /// Ids legal in the text stream: specials and text tokens.
    pub fn text_slot_size(&self) -> u32 {
        N_SPECIALS + self.n_text
    }

    pub fn text(&self, index: u32) -> u32 {
        debug_assert!(index < self.n_text);
        N_SPECIALS + index
    }

    /// First id of `book` (0-based) for `kind`.
    pub fn book_offset(&self, kind: AudioKind, book: usize) -> u32 {
        let base = N_SPECIALS + self.n_text;
        match kind {
            AudioKind::Reason => base + book as u32 * self.n_reason,
            AudioKind::Recon => base + N_BOOKS as u32 * self.n_reason + book as u32 * self.n_recon,
        }
    }

    /// First audio id; audio ids are contiguous up to `size()`.
    pub fn audio_offset(&self) -> u32 {
        N_SPECIALS + self.n_text
    }

    pub fn audio(&self, kind: AudioKind, book: usize, index: u32) -> u32 {
        debug_assert!(book < N_BOOKS && index < self.per_book(kind));
        self.book_offset(kind, book) + index
    }

    pub fn encode(&self, class: TokenClass) -> Result<u32> {
        match class {
            TokenClass::Special(s) => Ok(s.id()),
            TokenClass::Text(i) if i < self.n_text => Ok(self.text(i)),
            TokenClass::Audio { kind, book, index } if book < N_BOOKS && index < self.per_book(kind) => {
                Ok(self.audio(kind, book, index))
            }
            other => Err(Error::invalid(format!("{other:?} outside vocabulary"))),
        }
    }

    pub fn decode(&self, id: u32) -> Result<TokenClass> {
        if id < N_SPECIALS {
            return Ok(TokenClass::Special(Special::ALL[id as usize]));
        }
        let mut rest = id - N_SPECIALS;
        if rest < self.n_text {
            return Ok(TokenClass::Text(rest));
        }
        rest -= self.n_text;
        for kind in AudioKind::BOTH {
            let n = self.per_book(kind);
            if rest < N_BOOKS as u32 * n {
                return Ok(TokenClass::Audio {
                    kind,
                    book: (rest / n) as usize,
                    index: rest % n,
                });
            }
            rest -= N_BOOKS as u32 * n;
        }
        Err(Error::Index {
            what: "vocabulary",
            index: id as usize,
            size: self.size() as usize,
        })
    }

    /// Local index of `id` within book `book` of `kind`.
    pub fn audio_index(&self, kind: AudioKind, book: usize, id: u32) -> Result<u32> {
        match self.decode(id)? {
            TokenClass::Audio {
                kind: k,
                book: b,
                index,
            } if k == kind && b == book => Ok(index),
            _ => Err(Error::TokenRange {
                id,
                slot: format!("{} book {}", kind.name(), book + 1),
            }),
        }
    }
}

/// Reasoning and reconstruction frame counts for a clip of `duration_s`
/// seconds at 5 Hz and 12.5 Hz, rounding half to even.
pub fn frame_budget(duration_s: f64) -> Result<(usize, usize)> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let reason = (5.0 * duration_s).round_ties_even() as usize;
    let recon = (12.5 * duration_s).round_ties_even() as usize;
    Ok((reason, recon))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_vocabulary_size() {
        assert_eq!(Vocabulary::toy().size(), 1096);
    }

    #[test]
    fn paper_scale_sizes() {
        let v = Vocabulary::new(32_000, 1024, 1024).unwrap();
        assert_eq!(v.size(), 8 + 32_000 + 2 * 8 * 1024);
    }

    #[test]
    fn ids_round_trip() {
        let v = Vocabulary::new(5, 3, 4).unwrap();
        for id in 0..v.size() {
            let c = v.decode(id).unwrap();
            assert_eq!(v.encode(c).unwrap(), id);
        }
        assert!(v.decode(v.size()).is_err());
    }

    #[test]
    fn tiny_sizes_rejected() {
        assert!(Vocabulary::new(0, 4, 4).is_err());
        assert!(Vocabulary::new(4, 1, 4).is_err());
    }

    #[test]
    fn frame_budget_examples() {
        assert_eq!(frame_budget(4.0).unwrap(), (20, 50));
        assert_eq!(frame_budget(2.0).unwrap(), (10, 25));
        assert_eq!(frame_budget(0.2).unwrap(), (1, 2));
        assert!(frame_budget(0.0).is_err());
        assert!(frame_budget(-1.0).is_err());
    }
}
