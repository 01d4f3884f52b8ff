use std::rc::Rc;

use super::{AudioKind, Special, Vocabulary, N_BOOKS, N_STREAMS, TEXT_STREAM};
use crate::error::{Error, Result};
use crate::tensor::{Array, AttnLayout, Graph, NodeId, Segment};

/// One span of a serialized sequence, with global vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Item {
    Text(Vec<u32>),
    Audio { kind: AudioKind, frames: Vec<[u32; N_BOOKS]> },
}

impl Item {
    /// Audio item from per-frame rows, each of which must hold `N_BOOKS` ids.
    pub fn audio(kind: AudioKind, rows: &[Vec<u32>]) -> Result<Self> {
        let frames = rows
            .iter()
            .map(|r| {
                <[u32; N_BOOKS]>::try_from(r.as_slice()).map_err(|_| {
                    Error::invalid(format!(
                        "audio frame has {} tokens, expected {N_BOOKS}",
                        r.len()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Item::Audio { kind, frames })
    }

    pub fn len(&self) -> usize {
        match self {
            Item::Text(t) => t.len(),
            Item::Audio { frames, .. } => frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Text,
    Reason,
    Recon,
    Pad,
}

impl FrameKind {
    pub fn audio_kind(self) -> Option<AudioKind> {
        match self {
            FrameKind::Reason => Some(AudioKind::Reason),
            FrameKind::Recon => Some(AudioKind::Recon),
            _ => None,
        }
    }

    pub fn is_audio(self) -> bool {
        self.audio_kind().is_some()
    }
}

impl From<AudioKind> for FrameKind {
    fn from(k: AudioKind) -> Self {
        match k {
            AudioKind::Reason => FrameKind::Reason,
            AudioKind::Recon => FrameKind::Recon,
        }
    }
}

/// Packed `B × T × S` token grid with validity masks.
///
/// Each position also carries a document id; attention never crosses
/// documents and padding rows at the end of a batch row form their own
/// document.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub b: usize,
    pub t: usize,
    pub tokens: Vec<u32>,
    pub stream_mask: Vec<bool>,
    pub audio_mask: Vec<bool>,
    pub frame_kind: Vec<FrameKind>,
    pub doc: Vec<u32>,
}

fn check_text(vocab: &Vocabulary, id: u32) -> Result<()> {
    if id == Special::Pad.id() || id >= vocab.text_slot_size() {
        return Err(Error::TokenRange {
            id,
            slot: "text stream".into(),
        });
    }
    Ok(())
}

impl TokenGrid {
    pub fn empty(b: usize) -> Self {
        Self {
            b,
            t: 0,
            tokens: vec![],
            stream_mask: vec![],
            audio_mask: vec![],
            frame_kind: vec![],
            doc: vec![],
        }
    }

    pub fn positions(&self) -> usize {
        self.b * self.t
    }

    pub fn token(&self, pos: usize, stream: usize) -> u32 {
        self.tokens[pos * N_STREAMS + stream]
    }

    pub fn frame(&self, pos: usize) -> [u32; N_BOOKS] {
        let mut f = [0; N_BOOKS];
        f.copy_from_slice(&self.tokens[pos * N_STREAMS..pos * N_STREAMS + N_BOOKS]);
        f
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        self.frame_kind[pos] == FrameKind::Pad
    }

    /// Packs batch rows, each a list of documents, padding every row to `t`
    /// (or to the longest row when `t` is `None`).
    pub fn from_docs(vocab: &Vocabulary, rows: &[Vec<Vec<Item>>], t: Option<usize>) -> Result<Self> {
        let lens: Vec<usize> = rows
            .iter()
            .map(|docs| docs.iter().flatten().map(Item::len).sum())
            .collect();
        let longest = lens.iter().copied().max().unwrap_or(0);
        let t = match t {
            Some(t) if t < longest => return Err(Error::Overlength { len: longest, max: t }),
            Some(t) => t,
            None => longest,
        };
        let b = rows.len();
        let mut g = Self {
            b,
            t,
            tokens: vec![Special::Pad.id(); b * t * N_STREAMS],
            stream_mask: vec![false; b * t * N_STREAMS],
            audio_mask: vec![false; b * t],
            frame_kind: vec![FrameKind::Pad; b * t],
            doc: vec![0; b * t],
        };
        let mut doc_id = 0u32;
        for (r, docs) in rows.iter().enumerate() {
            let mut pos = r * t;
            for items in docs {
                for item in items {
                    match item {
                        Item::Text(ids) => {
                            for &id in ids {
                                check_text(vocab, id)?;
                                g.tokens[pos * N_STREAMS + TEXT_STREAM] = id;
                                g.stream_mask[pos * N_STREAMS + TEXT_STREAM] = true;
                                g.frame_kind[pos] = FrameKind::Text;
                                g.doc[pos] = doc_id;
                                pos += 1;
                            }
                        }
                        Item::Audio { kind, frames } => {
                            for f in frames {
                                for (book, &id) in f.iter().enumerate() {
                                    vocab.audio_index(*kind, book, id)?;
                                    g.tokens[pos * N_STREAMS + book] = id;
                                    g.stream_mask[pos * N_STREAMS + book] = true;
                                }
                                g.audio_mask[pos] = true;
                                g.frame_kind[pos] = (*kind).into();
                                g.doc[pos] = doc_id;
                                pos += 1;
                            }
                        }
                    }
                }
                doc_id += 1;
            }
            for p in pos..(r + 1) * t {
                g.doc[p] = doc_id;
            }
            doc_id += 1;
        }
        Ok(g)
    }

    /// Single-row, single-document packing.
    pub fn pack(vocab: &Vocabulary, items: &[Item]) -> Result<Self> {
        Self::from_docs(vocab, &[vec![items.to_vec()]], None)
    }

    /// Inserts pad positions before the given (sorted) positions of a
    /// single-row grid. The pads join the surrounding document.
    pub fn with_pads_inserted(&self, before: &[usize]) -> Self {
        assert_eq!(self.b, 1, "pad insertion is defined for single-row grids");
        let mut g = Self::empty(1);
        let mut bi = 0;
        let push_pad = |g: &mut Self, doc: u32| {
            g.tokens.extend([Special::Pad.id(); N_STREAMS]);
            g.stream_mask.extend([false; N_STREAMS]);
            g.audio_mask.push(false);
            g.frame_kind.push(FrameKind::Pad);
            g.doc.push(doc);
            g.t += 1;
        };
        for p in 0..self.t {
            while bi < before.len() && before[bi] == p {
                push_pad(&mut g, self.doc[p]);
                bi += 1;
            }
            g.tokens
                .extend_from_slice(&self.tokens[p * N_STREAMS..(p + 1) * N_STREAMS]);
            g.stream_mask
                .extend_from_slice(&self.stream_mask[p * N_STREAMS..(p + 1) * N_STREAMS]);
            g.audio_mask.push(self.audio_mask[p]);
            g.frame_kind.push(self.frame_kind[p]);
            g.doc.push(self.doc[p]);
            g.t += 1;
        }
        let last = self.doc.last().copied().unwrap_or(0);
        while bi < before.len() {
            push_pad(&mut g, last);
            bi += 1;
        }
        g
    }

    /// Checks the one-modality-per-position invariant.
    pub fn validate(&self) -> Result<()> {
        for p in 0..self.positions() {
            let m = &self.stream_mask[p * N_STREAMS..(p + 1) * N_STREAMS];
            let active = m.iter().filter(|x| **x).count();
            let ok = match self.frame_kind[p] {
                FrameKind::Text => active == 1 && m[TEXT_STREAM],
                FrameKind::Reason | FrameKind::Recon => active == N_BOOKS && !m[TEXT_STREAM],
                FrameKind::Pad => active == 0,
            };
            if !ok || self.audio_mask[p] != self.frame_kind[p].is_audio() {
                return Err(Error::invalid(format!("inconsistent masks at position {p}")));
            }
            for (s, &on) in m.iter().enumerate() {
                if !on && self.tokens[p * N_STREAMS + s] != Special::Pad.id() {
                    return Err(Error::invalid(format!(
                        "masked slot {s} at position {p} does not hold PAD"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Attention segments (one per document run) with pads as invisible keys,
    /// and rotary positions that count only non-pad positions of a document.
    pub fn attention_layout(&self) -> (Rc<AttnLayout>, Rc<[f64]>) {
        let n = self.positions();
        let mut segments = Vec::new();
        let mut positions = vec![0.0; n];
        let mut start = 0;
        while start < n {
            let mut end = start + 1;
            let row_end = (start / self.t + 1) * self.t;
            while end < row_end && self.doc[end] == self.doc[start] {
                end += 1;
            }
            let valid: Vec<bool> = (start..end).map(|p| !self.is_pad(p)).collect();
            let mut k = 0.0;
            for (i, p) in (start..end).enumerate() {
                positions[p] = k;
                if valid[i] {
                    k += 1.0;
                }
            }
            segments.push(Segment {
                start,
                len: end - start,
                causal: true,
                key_valid: if valid.iter().all(|v| *v) {
                    None
                } else {
                    Some(valid)
                },
            });
            start = end;
        }
        (Rc::new(AttnLayout::new(segments)), positions.into())
    }

    /// For each position, the next non-pad position of the same document.
    pub fn next_in_doc(&self) -> Vec<Option<usize>> {
        let n = self.positions();
        let mut out = vec![None; n];
        let mut next: Option<usize> = None;
        for p in (0..n).rev() {
            if p % self.t == self.t - 1 {
                next = None;
            }
            if let Some(q) = next {
                if self.doc[q] != self.doc[p] {
                    next = None;
                }
            }
            out[p] = next;
            if !self.is_pad(p) {
                next = Some(p);
            }
        }
        out
    }
}

/// Canonical item list of one batch row: pads dropped, consecutive text merged,
/// consecutive frames of one kind merged.
pub fn unpack_sequence(grid: &TokenGrid, vocab: &Vocabulary, row: usize) -> Result<Vec<Item>> {
    let mut items: Vec<Item> = Vec::new();
    for p in row * grid.t..(row + 1) * grid.t {
        match grid.frame_kind[p] {
            FrameKind::Pad => {}
            FrameKind::Text => {
                let id = grid.token(p, TEXT_STREAM);
                match items.last_mut() {
                    Some(Item::Text(t)) => t.push(id),
                    _ => items.push(Item::Text(vec![id])),
                }
            }
            fk => {
                let kind = fk.audio_kind().unwrap();
                let f = grid.frame(p);
                for (book, &id) in f.iter().enumerate() {
                    vocab.audio_index(kind, book, id)?;
                }
                match items.last_mut() {
                    Some(Item::Audio { kind: k, frames }) if *k == kind => frames.push(f),
                    _ => items.push(Item::Audio {
                        kind,
                        frames: vec![f],
                    }),
                }
            }
        }
    }
    Ok(items)
}

/// `h_t = Σ_i m_{t,i} E_i(x_{t,i})` over all positions of the grid.
///
/// Every slot is looked up (PAD included); masked slots are discarded by an
/// exact row selection, so their contents never reach the output.
pub fn fuse_embeddings(g: &mut Graph, grid: &TokenGrid, tables: &[NodeId]) -> Result<NodeId> {
    if tables.len() != N_STREAMS {
        return Err(Error::invalid(format!(
            "expected {N_STREAMS} embedding tables, got {}",
            tables.len()
        )));
    }
    let d = g.shape(tables[0])[1];
    for t in tables {
        if g.shape(*t)[1] != d {
            return Err(Error::Shape {
                op: "fuse-embeddings",
                lhs: g.shape(tables[0]).to_vec(),
                rhs: g.shape(*t).to_vec(),
            });
        }
    }
    let n = grid.positions();
    if n == 0 {
        return Err(Error::invalid("cannot fuse an empty grid"));
    }
    let mut acc = g.constant(Array::zeros(&[n, d]));
    for (s, table) in tables.iter().enumerate() {
        let ids: Vec<usize> = (0..n).map(|p| grid.token(p, s) as usize).collect();
        let mask: Vec<bool> = (0..n).map(|p| grid.stream_mask[p * N_STREAMS + s]).collect();
        if !mask.iter().any(|m| *m) {
            continue;
        }
        let e = g.embedding(*table, &ids)?;
        let sum = g.add(acc, e)?;
        acc = g.masked_select_add(acc, sum, &mask)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use crate::vocab::TokenClass;

    fn frame(v: &Vocabulary, kind: AudioKind, i: u32) -> [u32; N_BOOKS] {
        std::array::from_fn(|b| v.audio(kind, b, i))
    }

    #[test]
    fn text_position_layout() {
        let v = Vocabulary::toy();
        let g = TokenGrid::pack(&v, &[Item::Text(vec![v.text(3)])]).unwrap();
        let row: Vec<u32> = (0..N_STREAMS).map(|s| g.token(0, s)).collect();
        let mut want = vec![0; 8];
        want.push(v.text(3));
        assert_eq!(row, want);
        assert!(!g.audio_mask[0]);
    }

    #[test]
    fn audio_position_layout() {
        let v = Vocabulary::toy();
        let f = frame(&v, AudioKind::Recon, 5);
        let g = TokenGrid::pack(&v, &[Item::Audio {
            kind: AudioKind::Recon,
            frames: vec![f],
        }])
        .unwrap();
        assert_eq!(&g.tokens[..8], &f);
        assert_eq!(g.tokens[8], Special::Pad.id());
        assert!(g.audio_mask[0]);
        g.validate().unwrap();
    }

    #[test]
    fn empty_input_gives_empty_grid() {
        let g = TokenGrid::pack(&Vocabulary::toy(), &[]).unwrap();
        assert_eq!(g.t, 0);
    }

    #[test]
    fn bad_frames_and_ids_are_rejected() {
        let v = Vocabulary::toy();
        assert!(Item::audio(AudioKind::Reason, &[vec![v.audio(AudioKind::Reason, 0, 0); 7]]).is_err());
        let wrong_book = [v.audio(AudioKind::Reason, 1, 0); N_BOOKS];
        assert!(TokenGrid::pack(&v, &[Item::Audio {
            kind: AudioKind::Reason,
            frames: vec![wrong_book]
        }])
        .is_err());
        assert!(TokenGrid::pack(&v, &[Item::Text(vec![v.size() - 1])]).is_err());
        assert!(TokenGrid::pack(&v, &[Item::Text(vec![0])]).is_err());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let v = Vocabulary::toy();
        let items = vec![
            Item::Text(vec![Special::Bos.id(), v.text(1), Special::AudioBegin.id(), Special::ReasonBegin.id()]),
            Item::Audio {
                kind: AudioKind::Reason,
                frames: vec![frame(&v, AudioKind::Reason, 1), frame(&v, AudioKind::Reason, 2)],
            },
            Item::Text(vec![Special::ReconBegin.id()]),
            Item::Audio {
                kind: AudioKind::Recon,
                frames: vec![frame(&v, AudioKind::Recon, 9)],
            },
        ];
        let g = TokenGrid::pack(&v, &items).unwrap();
        assert_eq!(unpack_sequence(&g, &v, 0).unwrap(), items);
    }

    #[test]
    fn fusion_cases() {
        let v = Vocabulary::new(4, 4, 4).unwrap();
        let n = v.size() as usize;
        let mut g = Graph::new(Precision::F64);
        // Dyadic entries keep every partial sum exact. Audio rows depend only on
        // the within-book index, so every book embeds index 2 identically.
        let table: Vec<f64> = (0..n as u32)
            .flat_map(|id| {
                let key = match v.decode(id).unwrap() {
                    TokenClass::Audio { index, .. } => 100 + index,
                    _ => id,
                };
                [(key % 13) as f64 / 16.0, (key % 5) as f64 / 8.0 - 0.25]
            })
            .collect();
        let t = g.constant(Array::new(vec![n, 2], table).unwrap());
        let tables = vec![t; N_STREAMS];
        let f = frame(&v, AudioKind::Reason, 2);
        let grid = TokenGrid::from_docs(
            &v,
            &[vec![vec![
                Item::Text(vec![v.text(1)]),
                Item::Audio {
                    kind: AudioKind::Reason,
                    frames: vec![f],
                },
            ]]],
            Some(3),
        )
        .unwrap();
        let h = fuse_embeddings(&mut g, &grid, &tables).unwrap();
        let h = g.value(h);
        let e = |id: u32| g.value(t).row(id as usize).to_vec();
        assert_eq!(h.row(0), e(v.text(1)).as_slice());
        let eight: Vec<f64> = e(f[0]).iter().map(|x| 8.0 * x).collect();
        assert_eq!(h.row(1), eight.as_slice());
        assert_eq!(h.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn next_in_doc_skips_pads_and_stops_at_boundaries() {
        let v = Vocabulary::toy();
        let d = |i| vec![Item::Text(vec![v.text(i), v.text(i)])];
        let g = TokenGrid::from_docs(&v, &[vec![d(0), d(1)]], Some(5)).unwrap();
        assert_eq!(g.next_in_doc(), vec![Some(1), None, Some(3), None, None]);
        let padded = TokenGrid::pack(&v, &d(0)[..]).unwrap().with_pads_inserted(&[1]);
        assert_eq!(padded.next_in_doc(), vec![Some(2), Some(2), None]);
        let (layout, pos) = padded.attention_layout();
        assert_eq!(layout.segments.len(), 1);
        assert_eq!(&pos[..], &[0.0, 1.0, 1.0]);
    }
}
