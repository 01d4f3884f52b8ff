//! Auditory-sentence constructors and the planted-dependency corpus generator.
//!
//! A sentence is an ordered list of audio and text segments drawn from related
//! sources. Five strategies are provided: long-form segmentation, speech/text
//! interleaving, audio/caption interleaving, mixture/clean triples and
//! attribute variants. Every sentence holds 2 to 8 segments and fits its
//! context budget; budgets are enforced by dropping trailing units whole.

mod synth;

pub use synth::{synth_corpus, tally_joint, SyntheticCorpusSpec};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::quant::{ClipFeatures, TokenizedClip, Tokenizer};
use crate::film::upsample_index;
use crate::tensor::Array;
use crate::vocab::{AudioKind, Record, RecordItem, RecordKind, Vocabulary};

pub const MIN_SEGMENTS: usize = 2;
pub const MAX_SEGMENTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Segmented,
    SpeechText,
    AudioCaption,
    MixtureTriples,
    AttributeVariants,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Segmented,
        Strategy::SpeechText,
        Strategy::AudioCaption,
        Strategy::MixtureTriples,
        Strategy::AttributeVariants,
    ];

    pub fn id(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .get((id as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::invalid(format!("strategy must be 1..5, got {id}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Audio,
    Text,
}

/// One segment: an audio clip (reasoning plus reconstruction frames) or a
/// text span, with a short source tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub items: Vec<RecordItem>,
    pub tag: String,
}

impl Segment {
    pub fn audio(codes: &TokenizedClip, tag: impl Into<String>) -> Self {
        Self {
            kind: SegmentKind::Audio,
            items: vec![
                RecordItem::audio(AudioKind::Reason, codes.reason.clone()),
                RecordItem::audio(AudioKind::Recon, codes.recon.clone()),
            ],
            tag: tag.into(),
        }
    }

    pub fn text(tokens: Vec<u32>, tag: impl Into<String>) -> Self {
        Self {
            kind: SegmentKind::Text,
            items: vec![RecordItem::text(tokens)],
            tag: tag.into(),
        }
    }

    /// Serialized positions, reasoning included. Audio segments add four
    /// markers around their frames.
    pub fn len(&self) -> usize {
        let n: usize = self.items.iter().map(|i| i.frames().map_or(0, |f| f.len()) + i.text_tokens().map_or(0, <[u32]>::len)).sum();
        match self.kind {
            SegmentKind::Audio => n + 4,
            SegmentKind::Text => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed speech/text order within an interleaved sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    AudioFirst,
    TextFirst,
}

/// Emission order of a mixture triple: sources `a`, `b` and their mix `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleOrder {
    Abc,
    Cab,
    Cba,
}

impl TripleOrder {
    pub const ALL: [TripleOrder; 3] = [TripleOrder::Abc, TripleOrder::Cab, TripleOrder::Cba];

    pub fn roles(self) -> [char; 3] {
        match self {
            TripleOrder::Abc => ['a', 'b', 'c'],
            TripleOrder::Cab => ['c', 'a', 'b'],
            TripleOrder::Cba => ['c', 'b', 'a'],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditorySentence {
    pub strategy: Strategy,
    pub segments: Vec<Segment>,
    pub truncated: bool,
    pub layout: Option<Layout>,
    pub orders: Vec<TripleOrder>,
}

impl AuditorySentence {
    /// Serialized length including BOS and EOS.
    pub fn total_len(&self) -> usize {
        2 + self.segments.iter().map(Segment::len).sum::<usize>()
    }

    pub fn kinds(&self) -> Vec<SegmentKind> {
        self.segments.iter().map(|s| s.kind).collect()
    }

    pub fn to_record(&self, id: impl Into<String>) -> Record {
        let mut meta = json!({
            "strategy": self.strategy.id(),
            "provenance": self.segments.iter().map(|s| s.tag.clone()).collect::<Vec<_>>(),
            "truncated": self.truncated,
        });
        if let Some(l) = self.layout {
            meta["layout"] = json!(l);
        }
        if !self.orders.is_empty() {
            meta["orders"] = json!(self.orders);
        }
        Record {
            id: id.into(),
            items: self.segments.iter().flat_map(|s| s.items.clone()).collect(),
            meta,
        }
    }
}

fn over(units: &[Vec<Segment>], ctx: usize) -> bool {
    2 + units.iter().flatten().map(Segment::len).sum::<usize>() > ctx
}

/// Drops trailing units until the sentence fits or `min_units` remain.
fn fit_units(units: &mut Vec<Vec<Segment>>, ctx: usize, min_units: usize) -> bool {
    let mut truncated = false;
    while over(units, ctx) && units.len() > min_units {
        units.pop();
        truncated = true;
    }
    truncated
}

fn overlength(units: &[Vec<Segment>], ctx: usize) -> Error {
    Error::Overlength {
        len: 2 + units.iter().flatten().map(Segment::len).sum::<usize>(),
        max: ctx,
    }
}

fn slice_clip(codes: &TokenizedClip, r0: usize, r1: usize) -> TokenizedClip {
    let s0 = 5 * r0 / 2;
    let s1 = if r1 == codes.reason.len() { codes.recon.len() } else { 5 * r1 / 2 };
    TokenizedClip {
        reason: codes.reason[r0..r1].to_vec(),
        recon: codes.recon[s0.min(codes.recon.len())..s1.min(codes.recon.len())].to_vec(),
    }
}

/// Splits one long clip into 2–8 contiguous segments at even reasoning
/// indices (so reconstruction cuts land on whole frames at `5i/2`).
///
/// When the pieces exceed `ctx`, trailing segments are dropped; if two
/// segments still do not fit, the second is shortened at an even boundary
/// and then both are pulled back toward the start of the clip. Any of these
/// sets `truncated`.
pub fn make_segmented(codes: &TokenizedClip, tag: &str, ctx: usize, rng: &mut impl Rng) -> Result<AuditorySentence> {
    let n = codes.reason.len();
    let cuts_available = n.div_ceil(2).saturating_sub(1);
    if cuts_available == 0 {
        return Err(Error::invalid(format!("clip with {n} reasoning frames is too short to segment")));
    }
    let k = rng.random_range(MIN_SEGMENTS..=MAX_SEGMENTS).min(cuts_available + 1);
    let mut cuts: Vec<usize> = sample(rng, cuts_available, k - 1).into_iter().map(|c| 2 * (c + 1)).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    let mut units: Vec<Vec<Segment>> = bounds
        .windows(2)
        .enumerate()
        .map(|(i, w)| vec![Segment::audio(&slice_clip(codes, w[0], w[1]), format!("{tag}#{i}"))])
        .collect();
    let mut truncated = fit_units(&mut units, ctx, MIN_SEGMENTS);
    if over(&units, ctx) {
        // Shorten the second segment first, then slide both back.
        let (mut r0, mut r1) = (bounds[1], bounds[2]);
        while over(&units, ctx) {
            if r1 > r0 + 2 {
                r1 -= 2;
            } else if r0 > 2 {
                r0 -= 2;
                r1 = r0 + 2;
            } else {
                break;
            }
            units = vec![
                vec![Segment::audio(&slice_clip(codes, 0, r0), format!("{tag}#0"))],
                vec![Segment::audio(&slice_clip(codes, r0, r1), format!("{tag}#1"))],
            ];
            truncated = true;
        }
        if over(&units, ctx) {
            return Err(overlength(&units, ctx));
        }
    }
    Ok(AuditorySentence {
        strategy: Strategy::Segmented,
        segments: units.into_iter().flatten().collect(),
        truncated,
        layout: None,
        orders: vec![],
    })
}

/// Alternating audio/text pairs in one fixed order for the whole sentence.
pub fn make_interleaved(
    strategy: Strategy,
    pairs: &[(TokenizedClip, Vec<u32>)],
    layout: Layout,
    ctx: usize,
) -> Result<AuditorySentence> {
    if !matches!(strategy, Strategy::SpeechText | Strategy::AudioCaption) {
        return Err(Error::invalid("interleaving is defined for strategies 2 and 3"));
    }
    if pairs.is_empty() || pairs.len() > MAX_SEGMENTS / 2 {
        return Err(Error::invalid(format!("interleaving needs 1..=4 pairs, got {}", pairs.len())));
    }
    let mut units: Vec<Vec<Segment>> = pairs
        .iter()
        .enumerate()
        .map(|(i, (clip, text))| {
            let a = Segment::audio(clip, format!("audio{i}"));
            let t = Segment::text(text.clone(), format!("text{i}"));
            match layout {
                Layout::AudioFirst => vec![a, t],
                Layout::TextFirst => vec![t, a],
            }
        })
        .collect();
    let truncated = fit_units(&mut units, ctx, 1);
    if over(&units, ctx) {
        return Err(overlength(&units, ctx));
    }
    Ok(AuditorySentence {
        strategy,
        segments: units.into_iter().flatten().collect(),
        truncated,
        layout: Some(layout),
        orders: vec![],
    })
}

/// Chains of `(a, b, mix)` triples. The mix is formed by summing the two
/// clips' features before quantization.
pub fn make_mixture_triples(
    tok: &Tokenizer,
    sources: &[(ClipFeatures, ClipFeatures)],
    orders: &[TripleOrder],
    ctx: usize,
) -> Result<AuditorySentence> {
    if sources.is_empty() || sources.len() > MAX_SEGMENTS / 3 || orders.len() != sources.len() {
        return Err(Error::invalid("mixture chains need 1 or 2 triples, one order each"));
    }
    let mut units = Vec::with_capacity(sources.len());
    for (i, ((a, b), order)) in sources.iter().zip(orders).enumerate() {
        let c = a.mix(b)?;
        let coded = |f: &ClipFeatures| tok.encode(f);
        let (ca, cb, cc) = (coded(a)?, coded(b)?, coded(&c)?);
        let unit = order
            .roles()
            .iter()
            .map(|r| {
                let codes = match r {
                    'a' => &ca,
                    'b' => &cb,
                    _ => &cc,
                };
                Segment::audio(codes, format!("{r}{i}"))
            })
            .collect();
        units.push(unit);
    }
    let truncated = fit_units(&mut units, ctx, 1);
    if over(&units, ctx) {
        return Err(overlength(&units, ctx));
    }
    let kept = units.len();
    Ok(AuditorySentence {
        strategy: Strategy::MixtureTriples,
        segments: units.into_iter().flatten().collect(),
        truncated,
        layout: None,
        orders: orders[..kept].to_vec(),
    })
}

/// Acoustic transform applied to the reconstruction-side features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attributes {
    /// Playback-rate factor; the reconstruction stream is resampled to
    /// `round(n / rate)` frames.
    pub rate: f64,
    pub scale: f64,
    pub offset: f64,
}

impl Default for Attributes {
    fn default() -> Self {
        Self {
            rate: 1.0,
            scale: 1.0,
            offset: 0.0,
        }
    }
}

impl Attributes {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            rate: [0.5, 0.8, 1.0, 1.25, 2.0][rng.random_range(0..5)],
            scale: rng.random_range(0.5..2.0),
            offset: rng.random_range(-0.5..0.5),
        }
    }

    /// Transformed acoustic features and their reasoning-frame alignment.
    pub fn apply(&self, clip: &ClipFeatures) -> Result<(ClipFeatures, Vec<usize>)> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::invalid(format!("rate must be positive, got {}", self.rate)));
        }
        let n = clip.n_recon();
        let m = ((n as f64 / self.rate).round() as usize).max(1);
        let src: Vec<usize> = (0..m).map(|j| ((j as f64 * self.rate) as usize).min(n - 1)).collect();
        let tf = |a: &Array| -> Result<Array> {
            let d = a.cols();
            let data = src
                .iter()
                .flat_map(|&j| a.row(j).iter().map(|v| v * self.scale + self.offset))
                .collect::<Vec<_>>();
            Array::new(vec![m, d], data)
        };
        let base_align = upsample_index(n, clip.n_reason());
        let align = src.iter().map(|&j| base_align[j]).collect();
        Ok((
            ClipFeatures {
                h_reason: clip.h_reason.clone(),
                h_ph: tf(&clip.h_ph)?,
                h_mu: tf(&clip.h_mu)?,
                h_env: tf(&clip.h_env)?,
            },
            align,
        ))
    }
}

/// Variants of one clip that share its reasoning codes while the
/// reconstruction codes follow transformed acoustics.
pub fn make_attribute_variants(tok: &Tokenizer, base: &ClipFeatures, attrs: &[Attributes], ctx: usize) -> Result<AuditorySentence> {
    if attrs.len() < MIN_SEGMENTS || attrs.len() > MAX_SEGMENTS {
        return Err(Error::invalid(format!("attribute variants need 2..=8 variants, got {}", attrs.len())));
    }
    let mut units = Vec::with_capacity(attrs.len());
    for (i, a) in attrs.iter().enumerate() {
        let (acoustic, align) = a.apply(base)?;
        let codes = tok.encode_with(base, &acoustic, &align)?;
        units.push(vec![Segment::audio(&codes, format!("variant{i}"))]);
    }
    let truncated = fit_units(&mut units, ctx, MIN_SEGMENTS);
    if over(&units, ctx) {
        return Err(overlength(&units, ctx));
    }
    Ok(AuditorySentence {
        strategy: Strategy::AttributeVariants,
        segments: units.into_iter().flatten().collect(),
        truncated,
        layout: None,
        orders: vec![],
    })
}

/// Draws source clips from a tokenizer's feature bank and builds sentences.
pub struct Forge<'t> {
    pub tok: &'t Tokenizer,
    /// Size of the local text alphabet for transcripts and captions.
    pub n_text: u32,
}

impl<'t> Forge<'t> {
    pub fn new(tok: &'t Tokenizer, n_text: u32) -> Self {
        Self { tok, n_text }
    }

    /// One text token per reasoning frame, read from its first code.
    pub fn transcript(&self, codes: &TokenizedClip) -> Vec<u32> {
        codes.reason.iter().map(|f| f[0] % self.n_text).collect()
    }

    /// Three tokens summarizing the clip's most frequent first-level codes.
    pub fn caption(&self, codes: &TokenizedClip) -> Vec<u32> {
        let mut counts = std::collections::BTreeMap::new();
        for f in &codes.reason {
            *counts.entry(f[0]).or_insert(0usize) += 1;
        }
        let mut top: Vec<(u32, usize)> = counts.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut out: Vec<u32> = top.iter().take(3).map(|(c, _)| c % self.n_text).collect();
        out.resize(3, 0);
        out
    }

    /// Duration range `lo..hi` seconds, shrunk in proportion for contexts
    /// below 1024 tokens.
    fn clip_range(lo: f64, hi: f64, ctx: usize) -> (f64, f64) {
        let hi = hi * (ctx as f64 / 1024.0).min(1.0);
        (lo.min(hi / 2.0), hi)
    }

    fn clip(&self, (lo, hi): (f64, f64), rng: &mut impl Rng) -> Result<ClipFeatures> {
        let d = rng.random_range(lo..hi);
        self.tok.bank.clip(d, rng)
    }

    pub fn sentence(&self, strategy: Strategy, ctx: usize, rng: &mut impl Rng) -> Result<AuditorySentence> {
        let long = Self::clip_range(4.0, 60.0, ctx);
        let short = Self::clip_range(1.0, 12.0, ctx);
        match strategy {
            Strategy::Segmented => {
                let clip = self.clip(long, rng)?;
                make_segmented(&self.tok.encode(&clip)?, "long", ctx, rng)
            }
            Strategy::SpeechText | Strategy::AudioCaption => {
                let n = rng.random_range(1..=MAX_SEGMENTS / 2);
                let mut pairs = Vec::with_capacity(n);
                for _ in 0..n {
                    let codes = self.tok.encode(&self.clip(short, rng)?)?;
                    let text = if strategy == Strategy::SpeechText { self.transcript(&codes) } else { self.caption(&codes) };
                    pairs.push((codes, text));
                }
                let layout = if rng.random::<bool>() { Layout::AudioFirst } else { Layout::TextFirst };
                make_interleaved(strategy, &pairs, layout, ctx)
            }
            Strategy::MixtureTriples => {
                let n = rng.random_range(1..=2);
                let mut sources = Vec::with_capacity(n);
                let mut orders = Vec::with_capacity(n);
                for _ in 0..n {
                    let d = rng.random_range(short.0..short.1);
                    let a = self.tok.bank.clip(d, rng)?;
                    let b = self.tok.bank.clip(d, rng)?;
                    sources.push((a, b));
                    orders.push(TripleOrder::ALL[rng.random_range(0..3)]);
                }
                make_mixture_triples(self.tok, &sources, &orders, ctx)
            }
            Strategy::AttributeVariants => {
                let base = self.clip(short, rng)?;
                let n = rng.random_range(MIN_SEGMENTS..=MAX_SEGMENTS);
                let attrs: Vec<Attributes> = (0..n).map(|_| Attributes::random(rng)).collect();
                make_attribute_variants(self.tok, &base, &attrs, ctx)
            }
        }
    }
}

/// Structural check of an emitted sentence record, independent of the
/// constructors. Returns one message per violation.
pub fn check_record(record: &Record, vocab: &Vocabulary, ctx: usize) -> Vec<String> {
    let mut v = Vec::new();
    let strategy = match record.meta["strategy"].as_u64().map(|s| Strategy::from_id(s as u8)) {
        Some(Ok(s)) => s,
        _ => return vec!["missing or invalid meta.strategy".into()],
    };
    let mut kinds = Vec::new();
    let mut reasons = Vec::new();
    let mut i = 0;
    while i < record.items.len() {
        match record.items[i].kind {
            RecordKind::Text => {
                kinds.push(SegmentKind::Text);
                i += 1;
            }
            RecordKind::Reason => {
                match record.items.get(i + 1) {
                    Some(n) if n.kind == RecordKind::Recon => {}
                    _ => v.push(format!("reasoning item {i} lacks its reconstruction item")),
                }
                kinds.push(SegmentKind::Audio);
                reasons.push(record.items[i].frames().unwrap_or_default());
                i += 2;
            }
            RecordKind::Recon => {
                v.push(format!("reconstruction item {i} without reasoning"));
                i += 1;
            }
        }
    }
    if !(MIN_SEGMENTS..=MAX_SEGMENTS).contains(&kinds.len()) {
        v.push(format!("{} segments", kinds.len()));
    }
    match record.serialized_len(vocab, true) {
        Ok(n) if n <= ctx => {}
        Ok(n) => v.push(format!("length {n} exceeds context {ctx}")),
        Err(e) => v.push(format!("does not serialize: {e}")),
    }
    let tags: Vec<String> = record.meta["provenance"]
        .as_array()
        .map(|a| a.iter().filter_map(|t| t.as_str().map(String::from)).collect())
        .unwrap_or_default();
    if tags.len() != kinds.len() {
        v.push("provenance does not cover every segment".into());
    }
    let all_audio = kinds.iter().all(|k| *k == SegmentKind::Audio);
    match strategy {
        Strategy::Segmented => {
            if !all_audio {
                v.push("segmented sentence contains text".into());
            }
        }
        Strategy::SpeechText | Strategy::AudioCaption => {
            let first = match record.meta["layout"].as_str() {
                Some("audio-first") => SegmentKind::Audio,
                Some("text-first") => SegmentKind::Text,
                _ => {
                    v.push("missing layout".into());
                    SegmentKind::Audio
                }
            };
            let second = if first == SegmentKind::Audio { SegmentKind::Text } else { SegmentKind::Audio };
            if kinds.len() % 2 != 0 || kinds.chunks(2).any(|c| c != [first, second]) {
                v.push(format!("interleaving breaks the fixed order: {kinds:?}"));
            }
        }
        Strategy::MixtureTriples => {
            if !all_audio || kinds.len() % 3 != 0 {
                v.push("mixture sentence is not a chain of audio triples".into());
            }
            let allowed: Vec<[char; 3]> = TripleOrder::ALL.iter().map(|o| o.roles()).collect();
            for (j, chunk) in tags.chunks(3).enumerate() {
                let roles: Vec<char> = chunk.iter().filter_map(|t| t.chars().next()).collect();
                let ok = chunk.iter().all(|t| t[1..] == j.to_string()) && allowed.iter().any(|a| roles == a);
                if !ok {
                    v.push(format!("triple {j} has order {chunk:?}"));
                }
            }
        }
        Strategy::AttributeVariants => {
            if !all_audio {
                v.push("variant sentence contains text".into());
            }
            if reasons.windows(2).any(|w| w[0] != w[1]) {
                v.push("variants disagree on reasoning codes".into());
            }
        }
    }
    v
}
