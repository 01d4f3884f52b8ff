use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_rvq, rvq_quantize, ClipFeatures, Codebook, GroupQuantizer, QueryCompressor, SyntheticFeatureBank};
use crate::error::Result;
use crate::film::{upsample_index, FilmModulator};
use crate::params::{ParamStore, Session, Trainable};
use crate::tensor::{Array, Precision};
use crate::vocab::N_BOOKS;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TokenizerConfig {
    pub seed: u64,
    pub d_feat: usize,
    pub d_q: usize,
    pub qc_blocks: usize,
    pub qc_heads: usize,
    pub n_reason_codes: usize,
    pub n_recon_codes: usize,
    pub fit_clips: usize,
    pub fit_epochs: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_feat: 8,
            d_q: 16,
            qc_blocks: 4,
            qc_heads: 2,
            n_reason_codes: 64,
            n_recon_codes: 64,
            fit_clips: 24,
            fit_epochs: 6,
        }
    }
}

/// Codes of one clip: 5 Hz reasoning frames and 12.5 Hz reconstruction frames,
/// each eight codes wide (local indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedClip {
    pub reason: Vec<[u32; N_BOOKS]>,
    pub recon: Vec<[u32; N_BOOKS]>,
}

/// Feature bank plus both quantization branches.
///
/// Reasoning branch: query compression of the 25 Hz stream, then 8-level RVQ.
/// Reconstruction branch: the concatenated phone/music/environment features,
/// modulated by the upsampled quantized reasoning states, then group-wise VQ.
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub bank: SyntheticFeatureBank,
    pub params: ParamStore,
    qc: QueryCompressor,
    film: FilmModulator,
    pub reason_books: Vec<Codebook>,
    pub groups: GroupQuantizer,
}

impl Tokenizer {
    /// Builds the tokenizer and fits its codebooks on freshly generated clips.
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x746f6b);
        let mut params = ParamStore::new(Precision::F64);
        let qc = QueryCompressor::init(&mut params, "quant.qc", cfg.d_feat, cfg.d_q, cfg.qc_blocks, cfg.qc_heads, &mut rng);
        let film = FilmModulator::init(&mut params, "film", cfg.d_q, 3 * cfg.d_feat, &mut rng);
        let reason_books = (0..N_BOOKS)
            .map(|l| Codebook::random(cfg.n_reason_codes, cfg.d_q, 0.7f64.powi(l as i32), &mut rng))
            .collect();
        let groups = GroupQuantizer::random(cfg.n_recon_codes, cfg.d_feat, &mut rng);
        let mut t = Self {
            bank: SyntheticFeatureBank::new(cfg.seed, cfg.d_feat),
            cfg,
            params,
            qc,
            film,
            reason_books,
            groups,
        };
        t.fit(&mut rng)?;
        Ok(t)
    }

    fn fit(&mut self, rng: &mut impl Rng) -> Result<()> {
        let mut states = Vec::new();
        let mut modulated: [Vec<Array>; 3] = Default::default();
        for _ in 0..self.cfg.fit_clips {
            let d = rng.random_range(1.0..4.0);
            let clip = self.bank.clip(d, rng)?;
            states.push(self.reason_states(&clip)?);
        }
        let all_states = stack(&states)?;
        let mut books = std::mem::take(&mut self.reason_books);
        fit_rvq(&mut books, &all_states, self.cfg.fit_epochs, 0.5, rng)?;
        self.reason_books = books;
        for _ in 0..self.cfg.fit_clips {
            let d = rng.random_range(1.0..4.0);
            let clip = self.bank.clip(d, rng)?;
            let r_hat = rvq_quantize(&self.reason_states(&clip)?, &self.reason_books, N_BOOKS)?.quantized;
            let align = upsample_index(clip.n_recon(), clip.n_reason());
            let parts = self.modulate(&clip, &r_hat, &align)?;
            for (slot, p) in modulated.iter_mut().zip(parts) {
                slot.push(p);
            }
        }
        let [ph, mu, env] = modulated.map(|v| stack(&v));
        self.groups.fit(&ph?, &mu?, &env?, self.cfg.fit_epochs, rng)
    }

    /// Query-compressed reasoning states, `n_reason × d_q`.
    pub fn reason_states(&self, clip: &ClipFeatures) -> Result<Array> {
        let mut s = Session::new(&self.params, Precision::F64, Trainable::Nothing);
        let h = s.g.constant(clip.h_reason.clone());
        let out = self.qc.compress(&mut s, h)?;
        Ok(s.g.value(out).clone())
    }

    /// FiLM-modulated reconstruction features split back into the three groups.
    fn modulate(&self, clip: &ClipFeatures, r_hat: &Array, align: &[usize]) -> Result<[Array; 3]> {
        let mut s = Session::new(&self.params, Precision::F64, Trainable::Nothing);
        let ph = s.g.constant(clip.h_ph.clone());
        let mu = s.g.constant(clip.h_mu.clone());
        let env = s.g.constant(clip.h_env.clone());
        let se = s.g.concat(&[ph, mu, env], 1)?;
        let r = s.g.constant(r_hat.clone());
        let r_up = s.g.embedding(r, align)?;
        let out = self.film.modulate(&mut s, se, r_up)?;
        let d = self.cfg.d_feat;
        let mut parts = Vec::with_capacity(3);
        for k in 0..3 {
            let p = s.g.slice(out, 1, k * d, d)?;
            parts.push(s.g.value(p).clone());
        }
        Ok(parts.try_into().unwrap())
    }

    pub fn encode(&self, clip: &ClipFeatures) -> Result<TokenizedClip> {
        let align = upsample_index(clip.n_recon(), clip.n_reason());
        self.encode_with(clip, clip, &align)
    }

    /// Reasoning codes from `semantic`, reconstruction codes from `acoustic`
    /// aligned to reasoning frames by `align`.
    pub fn encode_with(&self, semantic: &ClipFeatures, acoustic: &ClipFeatures, align: &[usize]) -> Result<TokenizedClip> {
        let rq = rvq_quantize(&self.reason_states(semantic)?, &self.reason_books, N_BOOKS)?;
        let reason = (0..rq.quantized.rows())
            .map(|f| std::array::from_fn(|l| rq.codes[l][f]))
            .collect();
        let [ph, mu, env] = self.modulate(acoustic, &rq.quantized, align)?;
        let recon = self.groups.quantize(&ph, &mu, &env)?.codes;
        Ok(TokenizedClip { reason, recon })
    }

    /// Codebooks and modulation parameters under `quant.*` / `film.*`.
    pub fn export(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (l, b) in self.reason_books.iter().enumerate() {
            b.store(&mut out, &format!("quant.reason.{l}"));
        }
        self.groups.ph.store(&mut out, "quant.ph");
        self.groups.mu.store(&mut out, "quant.mu");
        for (l, b) in self.groups.env.iter().enumerate() {
            b.store(&mut out, &format!("quant.env.{l}"));
        }
        out
    }
}

fn stack(parts: &[Array]) -> Result<Array> {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|a| a.data().iter().copied()).collect();
    Array::new(vec![data.len() / cols, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_codes_follow_frame_rates() {
        let tok = Tokenizer::new(TokenizerConfig {
            fit_clips: 4,
            fit_epochs: 2,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = tok.bank.clip(2.0, &mut rng).unwrap();
        let codes = tok.encode(&clip).unwrap();
        assert_eq!(codes.reason.len(), 10);
        assert_eq!(codes.recon.len(), 25);
        assert!(codes.recon.iter().flatten().all(|c| (*c as usize) < 64));
        assert_eq!(tok.encode(&clip).unwrap(), codes);
    }
}
