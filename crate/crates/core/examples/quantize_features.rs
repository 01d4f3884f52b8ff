//! Tokenize synthetic clips into 5 Hz reasoning and 12.5 Hz reconstruction
//! codes and watch the residual shrink level by level.

use factorlm::quant::{rvq_quantize, Tokenizer, TokenizerConfig};
use factorlm::vocab::{frame_budget, N_BOOKS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> factorlm::Result<()> {
    let tok = Tokenizer::new(TokenizerConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [2.0, 4.0, 6.0] {
        let clip = tok.bank.clip(d, &mut rng)?;
        let codes = tok.encode(&clip)?;
        let (nr, ns) = frame_budget(d)?;
        println!(
            "{d:>4.1} s: {} reasoning + {} reconstruction frames (budget {nr} + {ns} = {})",
            codes.reason.len(),
            codes.recon.len(),
            nr + ns
        );
        let rq = rvq_quantize(&tok.reason_states(&clip)?, &tok.reason_books, N_BOOKS)?;
        let norms: Vec<String> = rq.residual_norms.iter().map(|n| format!("{n:.3}")).collect();
        println!("      residual norm per level: {}", norms.join(" "));
        println!("      first reasoning frame {:?}", codes.reason[0]);
        println!("      first reconstruction frame {:?}", codes.recon[0]);
    }
    Ok(())
}
