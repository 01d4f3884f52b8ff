//! Build one auditory sentence per strategy and validate each with the
//! independent structural checker.

use factorlm::forge::{check_record, Forge, Strategy};
use factorlm::quant::{Tokenizer, TokenizerConfig};
use factorlm::vocab::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> factorlm::Result<()> {
    let tok = Tokenizer::new(TokenizerConfig::default())?;
    let forge = Forge::new(&tok, 64);
    let vocab = Vocabulary::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ctx in [1024, 2048] {
        println!("context budget {ctx}");
        for strategy in Strategy::ALL {
            let s = forge.sentence(strategy, ctx, &mut rng)?;
            let rec = s.to_record(format!("{strategy:?}"));
            let issues = check_record(&rec, &vocab, ctx);
            let kinds: Vec<String> = s.segments.iter().map(|g| format!("{:?}:{}", g.kind, g.tag)).collect();
            println!(
                "  {:<18} {} segments, {:>4} positions, truncated {:<5} [{}] issues {:?}",
                format!("{strategy:?}"),
                s.segments.len(),
                s.total_len(),
                s.truncated,
                kinds.join(" "),
                issues
            );
        }
    }
    Ok(())
}
