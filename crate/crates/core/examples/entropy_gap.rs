//! How much does knowing the reasoning code reduce uncertainty about the
//! reconstruction code? Brute-force tallies over planted corpora of varying
//! dependency strength.

use factorlm::forge::{synth_corpus, tally_joint, SyntheticCorpusSpec};
use factorlm::info::entropy_gap;

fn main() -> factorlm::Result<()> {
    println!("strength  H(S|X)  H(S|X,R)  I(S;R|X)  route discrepancy");
    for strength in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
        let spec = SyntheticCorpusSpec {
            n_records: 400,
            strength,
            alphabet: 8,
            ..SyntheticCorpusSpec::default()
        };
        let joint = tally_joint(&synth_corpus(&spec)?, spec.n_classes, spec.alphabet, None)?;
        let g = entropy_gap(&joint)?;
        println!(
            "{strength:>8.2}  {:>6.3}  {:>8.3}  {:>8.3}  {:.1e}",
            g.h_s_x,
            g.h_s_xr,
            g.cmi,
            g.discrepancy()
        );
    }
    Ok(())
}
