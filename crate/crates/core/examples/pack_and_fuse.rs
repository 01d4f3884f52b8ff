//! Serialize records into multi-stream positions, pack several documents
//! into one row, and check that PAD slots never leak into fused embeddings.

use factorlm::backbone::Model;
use factorlm::forge::{synth_corpus, SyntheticCorpusSpec};
use factorlm::harness::pack_rows;
use factorlm::params::{Session, Trainable};
use factorlm::tensor::Precision;
use factorlm::vocab::{fuse_embeddings, Item, TokenGrid, N_STREAMS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> factorlm::Result<()> {
    let model = Model::toy();
    let records = synth_corpus(&SyntheticCorpusSpec {
        n_records: 6,
        caption_len: 2,
        ..SyntheticCorpusSpec::default()
    })?;
    let seqs = records
        .iter()
        .map(|r| r.to_items(&model.vocab, true))
        .collect::<factorlm::Result<Vec<_>>>()?;
    for (r, s) in records.iter().zip(&seqs) {
        let n: usize = s.iter().map(Item::len).sum();
        println!("{}: {n} positions", r.id);
    }
    let rows = pack_rows(seqs, 96)?;
    let grid = TokenGrid::from_docs(&model.vocab, &rows, Some(96))?;
    println!("packed into {} rows of {}; {} documents", grid.b, grid.t, rows.iter().map(Vec::len).sum::<usize>());
    let kinds: String = (0..grid.t)
        .map(|p| match grid.frame_kind[p] {
            factorlm::vocab::FrameKind::Text => 't',
            factorlm::vocab::FrameKind::Reason => 'r',
            factorlm::vocab::FrameKind::Recon => 's',
            factorlm::vocab::FrameKind::Pad => '.',
        })
        .collect();
    println!("row 0 layout: {kinds}");

    let store = model.init(0, Precision::F64);
    let fused = |grid: &TokenGrid| -> factorlm::Result<Vec<f64>> {
        let mut s = Session::new(&store, Precision::F64, Trainable::Nothing);
        let tables = model.stream_tables(&mut s)?;
        let h = fuse_embeddings(&mut s.g, grid, &tables)?;
        Ok(s.g.value(h).data().to_vec())
    };
    let base = fused(&grid)?;
    let mut noisy = grid.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut changed = 0;
    for p in 0..noisy.positions() {
        for st in 0..N_STREAMS {
            if !noisy.stream_mask[p * N_STREAMS + st] {
                noisy.tokens[p * N_STREAMS + st] = rng.random_range(0..model.vocab.size());
                changed += 1;
            }
        }
    }
    println!("randomized {changed} PAD slots; fused embeddings identical: {}", fused(&noisy)? == base);
    Ok(())
}
