//! Save a model, reload it bit for bit, and diff it against a modified copy.

use factorlm::backbone::{group_sizes, Model};
use factorlm::checkpoint;
use factorlm::tensor::Precision;

fn main() -> factorlm::Result<()> {
    let model = Model::toy();
    let store = model.init(0, Precision::F32);
    for (group, n) in group_sizes(&store) {
        println!("{group:<12} {n:>8} parameters");
    }
    let dir = std::env::temp_dir().join("factorlm_ckpt_example");
    std::fs::create_dir_all(&dir).map_err(|e| factorlm::Error::Invalid(e.to_string()))?;
    let path = dir.join("toy.ckpt");
    checkpoint::save(&store, &path)?;
    let back = checkpoint::load(&path)?;
    println!("reloaded identical: {}", back == store);
    println!("manifest at {}", checkpoint::manifest_path(&path).display());

    let mut edited = back.clone();
    let w = edited.get("head.norm")?.clone();
    edited.insert("head.norm", factorlm::tensor::Array::full(w.shape(), 0.5));
    println!("diff: {:?}", checkpoint::diff(&store, &edited));

    let other = Model::new(
        factorlm::backbone::BackboneConfig {
            d_model: 32,
            n_heads: 2,
            ..Default::default()
        },
        model.vocab.clone(),
    )?;
    if let Err(e) = back.check_compatible(&other.init(0, Precision::F32)) {
        println!("loading into a narrower model fails: {e}");
    }
    Ok(())
}
