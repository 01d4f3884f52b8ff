//! Prompt the model with text and a reasoning marker, and let it plan
//! reasoning frames before emitting reconstruction frames.

use factorlm::backbone::{generate, Model, SamplingPolicy};
use factorlm::tensor::Precision;
use factorlm::vocab::{Item, Special};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> factorlm::Result<()> {
    let model = Model::toy();
    let store = model.init(0, Precision::F32);
    let v = &model.vocab;
    let prompt = vec![Item::Text(vec![
        Special::Bos.id(),
        v.text(3),
        v.text(17),
        Special::AudioBegin.id(),
        Special::ReasonBegin.id(),
    ])];
    let policy = SamplingPolicy {
        temperature: 0.8,
        reason_frames: Some(3),
        recon_frames: Some(7),
        max_len: 40,
        ..SamplingPolicy::default()
    };
    let out = generate(&model, &store, &prompt, &policy, &mut ChaCha8Rng::seed_from_u64(2))?;
    for item in &out.items {
        match item {
            Item::Text(t) => println!("text  {t:?}"),
            Item::Audio { kind, frames } => {
                println!("{} ({} frames)", kind.name(), frames.len());
                for f in frames {
                    println!("      {f:?}");
                }
            }
        }
    }
    println!("truncated: {}", out.truncated);
    Ok(())
}
