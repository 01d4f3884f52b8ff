#![allow(dead_code)]

use factorlm::backbone::Model;
use factorlm::params::ParamStore;
use factorlm::tensor::{Array, Precision};
use factorlm::vocab::{AudioKind, Item, Special, Vocabulary, N_BOOKS};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_frames(v: &Vocabulary, kind: AudioKind, n: usize, rng: &mut impl Rng) -> Vec<[u32; N_BOOKS]> {
    (0..n)
        .map(|_| std::array::from_fn(|b| v.audio(kind, b, rng.random_range(0..v.per_book(kind)))))
        .collect()
}

pub fn random_text(v: &Vocabulary, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    (0..n).map(|_| v.text(rng.random_range(0..v.n_text))).collect()
}

/// A caption, a reasoning run, a reconstruction run and a trailing text span.
/// Either audio run may be dropped.
pub fn mixed_sequence(v: &Vocabulary, max_frames: usize, rng: &mut impl Rng) -> Vec<Item> {
    let mut head = vec![Special::Bos.id()];
    head.extend(random_text(v, rng.random_range(1..5), rng));
    head.push(Special::AudioBegin.id());
    let mut items = Vec::new();
    let with_reason = rng.random_bool(0.8);
    if with_reason {
        head.push(Special::ReasonBegin.id());
        items.push(Item::Text(head));
        items.push(Item::Audio {
            kind: AudioKind::Reason,
            frames: random_frames(v, AudioKind::Reason, rng.random_range(1..=max_frames), rng),
        });
        items.push(Item::Text(vec![Special::ReconBegin.id()]));
    } else {
        head.push(Special::ReconBegin.id());
        items.push(Item::Text(head));
    }
    items.push(Item::Audio {
        kind: AudioKind::Recon,
        frames: random_frames(v, AudioKind::Recon, rng.random_range(1..=max_frames), rng),
    });
    let mut tail = vec![Special::AudioEnd.id()];
    tail.extend(random_text(v, rng.random_range(0..4), rng));
    tail.push(Special::Eos.id());
    items.push(Item::Text(tail));
    items
}

/// Initialized parameters with random (non-zero) output heads, so every
/// parameter reaches the loss.
pub fn dense_store(model: &Model, seed: u64, precision: Precision) -> ParamStore {
    let mut st = model.init(seed, precision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = st
        .names()
        .filter(|n| n.starts_with("head.text") || n.starts_with("local.head"))
        .cloned()
        .collect();
    for n in names {
        let shape = st.get(&n).unwrap().shape().to_vec();
        st.insert(n, Array::randn(&shape, 0.3, &mut rng));
    }
    st
}

/// Every parameter perturbed by Gaussian noise of scale `std`.
pub fn fuzz_store(store: &ParamStore, std: f64, rng: &mut impl Rng) -> ParamStore {
    let mut out = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let a = store.get(&n).unwrap();
        let noise = Array::randn(a.shape(), std, rng);
        let data = a.data().iter().zip(noise.data()).map(|(x, e)| x + e).collect();
        out.insert(n, Array::new(a.shape().to_vec(), data).unwrap());
    }
    out
}
