//! FiLM modulation starts as the identity and only departs from it once the
//! coefficient networks are trained.

use factorlm::film::{film_apply, upsample_index, FilmModulator};
use factorlm::params::{ParamStore, Session, Trainable};
use factorlm::tensor::{Array, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> factorlm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new(Precision::F64);
    let film = FilmModulator::init(&mut store, "film", 4, 6, &mut rng);

    let (n_reason, n_recon) = (4, 10);
    let align = upsample_index(n_recon, n_reason);
    println!("reconstruction frame -> reasoning frame: {align:?}");

    let feats = Array::randn(&[n_recon, 6], 1.0, &mut rng);
    let reason = Array::randn(&[n_reason, 4], 1.0, &mut rng);
    let run = |store: &ParamStore| -> factorlm::Result<Array> {
        let mut s = Session::new(store, Precision::F64, Trainable::Nothing);
        let x = s.g.constant(feats.clone());
        let r = s.g.constant(reason.clone());
        let r_up = s.g.embedding(r, &align)?;
        let y = film.modulate(&mut s, x, r_up)?;
        Ok(s.g.value(y).clone())
    };
    println!("identity at init: max |y - x| = {:e}", run(&store)?.max_abs_diff(&feats));

    // Nudge the beta network's output layer and the modulation turns on.
    let w = store.get("film.beta.w2")?.clone();
    store.insert("film.beta.w2", Array::full(w.shape(), 0.1));
    println!("after perturbing beta: max |y - x| = {:.4}", run(&store)?.max_abs_diff(&feats));

    let gamma = Array::full(&[2, 3], 2.0);
    let beta = Array::full(&[2, 3], -1.0);
    let s = Array::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0])?;
    println!("explicit gamma*s + beta: {:?}", film_apply(&s, &gamma, &beta)?.data());
    Ok(())
}
