//! Group-relative policy optimization on a verifiable task: answer text
//! token `q` with `q + 1`. Rewards are exact-match; the KL term keeps the
//! policy near its starting point.

use factorlm::backbone::{BackboneConfig, Model};
use factorlm::grpo::group_advantages;
use factorlm::harness::{grpo_train, GrpoConfig};
use factorlm::tensor::Precision;
use factorlm::vocab::Vocabulary;

fn main() -> factorlm::Result<()> {
    let cfg = BackboneConfig {
        d_model: 32,
        n_heads: 2,
        n_understand: 1,
        n_crossmodal: 1,
        n_generate: 1,
        n_local: 1,
        d_local: 16,
        local_heads: 2,
        t_max: 16,
        ..BackboneConfig::default()
    };
    let model = Model::new(cfg, Vocabulary::toy())?;
    let mut store = model.init(0, Precision::F32);

    let r = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    println!("advantages for rewards {r:?}: {:?}", group_advantages(&r));

    let gc = GrpoConfig {
        n_answers: 4,
        steps: 30,
        ..GrpoConfig::default()
    };
    let report = grpo_train(&model, &mut store, &gc, |m| {
        if m.step % 5 == 0 {
            println!("step {:>3}  reward {:.3}  surrogate {:+.4}  kl {:.5}", m.step, m.reward_mean, m.surrogate, m.kl);
        }
        Ok(())
    })?;
    println!(
        "mean reward {:.3} -> {:.3} in {:.1} s",
        report.first_reward, report.last_reward, report.wall_clock_s
    );
    Ok(())
}
