//! Run the first three training stages on a planted corpus, confirm that
//! frozen groups stay byte-identical, and write per-step metrics to CSV.
//!
//! `cargo run --release --example train_toy_stage [steps]`

use factorlm::backbone::Model;
use factorlm::forge::{synth_corpus, SyntheticCorpusSpec};
use factorlm::harness::{evaluate, run_stage, ConditionMode, MetricsWriter, StageSpec, TrainOptions};
use factorlm::tensor::Precision;

fn main() -> factorlm::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let model = Model::toy();
    let mut store = model.init(0, Precision::F32);
    let mut records = synth_corpus(&SyntheticCorpusSpec {
        n_records: 288,
        ..SyntheticCorpusSpec::default()
    })?;
    let held_out = records.split_off(256);
    let dir = std::env::temp_dir();
    for stage in 1..=3u8 {
        let mut spec = StageSpec::for_stage(stage)?;
        spec.steps = steps;
        spec.lr = 3e-3;
        let opts = TrainOptions {
            reason_drop: 0.5,
            ..TrainOptions::default()
        };
        let path = dir.join(format!("factorlm_stage{stage}.csv"));
        let mut csv = MetricsWriter::create(&path)?;
        let report = run_stage(&model, &mut store, &spec, &opts, &records, |m| csv.write(m))?;
        println!(
            "stage {stage}: trains {:?}, loss {:.3} -> {:.3} in {:.1} s; frozen {:?} changed {:?}; metrics at {}",
            spec.trainable,
            report.first_loss,
            report.last_loss,
            report.wall_clock_s,
            report.frozen_groups,
            report.frozen_changed,
            path.display()
        );
    }
    for mode in [ConditionMode::WithReasoning, ConditionMode::WithoutReasoning] {
        let r = evaluate(&model, &store, &held_out, mode, 256)?;
        let ppl: Vec<String> = r.ppl.iter().map(|p| format!("{p:.1}")).collect();
        println!("{mode:?}: PPL per book [{}], average {:.2}", ppl.join(", "), r.ppl_avg);
    }
    Ok(())
}
