//! Tracks a scenario with an untrained and a trained head and reports the
//! metrics for both.
//!
//! ```text
//! cargo run --release --example track_and_evaluate
//! ```

use ovmot::config::RunConfig;
use ovmot::synth::{evaluate_head, generate_scenario, train_association_head, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let mut config = ScenarioConfig::default();
    config.detector.false_positive_rate = 0.1;
    config.detector.box_noise = 0.5;
    let scenario = generate_scenario(&config)?;
    let run = RunConfig::default().resolved();
    let options = run.training.with_class_count(scenario.class_bank.num_classes());
    let initial = options.initial_head(config.embedding.raw_dim())?;
    let (trained, _) =
        train_association_head(&scenario.sequence, &run.sampling, &run.ssl, &options, initial.clone(), 0)?;

    for (name, head) in [("untrained", &initial), ("trained", &trained)] {
        let (rows, report) = evaluate_head(
            &scenario.sequence,
            &scenario.class_bank,
            head,
            &run.tracker,
            run.metrics.iou_threshold,
        )?;
        let mut ids: Vec<u64> = rows.iter().map(|r| r.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        println!("{name} head: {} tracks for {} objects", ids.len(), config.num_objects);
        print!("{}", report.table());
    }
    Ok(())
}
