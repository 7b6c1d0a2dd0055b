//! Self-supervised training of the association head with a smoothed loss
//! curve and a checkpoint round trip.
//!
//! ```text
//! cargo run --release --example train_head
//! ```

use ovmot::config::RunConfig;
use ovmot::ssl::Checkpoint;
use ovmot::synth::train::smoothed;
use ovmot::synth::{generate_scenario, train_association_head, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let scenario = generate_scenario(&ScenarioConfig::default())?;
    let run = RunConfig::default().resolved();
    let options = run.training.with_class_count(scenario.class_bank.num_classes());
    let head = options.initial_head(scenario.config.embedding.raw_dim())?;

    let (head, log) = train_association_head(&scenario.sequence, &run.sampling, &run.ssl, &options, head, 0)?;
    let totals: Vec<f64> = log.iter().map(|e| e.total).collect();
    let curve = smoothed(&totals, 20);
    for i in (0..curve.len()).step_by(50) {
        println!(
            "step {:>4}  total {:.5}  intra {:.5}  inter {:.5}  smoothed {:.5}",
            log[i].step, log[i].total, log[i].intra, log[i].inter, curve[i]
        );
    }

    let path = std::env::temp_dir().join("ovmot-train-head.json");
    Checkpoint::from_head(&head, log.len(), run.ssl).save(&path)?;
    let restored = Checkpoint::load(&path)?;
    println!(
        "checkpoint {} at step {} restores the head exactly: {}",
        path.display(),
        restored.step,
        restored.head()? == head
    );
    Ok(())
}
