//! Writes a scenario bundle to a directory and reads it back.
//!
//! ```text
//! cargo run --release --example generate_scenario -- crates/core/scenarios/occluded.json /tmp/occluded
//! ```

use std::path::PathBuf;

use ovmot::synth::{generate_scenario, Bundle, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = match args.next() {
        Some(path) => ScenarioConfig::load(&PathBuf::from(path))?,
        None => ScenarioConfig::default(),
    };
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("ovmot-{}", config.name)));

    let scenario = generate_scenario(&config)?;
    scenario.write_bundle(&out)?;
    let bundle = Bundle::load(&out)?;
    let occluded = scenario.truth.iter().flatten().filter(|t| t.occluded).count();
    let spurious = scenario.truth.iter().flatten().filter(|t| t.track_id.is_none()).count();
    println!("wrote {}", out.display());
    println!(
        "{} frames, {} detections ({occluded} occluded, {spurious} false positives), {} ground-truth boxes",
        bundle.sequence.frames.len(),
        bundle.sequence.num_detections(),
        bundle.ground_truth_map().values().map(Vec::len).sum::<usize>()
    );
    println!(
        "{} classes, base mask {:?}, {} prompt pairs",
        bundle.class_bank.num_classes(),
        bundle.class_bank.base_mask,
        bundle.prompts.pairs.len()
    );
    Ok(())
}
