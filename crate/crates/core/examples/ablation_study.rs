//! Runs the standard ablation, plus a single-cluster variant, on a scenario
//! file for several consecutive seeds and prints one table per seed.
//!
//! ```text
//! cargo run --release --example ablation_study -- crates/core/scenarios/easy.json 3
//! ```

use std::path::PathBuf;

use ovmot::config::RunConfig;
use ovmot::ssl::SslConfig;
use ovmot::synth::ablation::ablation_table;
use ovmot::synth::{generate_scenario, run_ablation, AblationVariant, ScenarioConfig};

fn main() -> ovmot::Result<()> {
    let mut args = std::env::args().skip(1);
    let base = match args.next() {
        Some(path) => ScenarioConfig::load(&PathBuf::from(path))?,
        None => ScenarioConfig::default(),
    };
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    for seed in base.seed..base.seed + seeds {
        let scenario = generate_scenario(&ScenarioConfig {
            seed,
            ..base.clone()
        })?;
        let run = RunConfig {
            seed,
            ..RunConfig::default()
        }
        .resolved();
        let mut variants = AblationVariant::standard(SslConfig::default());
        variants.push(AblationVariant::without_clustering(SslConfig::default()));
        let rows = run_ablation(&scenario.sequence, &scenario.class_bank, &variants, &run, 4)?;
        println!("{} seed {seed}", base.name);
        print!("{}", ablation_table(&rows));
    }
    Ok(())
}
