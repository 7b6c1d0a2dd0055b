//! Command line front end: `generate`, `train`, `track`, `evaluate` and
//! `ablate`. Every command writes the configuration it actually ran with
//! next to its outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::read_ground_truth;
use crate::error::{Error, Result};
use crate::metrics::{eval_boxes_from_ground_truth, eval_boxes_from_tracks, evaluate};
use crate::prompt::{attention_weight, piecewise_reweight, ClassEmbeddingBank};
use crate::ssl::Checkpoint;
use crate::synth::ablation::ablation_table;
use crate::synth::train::write_train_log;
use crate::synth::{
    generate_scenario, run_ablation, train_association_head, write_json, AblationVariant, Bundle, ScenarioConfig,
};
use crate::tracker::{read_track_csv, track_sequence, write_track_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_TABLE_FILE: &str = "ablation.txt";

#[derive(Debug, Parser)]
#[command(name = "ovmot", version, about = "Open-vocabulary multi-object tracking on precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario bundle from a scenario config.
    Generate(GenerateArgs),
    /// Train the association head on a bundle.
    Train(TrainArgs),
    /// Track a bundle with a trained head.
    Track(TrackArgs),
    /// Score a track CSV against ground truth.
    Evaluate(EvaluateArgs),
    /// Compare loss variants end to end on a bundle.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg.resolved())
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scenario config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario seed, overriding the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Output directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of steps, overriding the config file.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from this checkpoint and its step counter.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the track CSV and config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Track CSV written by `track`.
    #[arg(long)]
    pub tracks: PathBuf,
    /// Ground-truth JSON lines.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Class bank whose `base_mask` splits base and novel classes.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// JSON list of variants; defaults to full, w/o self-supervised,
    /// w/o intra and w/o inter.
    #[arg(long)]
    pub variants: Option<PathBuf>,
    /// Variants run concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

/// Process exit code for an error: 2 for configuration and input problems,
/// 3 for failures while processing valid inputs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Degenerate(_) | Error::NoVotes | Error::ZeroMass | Error::TooFewPoints { .. } => 3,
        Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write_json(&dir.join(format!("{name}_config.json")), value)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train(&a),
        Command::Track(a) => track(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = ScenarioConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let scenario = generate_scenario(&cfg)?;
    scenario.write_bundle(&a.out)?;
    let weights: Vec<f64> = scenario
        .sequence
        .frames
        .iter()
        .flat_map(|f| &f.detections)
        .map(|d| attention_weight(&d.text_embedding, &scenario.prompts, scenario.class_bank.temperature))
        .collect::<Result<_>>()?;
    let schedule = RunConfig::default().schedule;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let reweighted: Vec<f64> = weights.iter().map(|&w| piecewise_reweight(w, &schedule)).collect();
    println!(
        "{}: {} frames, {} detections, {} objects, {} classes ({} base)",
        cfg.name,
        scenario.sequence.frames.len(),
        scenario.sequence.num_detections(),
        cfg.num_objects,
        cfg.num_classes,
        cfg.num_base_classes
    );
    println!(
        "mean attention weight {:.4} (reweighted {:.4})",
        mean(&weights),
        mean(&reweighted)
    );
    println!("bundle written to {}", a.out.display());
    Ok(())
}

fn raw_dim(bundle: &Bundle) -> Option<usize> {
    bundle
        .sequence
        .frames
        .iter()
        .flat_map(|f| &f.detections)
        .map(|d| d.raw_feature.len())
        .next()
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(steps) = a.steps {
        cfg.training.steps = steps;
    }
    let bundle = Bundle::load(&a.bundle)?;
    let options = cfg.training.with_class_count(bundle.class_bank.num_classes());
    let dim = raw_dim(&bundle).ok_or_else(|| Error::Degenerate("bundle has no detections".into()))?;
    let (head, start) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            (ckpt.head()?, ckpt.step)
        }
        None => (options.initial_head(dim)?, 0),
    };
    if head.in_dim() != dim {
        return Err(Error::dims("checkpoint input width", dim, head.in_dim()));
    }
    let (head, log) = train_association_head(&bundle.sequence, &cfg.sampling, &cfg.ssl, &options, head, start)?;
    create_dir(&a.out)?;
    Checkpoint::from_head(&head, start + log.len(), cfg.ssl).save(&a.out.join(CHECKPOINT_FILE))?;
    write_train_log(&a.out.join(TRAIN_LOG_FILE), &log)?;
    echo(&a.out, "train", &cfg)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("step {:>5}: total {:.6} (intra {:.6}, inter {:.6})", first.step, first.total, first.intra, first.inter);
        println!("step {:>5}: total {:.6} (intra {:.6}, inter {:.6})", last.step, last.total, last.intra, last.inter);
    }
    println!("checkpoint at step {} written to {}", start + log.len(), a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn track(a: &TrackArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let bundle = Bundle::load(&a.bundle)?;
    let head = Checkpoint::load(&a.checkpoint)?.head()?;
    if let Some(dim) = raw_dim(&bundle) {
        if dim != head.in_dim() {
            return Err(Error::dims("raw feature width for checkpoint", head.in_dim(), dim));
        }
    }
    let rows = track_sequence(&bundle.sequence, &head, &bundle.class_bank, &cfg.tracker)?;
    create_dir(&a.out)?;
    write_track_csv(&a.out.join(TRACKS_FILE), &rows)?;
    echo(&a.out, "track", &cfg)?;
    let mut ids: Vec<u64> = rows.iter().map(|r| r.track_id).collect();
    ids.sort_unstable();
    ids.dedup();
    println!("{} rows, {} tracks written to {}", rows.len(), ids.len(), a.out.join(TRACKS_FILE).display());
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let rows = read_track_csv(&a.tracks)?;
    let gt = read_ground_truth(&a.ground_truth)?;
    let bank = ClassEmbeddingBank::load(&a.vocab)?;
    let report = evaluate(
        &eval_boxes_from_tracks(&rows),
        &eval_boxes_from_ground_truth(&gt),
        cfg.metrics.iou_threshold,
        |c| bank.is_base(c),
    )?;
    create_dir(&a.out)?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let table = report.table();
    std::fs::write(a.out.join(REPORT_TABLE_FILE), &table).map_err(|e| Error::io(a.out.join(REPORT_TABLE_FILE), e))?;
    echo(&a.out, "evaluate", &cfg)?;
    print!("{table}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let bundle = Bundle::load(&a.bundle)?;
    let variants: Vec<AblationVariant> = match &a.variants {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?
        }
        None => AblationVariant::standard(cfg.ssl),
    };
    let rows = run_ablation(&bundle.sequence, &bundle.class_bank, &variants, &cfg, a.jobs.max(1))?;
    create_dir(&a.out)?;
    write_json(&a.out.join(ABLATION_FILE), &rows)?;
    let table = ablation_table(&rows);
    std::fs::write(a.out.join(ABLATION_TABLE_FILE), &table).map_err(|e| Error::io(a.out.join(ABLATION_TABLE_FILE), e))?;
    echo(&a.out, "ablate", &serde_json::json!({ "run": cfg, "variants": variants }))?;
    print!("{table}");
    Ok(())
}
