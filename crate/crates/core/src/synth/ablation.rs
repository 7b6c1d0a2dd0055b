//! Train, track and evaluate several loss configurations side by side.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::metrics::{eval_boxes_from_ground_truth, eval_boxes_from_tracks, evaluate, EvaluationReport};
use crate::prompt::ClassEmbeddingBank;
use crate::ssl::{AssociationHead, SslConfig};
use crate::synth::train::train_association_head;
use crate::tracker::{track_sequence, TrackRow, TrackerConfig};

/// Tracks `seq` with `head` and scores the result against its ground truth.
pub fn evaluate_head(
    seq: &VideoSequence,
    bank: &ClassEmbeddingBank,
    head: &AssociationHead,
    tracker: &TrackerConfig,
    iou_threshold: f64,
) -> Result<(Vec<TrackRow>, EvaluationReport)> {
    let rows = track_sequence(seq, head, bank, tracker)?;
    let gt = seq
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("sequence has no ground truth".into()))?;
    let gt_map = seq
        .frames
        .iter()
        .zip(gt)
        .map(|(f, boxes)| (f.frame_index, boxes.clone()))
        .collect();
    let report = evaluate(
        &eval_boxes_from_tracks(&rows),
        &eval_boxes_from_ground_truth(&gt_map),
        iou_threshold,
        |c| bank.is_base(c),
    )?;
    Ok((rows, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub ssl: SslConfig,
    /// `false` evaluates the untrained initial head.
    #[serde(default = "yes")]
    pub train: bool,
    /// Overrides the cluster count of the run configuration.
    #[serde(default)]
    pub clusters: Option<usize>,
}

fn yes() -> bool {
    true
}

impl AblationVariant {
    pub fn new(name: &str, ssl: SslConfig) -> Self {
        Self {
            name: name.into(),
            ssl,
            train: true,
            clusters: None,
        }
    }

    /// Full model, untrained head, and each consistency term removed.
    pub fn standard(base: SslConfig) -> Vec<Self> {
        vec![
            Self::new("full", base),
            Self {
                train: false,
                ..Self::new("w/o self-supervised", base)
            },
            Self::new(
                "w/o intra",
                SslConfig {
                    intra_weight: 0.0,
                    ..base
                },
            ),
            Self::new("w/o inter", SslConfig { alpha: 0.0, ..base }),
        ]
    }

    /// Single category cluster, i.e. no category-consistency constraint.
    pub fn without_clustering(base: SslConfig) -> Self {
        Self {
            clusters: Some(1),
            ..Self::new("w/o clustering", base)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvaluationReport,
    /// Mean total loss over the last tenth of training, if trained.
    pub final_loss: Option<f64>,
}

fn run_variant(
    seq: &VideoSequence,
    bank: &ClassEmbeddingBank,
    variant: &AblationVariant,
    run: &RunConfig,
) -> Result<AblationRow> {
    let mut options = run.training.with_class_count(bank.num_classes());
    if let Some(k) = variant.clusters {
        options.clusters = Some(k);
    }
    let raw_dim = seq
        .frames
        .iter()
        .flat_map(|f| &f.detections)
        .map(|d| d.raw_feature.len())
        .next()
        .ok_or_else(|| Error::Degenerate("sequence has no detections".into()))?;
    let init = options.initial_head(raw_dim)?;
    let (head, final_loss) = if variant.train {
        let (head, log) = train_association_head(seq, &run.sampling, &variant.ssl, &options, init, 0)?;
        let tail = (log.len() / 10).max(1).min(log.len());
        let loss = (!log.is_empty())
            .then(|| log[log.len() - tail..].iter().map(|e| e.total).sum::<f64>() / tail as f64);
        (head, loss)
    } else {
        (init, None)
    };
    let (_, report) = evaluate_head(seq, bank, &head, &run.tracker, run.metrics.iou_threshold)?;
    Ok(AblationRow {
        variant: variant.name.clone(),
        report,
        final_loss,
    })
}

/// Runs every variant from the same initial head; `jobs > 1` runs variants
/// concurrently without changing any result.
pub fn run_ablation(
    seq: &VideoSequence,
    bank: &ClassEmbeddingBank,
    variants: &[AblationVariant],
    run: &RunConfig,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    if variants.len() < 2 || !variants.iter().any(|v| v.name == "full") {
        return Err(Error::InvalidConfig(
            "an ablation needs a variant named \"full\" and at least one other".into(),
        ));
    }
    run.validate()?;
    if jobs <= 1 {
        return variants.iter().map(|v| run_variant(seq, bank, v, run)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| variants.par_iter().map(|v| run_variant(seq, bank, v, run)).collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.variant.len()).max().unwrap_or(7).max(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} {:>7} {:>7} {:>7} {:>7}",
        "variant", "TETA", "LocA", "AssocA", "ClsA"
    );
    for r in rows {
        let a = &r.report.all;
        let _ = writeln!(
            out,
            "{:<width$} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.variant,
            100.0 * a.teta,
            100.0 * a.loca,
            100.0 * a.assoca,
            100.0 * a.clsa
        );
    }
    out
}
