//! Self-supervised training loop for the association head.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::numeric::split_seed;
use crate::sampler::{category_groups, kmeans_cluster, sample_sub_segments, split_segments, SamplingPlan};
use crate::ssl::{loss_gradient, AssociationHead, ClusterSample, FrameSample, SslConfig, TrainingBatch};

pub const DEFAULT_MAX_CLUSTERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Output width `D_a` of the head.
    pub embed_dim: usize,
    /// Number of category clusters; `None` means `min(8, number of classes)`
    /// when a class count is known, otherwise 8.
    pub clusters: Option<usize>,
    pub kmeans_iterations: usize,
    /// Detections below this confidence are left out of training.
    pub min_confidence: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.5,
            embed_dim: 16,
            clusters: None,
            kmeans_iterations: 20,
            min_confidence: 0.5,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.clusters == Some(0) {
            return Err(Error::InvalidConfig("clusters must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::InvalidConfig("min_confidence must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Fills in the cluster count from the vocabulary size.
    pub fn with_class_count(mut self, classes: usize) -> Self {
        if self.clusters.is_none() {
            self.clusters = Some(DEFAULT_MAX_CLUSTERS.min(classes.max(1)));
        }
        self
    }

    /// The seeded starting head for a raw feature width.
    pub fn initial_head(&self, raw_dim: usize) -> Result<AssociationHead> {
        AssociationHead::random(self.embed_dim, raw_dim, self.learning_rate, split_seed(self.seed, "head", 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    pub frames: usize,
    pub clusters: usize,
    pub pairs: usize,
    pub triples: usize,
}

/// Assembles the clustered batch for one draw of the sampler. Returns the
/// batch and the number of sampled frames.
pub fn build_batch(
    seq: &VideoSequence,
    plan: &SamplingPlan,
    options: &TrainOptions,
    draw: u64,
) -> Result<(TrainingBatch, usize)> {
    let segments = split_segments(seq.frames.len(), plan.segment_length);
    let runs = sample_sub_segments(&segments, plan, draw);
    let mut sampled: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for (run, range) in runs.iter().enumerate() {
        for pos in range.clone() {
            let kept = seq.frames[pos]
                .detections
                .iter()
                .enumerate()
                .filter(|(_, d)| d.confidence >= options.min_confidence)
                .map(|(i, _)| i)
                .collect();
            sampled.push((pos, run, kept));
        }
    }
    let points: Vec<Vec<f64>> = sampled
        .iter()
        .flat_map(|(pos, _, kept)| kept.iter().map(|&i| seq.frames[*pos].detections[i].text_embedding.clone()))
        .collect();
    if points.len() < 2 {
        return Ok((TrainingBatch::default(), sampled.len()));
    }
    let k = options.clusters.unwrap_or(DEFAULT_MAX_CLUSTERS).min(points.len());
    let model = kmeans_cluster(&points, k, split_seed(options.seed, "kmeans", draw), options.kmeans_iterations)?;
    let sizes: Vec<usize> = sampled.iter().map(|(_, _, kept)| kept.len()).collect();
    let groups = category_groups(&sizes, &model.assignments)?;

    let clusters = groups
        .into_iter()
        .map(|(cluster, members)| {
            let frames = members
                .into_iter()
                .map(|m| {
                    let (pos, run, kept) = &sampled[m.frame];
                    let frame = &seq.frames[*pos];
                    let dets: Vec<_> = m.objects.iter().map(|&o| &frame.detections[kept[o]]).collect();
                    let dim = dets[0].raw_feature.len();
                    FrameSample {
                        frame_index: frame.frame_index,
                        run: *run,
                        raw: DMatrix::from_fn(dets.len(), dim, |r, c| dets[r].raw_feature[c]),
                        boxes: dets.iter().map(|d| d.bbox).collect(),
                    }
                })
                .collect();
            ClusterSample { cluster, frames }
        })
        .collect();
    Ok((TrainingBatch { clusters }, sampled.len()))
}

/// Runs `options.steps` SGD steps starting from `head`, with sampler draws
/// numbered from `start_step`. Each log entry holds the loss before its step.
pub fn train_association_head(
    seq: &VideoSequence,
    plan: &SamplingPlan,
    config: &SslConfig,
    options: &TrainOptions,
    head: AssociationHead,
    start_step: usize,
) -> Result<(AssociationHead, Vec<TrainLogEntry>)> {
    plan.validate()?;
    config.validate()?;
    options.validate()?;
    if seq.frames.len() < 3 {
        return Err(Error::Degenerate(format!(
            "training needs at least 3 frames, the sequence has {}",
            seq.frames.len()
        )));
    }
    let mut head = head;
    let mut log = Vec::with_capacity(options.steps);
    let mut useful_steps = 0;
    for step in start_step..start_step + options.steps {
        let (batch, frames) = build_batch(seq, plan, options, step as u64)?;
        let (loss, grad) = loss_gradient(&batch, &head, config)?;
        if loss.pairs > 0 {
            useful_steps += 1;
            head.apply_gradient(&grad)?;
        }
        log.push(TrainLogEntry {
            step,
            intra: loss.intra,
            inter: loss.inter,
            total: loss.total,
            frames,
            clusters: batch.clusters.len(),
            pairs: loss.pairs,
            triples: loss.triples,
        });
    }
    if options.steps > 0 && useful_steps == 0 {
        return Err(Error::Degenerate(
            "no sampled batch contained a category cluster spanning two frames; \
             check detection confidences against min_confidence and the cluster count"
                .into(),
        ));
    }
    Ok((head, log))
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    for entry in log {
        w.serialize(entry)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Centered moving average with a window of `window` entries (truncated at
/// the ends).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
