//! Batch loss and its analytic gradient with respect to the head projection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{
    assignment_matrix, inter_loss, inter_loss_backward, margin_loss, margin_loss_backward,
    max_off_diagonal, row_softmax, row_softmax_backward, AssociationHead, InterScope, SslConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, BoundingBox};
use crate::numeric::CompensatedSum;
use crate::sampler::enumerate_groups;

/// Objects of one category cluster in one sampled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame_index: usize,
    /// Contiguous run (sub-segment) of the sampled sequence this frame
    /// belongs to.
    pub run: usize,
    /// `n x D_r` raw features.
    pub raw: DMatrix<f64>,
    pub boxes: Vec<BoundingBox>,
}

/// Frames of one cluster in temporal order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterSample {
    pub cluster: usize,
    pub frames: Vec<FrameSample>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub clusters: Vec<ClusterSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub intra: f64,
    pub inter: f64,
    pub total: f64,
    pub pairs: usize,
    pub triples: usize,
    pub inter_pairs: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupCounts {
    pairs: usize,
    triples: usize,
    inter: usize,
}

impl ClusterSample {
    fn nonempty(&self) -> Vec<&FrameSample> {
        self.frames.iter().filter(|f| f.raw.nrows() > 0).collect()
    }

    fn counts(&self, scope: InterScope) -> GroupCounts {
        let frames = self.nonempty();
        let (pairs, triples) = enumerate_groups(frames.len());
        let inter = pairs
            .iter()
            .filter(|&&(a, b)| inter_applies(scope, frames[a], frames[b]))
            .count();
        GroupCounts {
            pairs: pairs.len(),
            triples: triples.len(),
            inter,
        }
    }
}

impl TrainingBatch {
    fn counts(&self, scope: InterScope) -> GroupCounts {
        self.clusters.iter().fold(GroupCounts::default(), |acc, c| {
            let n = c.counts(scope);
            GroupCounts {
                pairs: acc.pairs + n.pairs,
                triples: acc.triples + n.triples,
                inter: acc.inter + n.inter,
            }
        })
    }

    pub fn raw_dim(&self) -> Option<usize> {
        self.clusters
            .iter()
            .flat_map(|c| &c.frames)
            .find(|f| f.raw.nrows() > 0)
            .map(|f| f.raw.ncols())
    }

    /// Duplicates every object of every frame (each row and box appears
    /// twice, adjacent).
    pub fn with_duplicated_objects(&self) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| ClusterSample {
                cluster: c.cluster,
                frames: c
                    .frames
                    .iter()
                    .map(|f| {
                        let idx: Vec<usize> = (0..f.raw.nrows()).flat_map(|i| [i, i]).collect();
                        FrameSample {
                            frame_index: f.frame_index,
                            run: f.run,
                            raw: f.raw.select_rows(&idx),
                            boxes: idx.iter().map(|&i| f.boxes[i]).collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Self { clusters }
    }
}

fn inter_applies(scope: InterScope, a: &FrameSample, b: &FrameSample) -> bool {
    match scope {
        InterScope::All => true,
        InterScope::Short => a.run == b.run,
    }
}

struct Embedded {
    raw: DMatrix<f64>,
    norms: Vec<f64>,
    features: DMatrix<f64>,
}

fn embed(frame: &FrameSample, head: &AssociationHead) -> Result<Embedded> {
    if frame.raw.ncols() != head.in_dim() {
        return Err(Error::dims("raw feature", head.in_dim(), frame.raw.ncols()));
    }
    if frame.boxes.len() != frame.raw.nrows() {
        return Err(Error::dims("frame boxes", frame.raw.nrows(), frame.boxes.len()));
    }
    let u = &frame.raw * head.projection.transpose();
    let norms: Vec<f64> = u.row_iter().map(|r| r.norm()).collect();
    let mut features = u;
    for (mut row, &n) in features.row_iter_mut().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    Ok(Embedded {
        raw: frame.raw.clone(),
        norms,
        features,
    })
}

#[derive(Clone, Copy)]
struct Scales {
    pair: f64,
    trip: f64,
    inter: f64,
}

struct ClusterResult {
    pair: f64,
    trip: f64,
    inter: f64,
    kink: f64,
    gradient: Option<DMatrix<f64>>,
}

/// Distance of a margin-loss evaluation from its non-smooth set: the relu
/// argument at zero or a near tie for the largest off-diagonal entry.
/// Exact ties come from duplicated objects whose columns move together, so
/// they are not counted.
fn margin_kink_distance(e: &DMatrix<f64>, margin: f64) -> f64 {
    let mut best = f64::INFINITY;
    for r in 0..e.nrows() {
        let Some((arg, off)) = max_off_diagonal(e, r) else {
            continue;
        };
        let value = off - e[(r, r)] + margin;
        best = best.min(value.abs());
        if value > 0.0 {
            for c in 0..e.ncols() {
                let gap = off - e[(r, c)];
                if c != r && c != arg && gap > 0.0 {
                    best = best.min(gap);
                }
            }
        }
    }
    best
}

fn clamp_kink_distance(s: &DMatrix<f64>) -> f64 {
    if s.ncols() < 2 {
        return f64::INFINITY;
    }
    s.iter()
        .map(|&p| (p - super::BCE_EPSILON).abs().min((1.0 - super::BCE_EPSILON - p).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Gradient of `L(E)` for `E = softmax(τM) · softmax(τMᵀ)` with respect to
/// `M`, given `dL/dE`.
fn round_trip_backward(
    s_fwd: &DMatrix<f64>,
    s_bwd: &DMatrix<f64>,
    grad_e: &DMatrix<f64>,
    tau: f64,
) -> DMatrix<f64> {
    let ds_fwd = grad_e * s_bwd.transpose();
    let ds_bwd = s_fwd.transpose() * grad_e;
    row_softmax_backward(s_fwd, &ds_fwd, tau) + row_softmax_backward(s_bwd, &ds_bwd, tau).transpose()
}

fn cluster_pass(
    cluster: &ClusterSample,
    head: &AssociationHead,
    config: &SslConfig,
    tau: f64,
    scales: Scales,
    want_gradient: bool,
) -> Result<ClusterResult> {
    let frames = cluster.nonempty();
    let emb: Vec<Embedded> = frames.iter().map(|f| embed(f, head)).collect::<Result<_>>()?;
    let mut d_features: Vec<DMatrix<f64>> = emb
        .iter()
        .map(|e| DMatrix::zeros(e.features.nrows(), e.features.ncols()))
        .collect();
    let (pairs, triples) = enumerate_groups(frames.len());
    let mut pair_sum = CompensatedSum::new();
    let mut trip_sum = CompensatedSum::new();
    let mut inter_sum = CompensatedSum::new();
    let mut kink = f64::INFINITY;
    let intra_scale = config.intra_weight;

    for &(a, b) in &pairs {
        let (fa, fb) = (&emb[a].features, &emb[b].features);
        let m = fa * fb.transpose();
        let s_ab = row_softmax(&m, tau);
        let s_ba = row_softmax(&m.transpose(), tau);
        let e = &s_ab * &s_ba;
        pair_sum.add(margin_loss(&e, config.margin));
        kink = kink.min(margin_kink_distance(&e, config.margin));

        let mut dm = DMatrix::zeros(m.nrows(), m.ncols());
        if want_gradient && intra_scale > 0.0 {
            let ge = margin_loss_backward(&e, config.margin, intra_scale * scales.pair);
            dm += round_trip_backward(&s_ab, &s_ba, &ge, tau);
        }
        if inter_applies(config.inter_scope, frames[a], frames[b]) {
            let target = assignment_matrix(&iou_matrix(&frames[a].boxes, &frames[b].boxes), config.iou_thres);
            inter_sum.add(inter_loss(&s_ab, &target)?);
            kink = kink.min(clamp_kink_distance(&s_ab));
            if want_gradient && config.alpha > 0.0 {
                let ds = inter_loss_backward(&s_ab, &target, config.alpha * scales.inter);
                dm += row_softmax_backward(&s_ab, &ds, tau);
            }
        }
        if want_gradient {
            d_features[a] += &dm * fb;
            d_features[b] += dm.transpose() * fa;
        }
    }

    for &(a, b, c) in &triples {
        let (fa, fb, fc) = (&emb[a].features, &emb[b].features, &emb[c].features);
        let m_ab = fa * fb.transpose();
        let m_bc = fb * fc.transpose();
        let m_ac = &m_ab * &m_bc;
        let s_ac = row_softmax(&m_ac, tau);
        let s_ca = row_softmax(&m_ac.transpose(), tau);
        let e = &s_ac * &s_ca;
        trip_sum.add(margin_loss(&e, config.margin));
        kink = kink.min(margin_kink_distance(&e, config.margin));
        if want_gradient && intra_scale > 0.0 {
            let ge = margin_loss_backward(&e, config.margin, intra_scale * scales.trip);
            let dm_ac = round_trip_backward(&s_ac, &s_ca, &ge, tau);
            let dm_ab = &dm_ac * m_bc.transpose();
            let dm_bc = m_ab.transpose() * &dm_ac;
            d_features[a] += &dm_ab * fb;
            d_features[b] += dm_ab.transpose() * fa + &dm_bc * fc;
            d_features[c] += dm_bc.transpose() * fb;
        }
    }

    let gradient = want_gradient.then(|| {
        let mut g = DMatrix::zeros(head.out_dim(), head.in_dim());
        for (e, df) in emb.iter().zip(&d_features) {
            let mut du = df.clone();
            for r in 0..du.nrows() {
                let n = e.norms[r];
                if n == 0.0 {
                    du.row_mut(r).fill(0.0);
                    continue;
                }
                let f = e.features.row(r);
                let along = du.row(r).dot(&f);
                let projected = (du.row(r) - f * along) / n;
                du.set_row(r, &projected);
            }
            g += du.transpose() * &e.raw;
        }
        g
    });

    Ok(ClusterResult {
        pair: pair_sum.value(),
        trip: trip_sum.value(),
        inter: inter_sum.value(),
        kink,
        gradient,
    })
}

fn evaluate(
    batch: &TrainingBatch,
    head: &AssociationHead,
    config: &SslConfig,
    want_gradient: bool,
) -> Result<(LossBreakdown, f64, Option<DMatrix<f64>>)> {
    config.validate()?;
    let counts = batch.counts(config.inter_scope);
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let scales = Scales {
        pair: inv(counts.pairs),
        trip: inv(counts.triples),
        inter: inv(counts.inter),
    };
    let tau = config.effective_tau(head.out_dim());
    let results: Vec<ClusterResult> = batch
        .clusters
        .par_iter()
        .map(|c| cluster_pass(c, head, config, tau, scales, want_gradient))
        .collect::<Result<_>>()?;

    // Fixed combination order keeps results independent of the thread count.
    let mut pair = CompensatedSum::new();
    let mut trip = CompensatedSum::new();
    let mut inter = CompensatedSum::new();
    let mut kink = f64::INFINITY;
    let mut gradient = want_gradient.then(|| DMatrix::zeros(head.out_dim(), head.in_dim()));
    for r in &results {
        pair.add(r.pair);
        trip.add(r.trip);
        inter.add(r.inter);
        kink = kink.min(r.kink);
        if let (Some(g), Some(rg)) = (gradient.as_mut(), r.gradient.as_ref()) {
            *g += rg;
        }
    }
    let intra = pair.value() * scales.pair + trip.value() * scales.trip;
    let inter = inter.value() * scales.inter;
    let breakdown = LossBreakdown {
        intra,
        inter,
        total: config.intra_weight * intra + config.alpha * inter,
        pairs: counts.pairs,
        triples: counts.triples,
        inter_pairs: counts.inter,
    };
    Ok((breakdown, kink, gradient))
}

/// Batch objective: mean pair margin loss plus mean triplet margin loss
/// (intra), mean BCE over inter pairs (inter), combined as
/// `intra_weight * intra + alpha * inter`. Empty frames are skipped.
pub fn batch_loss(batch: &TrainingBatch, head: &AssociationHead, config: &SslConfig) -> Result<LossBreakdown> {
    evaluate(batch, head, config, false).map(|(l, _, _)| l)
}

/// Loss and its gradient with respect to `head.projection`.
pub fn loss_gradient(
    batch: &TrainingBatch,
    head: &AssociationHead,
    config: &SslConfig,
) -> Result<(LossBreakdown, DMatrix<f64>)> {
    let (loss, _, g) = evaluate(batch, head, config, true)?;
    Ok((loss, g.expect("gradient requested")))
}

/// Smallest distance of the current evaluation to a non-differentiable
/// point (relu kink, arg-max tie or BCE clamp boundary).
pub fn kink_distance(batch: &TrainingBatch, head: &AssociationHead, config: &SslConfig) -> Result<f64> {
    evaluate(batch, head, config, false).map(|(_, k, _)| k)
}
