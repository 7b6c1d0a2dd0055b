//! TETA-style evaluation: localization matching, then classification and
//! association accuracy over the matched pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assignment::max_eligible_matching;
use crate::data::GroundTruthBox;
use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, BoundingBox};
use crate::tracker::TrackRow;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// A box with identity and category, used for predictions and ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalBox {
    pub frame: usize,
    pub track_id: u64,
    pub class_id: usize,
    pub bbox: BoundingBox,
}

impl From<&TrackRow> for EvalBox {
    fn from(r: &TrackRow) -> Self {
        Self {
            frame: r.frame,
            track_id: r.track_id,
            class_id: r.class_id,
            bbox: r.bbox,
        }
    }
}

pub fn eval_boxes_from_tracks(rows: &[TrackRow]) -> Vec<EvalBox> {
    rows.iter().map(EvalBox::from).collect()
}

pub fn eval_boxes_from_ground_truth(gt: &BTreeMap<usize, Vec<GroundTruthBox>>) -> Vec<EvalBox> {
    gt.iter()
        .flat_map(|(&frame, boxes)| {
            boxes.iter().map(move |g| EvalBox {
                frame,
                track_id: g.track_id,
                class_id: g.class_id,
                bbox: g.bbox,
            })
        })
        .collect()
}

/// A localized (prediction, ground truth) pair with its association tallies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub frame: usize,
    pub pred_id: u64,
    pub gt_id: u64,
    pub pred_class: usize,
    pub gt_class: usize,
    pub iou: f64,
    pub tpa: usize,
    pub fpa: usize,
    pub fna: usize,
}

impl MatchedPair {
    pub fn association_score(&self) -> f64 {
        let denom = self.tpa + self.fpa + self.fna;
        if denom == 0 {
            0.0
        } else {
            self.tpa as f64 / denom as f64
        }
    }
}

/// Counts from one or more sequences. Merging concatenates the pair lists and
/// sums the counts, so it is associative and order independent up to pair order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchLedger {
    pub tpl: Vec<MatchedPair>,
    pub fpl: usize,
    pub fnl: usize,
    pub tpc: usize,
    pub fpc: usize,
    pub fnc: usize,
    /// Predicted classes of the unmatched predictions.
    pub unmatched_pred_classes: Vec<usize>,
    /// Ground-truth classes of the unmatched ground truth.
    pub unmatched_gt_classes: Vec<usize>,
}

impl MatchLedger {
    pub fn merge(&mut self, other: MatchLedger) {
        self.tpl.extend(other.tpl);
        self.fpl += other.fpl;
        self.fnl += other.fnl;
        self.tpc += other.tpc;
        self.fpc += other.fpc;
        self.fnc += other.fnc;
        self.unmatched_pred_classes.extend(other.unmatched_pred_classes);
        self.unmatched_gt_classes.extend(other.unmatched_gt_classes);
    }

    /// Sub-ledger keeping matched pairs and missed ground truth by their
    /// ground-truth class and false positives by their predicted class.
    pub fn restrict<F: Fn(usize) -> bool>(&self, keep: F) -> MatchLedger {
        let tpl: Vec<MatchedPair> = self.tpl.iter().filter(|p| keep(p.gt_class)).copied().collect();
        let unmatched_pred_classes: Vec<usize> =
            self.unmatched_pred_classes.iter().copied().filter(|&c| keep(c)).collect();
        let unmatched_gt_classes: Vec<usize> = self.unmatched_gt_classes.iter().copied().filter(|&c| keep(c)).collect();
        let (tpc, wrong) = class_counts(&tpl);
        MatchLedger {
            fpl: unmatched_pred_classes.len(),
            fnl: unmatched_gt_classes.len(),
            tpc,
            fpc: wrong,
            fnc: wrong,
            tpl,
            unmatched_pred_classes,
            unmatched_gt_classes,
        }
    }
}

fn class_counts(tpl: &[MatchedPair]) -> (usize, usize) {
    let correct = tpl.iter().filter(|p| p.pred_class == p.gt_class).count();
    (correct, tpl.len() - correct)
}

fn group_by_frame(boxes: &[EvalBox]) -> BTreeMap<usize, Vec<&EvalBox>> {
    let mut out: BTreeMap<usize, Vec<&EvalBox>> = BTreeMap::new();
    for b in boxes {
        out.entry(b.frame).or_default().push(b);
    }
    out
}

/// Per-frame class-agnostic one-to-one matching at `IoU ≥ iou_threshold`,
/// maximizing the number of matches and then the total IoU.
pub fn match_localization(predictions: &[EvalBox], ground_truth: &[EvalBox], iou_threshold: f64) -> Result<MatchLedger> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    let preds = group_by_frame(predictions);
    let gts = group_by_frame(ground_truth);
    let mut ledger = MatchLedger::default();
    let mut frames: Vec<usize> = preds.keys().chain(gts.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();
    for frame in frames {
        let p = preds.get(&frame).map_or(&[][..], |v| v.as_slice());
        let g = gts.get(&frame).map_or(&[][..], |v| v.as_slice());
        let ious = iou_matrix(
            &p.iter().map(|b| b.bbox).collect::<Vec<_>>(),
            &g.iter().map(|b| b.bbox).collect::<Vec<_>>(),
        );
        let pairs = max_eligible_matching(&ious, |i, j| ious[(i, j)] >= iou_threshold);
        let mut p_used = vec![false; p.len()];
        let mut g_used = vec![false; g.len()];
        for (i, j) in pairs {
            p_used[i] = true;
            g_used[j] = true;
            ledger.tpl.push(MatchedPair {
                frame,
                pred_id: p[i].track_id,
                gt_id: g[j].track_id,
                pred_class: p[i].class_id,
                gt_class: g[j].class_id,
                iou: ious[(i, j)],
                tpa: 0,
                fpa: 0,
                fna: 0,
            });
        }
        ledger
            .unmatched_pred_classes
            .extend(p.iter().zip(&p_used).filter(|(_, u)| !**u).map(|(b, _)| b.class_id));
        ledger
            .unmatched_gt_classes
            .extend(g.iter().zip(&g_used).filter(|(_, u)| !**u).map(|(b, _)| b.class_id));
    }
    ledger.fpl = ledger.unmatched_pred_classes.len();
    ledger.fnl = ledger.unmatched_gt_classes.len();
    let (tpc, wrong) = class_counts(&ledger.tpl);
    ledger.tpc = tpc;
    ledger.fpc = wrong;
    ledger.fnc = wrong;
    tally_association(&mut ledger.tpl);
    Ok(ledger)
}

/// Fills TPA/FPA/FNA for each pair from the identities of all pairs.
pub fn tally_association(tpl: &mut [MatchedPair]) {
    let mut joint: HashMap<(u64, u64), usize> = HashMap::new();
    let mut by_pred: HashMap<u64, usize> = HashMap::new();
    let mut by_gt: HashMap<u64, usize> = HashMap::new();
    for p in tpl.iter() {
        *joint.entry((p.pred_id, p.gt_id)).or_default() += 1;
        *by_pred.entry(p.pred_id).or_default() += 1;
        *by_gt.entry(p.gt_id).or_default() += 1;
    }
    for p in tpl.iter_mut() {
        let both = joint[&(p.pred_id, p.gt_id)];
        p.tpa = both;
        p.fpa = by_pred[&p.pred_id] - both;
        p.fna = by_gt[&p.gt_id] - both;
    }
}

fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

pub fn loc_a(ledger: &MatchLedger) -> f64 {
    let tp = ledger.tpl.len();
    ratio(tp, tp + ledger.fpl + ledger.fnl)
}

pub fn cls_a(ledger: &MatchLedger) -> f64 {
    ratio(ledger.tpc, ledger.tpc + ledger.fpc + ledger.fnc)
}

pub fn assoc_a(ledger: &MatchLedger) -> f64 {
    if ledger.tpl.is_empty() {
        return 0.0;
    }
    crate::numeric::compensated_sum(ledger.tpl.iter().map(MatchedPair::association_score)) / ledger.tpl.len() as f64
}

pub fn teta(loc_a: f64, cls_a: f64, assoc_a: f64) -> f64 {
    (loc_a + cls_a + assoc_a) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub teta: f64,
    pub loca: f64,
    pub assoca: f64,
    pub clsa: f64,
    pub tpl: usize,
    pub fpl: usize,
    pub fnl: usize,
}

impl MetricReport {
    pub fn from_ledger(ledger: &MatchLedger) -> Self {
        let loca = loc_a(ledger);
        let clsa = cls_a(ledger);
        let assoca = assoc_a(ledger);
        Self {
            teta: teta(loca, clsa, assoca),
            loca,
            assoca,
            clsa,
            tpl: ledger.tpl.len(),
            fpl: ledger.fpl,
            fnl: ledger.fnl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub base: MetricReport,
    pub novel: MetricReport,
    pub all: MetricReport,
}

impl EvaluationReport {
    pub fn from_ledger<F: Fn(usize) -> bool>(ledger: &MatchLedger, is_base: F) -> Self {
        Self {
            base: MetricReport::from_ledger(&ledger.restrict(&is_base)),
            novel: MetricReport::from_ledger(&ledger.restrict(|c| !is_base(c))),
            all: MetricReport::from_ledger(ledger),
        }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>7} {:>7} {:>7} {:>7}", "split", "TETA", "LocA", "AssocA", "ClsA");
        for (name, r) in [("base", &self.base), ("novel", &self.novel), ("all", &self.all)] {
            let _ = writeln!(
                out,
                "{:<6} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                name,
                100.0 * r.teta,
                100.0 * r.loca,
                100.0 * r.assoca,
                100.0 * r.clsa
            );
        }
        out
    }
}

/// Matches, tallies and reports in one call.
pub fn evaluate<F: Fn(usize) -> bool>(
    predictions: &[EvalBox],
    ground_truth: &[EvalBox],
    iou_threshold: f64,
    is_base: F,
) -> Result<EvaluationReport> {
    let ledger = match_localization(predictions, ground_truth, iou_threshold)?;
    Ok(EvaluationReport::from_ledger(&ledger, is_base))
}
