//! Box geometry: center-format boxes, IoU and class-agnostic NMS.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Detection;
use crate::error::{Error, Result};

/// Axis-aligned box in center format `[x, y, w, h]`, pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let valid = [x, y, w, h].iter().all(|v| v.is_finite()) && w > 0.0 && h > 0.0;
        if !valid {
            return Err(Error::InvalidInput(format!(
                "box [{x}, {y}, {w}, {h}] needs finite values and positive size"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x1, y1, x2, y2)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Pairwise IoU, `|a| x |b|`.
pub fn iou_matrix(a: &[BoundingBox], b: &[BoundingBox]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| iou(&a[i], &b[j]))
}

/// Greedy class-agnostic non-maximum suppression.
///
/// Candidates are visited by descending confidence (ties by input index) and
/// a candidate is dropped when its IoU with an already kept box exceeds
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// Same as [`nms`], returning the kept input indices in output order.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .total_cmp(&dets[i].confidence)
            .then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
