//! Tracking-state-aware prompt attention and the prompt-weighted detection
//! losses.
//!
//! Every embedding here is a precomputed unit vector; no text or image
//! encoder runs in this crate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Detection, UNIT_TOLERANCE};
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, cosine, is_unit, l2_norm, CompensatedSum};

pub const DEFAULT_TEMPERATURE: f64 = 0.007;

/// The four state pairs used by default, positive state first.
pub const DEFAULT_PROMPT_NAMES: [(&str, &str); 4] = [
    ("complete", "incomplete"),
    ("unoccluded", "occluded"),
    ("unobscured", "obscured"),
    ("recognizable", "unrecognizable"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub name_pos: String,
    pub name_neg: String,
}

/// `M >= 1` opposite-state prompt embeddings. The positive side always names
/// a state that is favorable for learning (e.g. "unoccluded").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPairSet {
    pub pairs: Vec<PromptPair>,
}

impl PromptPairSet {
    pub fn new(pairs: Vec<PromptPair>) -> Result<Self> {
        let set = Self { pairs };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyPrompts);
        }
        let dim = self.pairs[0].pos.len();
        for p in &self.pairs {
            for v in [&p.pos, &p.neg] {
                if v.len() != dim {
                    return Err(Error::dims("prompt embedding", dim, v.len()));
                }
                if !is_unit(v, UNIT_TOLERANCE) {
                    return Err(Error::InvalidInput(format!(
                        "prompt '{}'/'{}' is not unit length",
                        p.name_pos, p.name_neg
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.pos.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        set.validate()?;
        Ok(set)
    }
}

/// Class text embeddings plus the learned background embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingBank {
    pub classes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    #[serde(rename = "lambda")]
    pub temperature: f64,
    /// `true` for base (seen) classes, `false` for novel ones.
    pub base_mask: Vec<bool>,
}

impl ClassEmbeddingBank {
    pub fn validate(&self) -> Result<()> {
        let dim = self.background.len();
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("class bank lambda must be > 0".into()));
        }
        if self.base_mask.len() != self.classes.len() {
            return Err(Error::dims("base_mask", self.classes.len(), self.base_mask.len()));
        }
        if !is_unit(&self.background, UNIT_TOLERANCE) {
            return Err(Error::InvalidInput("background embedding is not unit length".into()));
        }
        for c in &self.classes {
            if c.len() != dim {
                return Err(Error::dims("class embedding", dim, c.len()));
            }
            if !is_unit(c, UNIT_TOLERANCE) {
                return Err(Error::InvalidInput("class embedding is not unit length".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.background.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_base(&self, class: usize) -> bool {
        self.base_mask.get(class).copied().unwrap_or(false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        bank.validate()?;
        Ok(bank)
    }
}

/// Three-band mapping of attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiecewiseSchedule {
    pub d_low: f64,
    pub d_high: f64,
}

impl Default for PiecewiseSchedule {
    fn default() -> Self {
        Self {
            d_low: 0.3,
            d_high: 0.6,
        }
    }
}

impl PiecewiseSchedule {
    pub fn new(d_low: f64, d_high: f64) -> Result<Self> {
        let s = Self { d_low, d_high };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.d_low && self.d_low < self.d_high && self.d_high <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "piecewise schedule needs 0 <= d_low < d_high <= 1, got ({}, {})",
                self.d_low, self.d_high
            )))
        }
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dims(context, expected, actual))
    }
}

/// Cosine affinities `[bg, class_1, ..]`; the background sits at index 0.
pub fn class_affinity(text_embedding: &[f64], bank: &ClassEmbeddingBank) -> Result<Vec<f64>> {
    check_dim("text embedding", bank.dim(), text_embedding.len())?;
    let mut z = Vec::with_capacity(bank.num_classes() + 1);
    z.push(cosine(text_embedding, &bank.background));
    z.extend(bank.classes.iter().map(|c| cosine(text_embedding, c)));
    Ok(z)
}

/// Numerically stable `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], temperature: f64, index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    (logits[index] - max) / temperature - lse
}

/// Prompt-guided attention weight: the mean, over prompt pairs, of the
/// positive-state probability of a two-way softmax on the cosines.
pub fn attention_weight(text_embedding: &[f64], prompts: &PromptPairSet, temperature: f64) -> Result<f64> {
    if prompts.pairs.is_empty() {
        return Err(Error::EmptyPrompts);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig("temperature must be > 0".into()));
    }
    check_dim("text embedding", prompts.dim(), text_embedding.len())?;
    let per_pair = prompts.pairs.iter().map(|p| {
        let gap = (cosine(text_embedding, &p.pos) - cosine(text_embedding, &p.neg)) / temperature;
        positive_probability(gap)
    });
    Ok(compensated_sum(per_pair) / prompts.pairs.len() as f64)
}

/// `softmax([a, b])_0` written in terms of the gap `a - b`.
fn positive_probability(gap: f64) -> f64 {
    if gap >= 0.0 {
        1.0 / (1.0 + (-gap).exp())
    } else {
        let e = gap.exp();
        e / (1.0 + e)
    }
}

pub fn piecewise_reweight(w_raw: f64, schedule: &PiecewiseSchedule) -> f64 {
    if w_raw < schedule.d_low {
        0.0
    } else if w_raw > schedule.d_high {
        1.0
    } else {
        w_raw
    }
}

/// Prompt-weighted cross-entropy over candidates. A candidate without a class
/// label is a background candidate (target index 0); class `c` maps to index
/// `c + 1`.
pub fn weighted_text_loss(
    candidates: &[Detection],
    bank: &ClassEmbeddingBank,
    weights: &[f64],
) -> Result<f64> {
    check_dim("weights", candidates.len(), weights.len())?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut acc = CompensatedSum::new();
    for (det, &w) in candidates.iter().zip(weights) {
        let target = match det.class_label {
            None => 0,
            Some(c) if c < bank.num_classes() => c + 1,
            Some(c) => {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    size: bank.num_classes(),
                })
            }
        };
        let z = class_affinity(&det.text_embedding, bank)?;
        if w != 0.0 {
            acc.add(-w * log_softmax_at(&z, bank.temperature, target));
        }
    }
    Ok(acc.value() / candidates.len() as f64)
}

/// Mean L2 distance between predicted image embeddings and the reference
/// image embeddings, one row per candidate.
pub fn image_align_loss(candidates: &[Detection], reference: &[Vec<f64>]) -> Result<f64> {
    check_dim("reference rows", candidates.len(), reference.len())?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut acc = CompensatedSum::new();
    for (det, target) in candidates.iter().zip(reference) {
        check_dim("reference embedding", det.image_embedding.len(), target.len())?;
        let diff: Vec<f64> = det
            .image_embedding
            .iter()
            .zip(target)
            .map(|(a, b)| a - b)
            .collect();
        acc.add(l2_norm(&diff));
    }
    Ok(acc.value() / candidates.len() as f64)
}

/// Geometric fusion exponents for the image branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionBetas {
    pub base: f64,
    pub novel: f64,
}

impl Default for FusionBetas {
    fn default() -> Self {
        Self {
            base: 1.0 / 3.0,
            novel: 2.0 / 3.0,
        }
    }
}

/// `p_c ∝ text_c^(1-β) · img_c^β` with a per-class β, renormalized.
pub fn fuse_probabilities(
    p_text: &[f64],
    p_img: &[f64],
    is_base: &[bool],
    betas: FusionBetas,
) -> Result<Vec<f64>> {
    check_dim("image probabilities", p_text.len(), p_img.len())?;
    check_dim("base mask", p_text.len(), is_base.len())?;
    for p in [p_text, p_img] {
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 || p.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("probability vector must sum to 1".into()));
        }
    }
    let raw: Vec<f64> = p_text
        .iter()
        .zip(p_img)
        .zip(is_base)
        .map(|((&t, &i), &base)| {
            let beta = if base { betas.base } else { betas.novel };
            t.powf(1.0 - beta) * i.powf(beta)
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroMass);
    }
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Test-time classification of one detection: class-only softmax of both
/// branches, fused, argmax (ties to the lowest class id).
pub fn classify(det: &Detection, bank: &ClassEmbeddingBank, betas: FusionBetas) -> Result<(usize, Vec<f64>)> {
    let text = class_affinity(&det.text_embedding, bank)?;
    let img = class_affinity(&det.image_embedding, bank)?;
    let p_text = softmax_with_temperature(&text[1..], bank.temperature);
    let p_img = softmax_with_temperature(&img[1..], bank.temperature);
    let fused = fuse_probabilities(&p_text, &p_img, &bank.base_mask, betas)?;
    let best = argmax(&fused);
    Ok((best, fused))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Raw and piecewise-reweighted attention for every detection.
pub fn candidate_weights(
    dets: &[Detection],
    prompts: &PromptPairSet,
    temperature: f64,
    schedule: Option<&PiecewiseSchedule>,
) -> Result<Vec<f64>> {
    dets.iter()
        .map(|d| {
            let w = attention_weight(&d.text_embedding, prompts, temperature)?;
            Ok(schedule.map_or(w, |s| piecewise_reweight(w, s)))
        })
        .collect()
}
