//! Synthetic scenarios with ground truth, plus the training and ablation
//! harness that runs on them.
//!
//! Raw features are laid out as `[class prototype | identity | nuisance]`
//! with small isotropic noise on top. The identity block drifts slowly, the
//! nuisance block is redrawn for every detection. Text embeddings sit near
//! their class embedding and carry a tracking-state component that the
//! prompt pairs read: `+1` for clean views and `-1` for occluded ones.

pub mod ablation;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, Detection, FrameObservations, GroundTruthBox, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numeric::{dot, normalized, rng_for};
use crate::prompt::{ClassEmbeddingBank, PromptPair, PromptPairSet, DEFAULT_PROMPT_NAMES, DEFAULT_TEMPERATURE};

pub use ablation::{evaluate_head, run_ablation, AblationRow, AblationVariant};
pub use train::{train_association_head, TrainLogEntry, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Largest per-axis speed in pixels per frame.
    pub max_speed: f64,
    /// Standard deviation of the per-frame position jitter.
    pub noise: f64,
    /// Smallest and largest box side in pixels.
    pub box_size: [f64; 2],
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_speed: 0.5,
            noise: 0.05,
            box_size: [30.0, 60.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub text_dim: usize,
    pub class_dims: usize,
    pub identity_dims: usize,
    pub nuisance_dims: usize,
    /// Norm of the class prototype block.
    pub class_scale: f64,
    /// Norm of the identity block.
    pub identity_scale: f64,
    /// Per-dimension standard deviation of the nuisance block.
    pub nuisance_sigma: f64,
    /// Isotropic raw-feature noise.
    pub noise_sigma: f64,
    /// Per-frame random-walk step of the identity direction.
    pub drift_rate: f64,
    pub text_noise: f64,
    pub image_noise: f64,
    /// Weight of the tracking-state axis in text embeddings.
    pub state_strength: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            text_dim: 16,
            class_dims: 8,
            identity_dims: 8,
            nuisance_dims: 16,
            class_scale: 1.0,
            identity_scale: 1.0,
            nuisance_sigma: 0.35,
            noise_sigma: 0.02,
            drift_rate: 0.02,
            text_noise: 0.05,
            image_noise: 0.1,
            state_strength: 0.3,
        }
    }
}

impl EmbeddingConfig {
    pub fn raw_dim(&self) -> usize {
        self.class_dims + self.identity_dims + self.nuisance_dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    /// Chance that an object is occluded in a given frame.
    pub probability: f64,
    /// Extra raw-feature noise on occluded views.
    pub noise: f64,
    /// Fraction of the nearest other object's appearance blended into an
    /// occluded view.
    pub overlap_mix: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            probability: 0.0,
            noise: 0.3,
            overlap_mix: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub miss_rate: f64,
    /// Chance of one spurious detection per frame.
    pub false_positive_rate: f64,
    pub confidence_noise: f64,
    /// Standard deviation of detection box jitter in pixels.
    pub box_noise: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            confidence_noise: 0.02,
            box_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub num_frames: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    /// Classes `0..num_base_classes` are base, the rest novel.
    pub num_base_classes: usize,
    pub image_extent: [f64; 2],
    pub motion: MotionConfig,
    pub embedding: EmbeddingConfig,
    pub occlusion: OcclusionConfig,
    pub detector: DetectorConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "easy".into(),
            seed: 7,
            num_frames: 96,
            num_objects: 6,
            num_classes: 3,
            num_base_classes: 2,
            image_extent: [640.0, 480.0],
            motion: MotionConfig::default(),
            embedding: EmbeddingConfig::default(),
            occlusion: OcclusionConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} is not a rate in [0, 1]")))
    }
}

fn check_sigma(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} must be a finite value >= 0")))
    }
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("occlusion.probability", self.occlusion.probability)?;
        check_rate("occlusion.overlap_mix", self.occlusion.overlap_mix)?;
        check_rate("detector.miss_rate", self.detector.miss_rate)?;
        check_rate("detector.false_positive_rate", self.detector.false_positive_rate)?;
        for (name, v) in [
            ("motion.max_speed", self.motion.max_speed),
            ("motion.noise", self.motion.noise),
            ("embedding.class_scale", self.embedding.class_scale),
            ("embedding.identity_scale", self.embedding.identity_scale),
            ("embedding.nuisance_sigma", self.embedding.nuisance_sigma),
            ("embedding.noise_sigma", self.embedding.noise_sigma),
            ("embedding.drift_rate", self.embedding.drift_rate),
            ("embedding.text_noise", self.embedding.text_noise),
            ("embedding.image_noise", self.embedding.image_noise),
            ("embedding.state_strength", self.embedding.state_strength),
            ("occlusion.noise", self.occlusion.noise),
            ("detector.confidence_noise", self.detector.confidence_noise),
            ("detector.box_noise", self.detector.box_noise),
        ] {
            check_sigma(name, v)?;
        }
        if self.num_frames == 0 || self.num_objects == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("frames, objects and classes must be > 0".into()));
        }
        if self.num_base_classes > self.num_classes {
            return Err(Error::InvalidConfig("num_base_classes exceeds num_classes".into()));
        }
        let e = &self.embedding;
        if e.text_dim < 2 || e.identity_dims == 0 || e.class_dims == 0 {
            return Err(Error::InvalidConfig("embedding dimensions too small".into()));
        }
        let [lo, hi] = self.motion.box_size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidConfig("motion.box_size must satisfy 0 < min <= max".into()));
        }
        let [w, h] = self.image_extent;
        if hi >= w || hi >= h {
            return Err(Error::InvalidConfig(format!("boxes up to {hi} px do not fit a {w}x{h} image")));
        }
        if self.num_objects as f64 * hi * hi > w * h {
            return Err(Error::InvalidConfig(format!(
                "{} objects of side {hi} cannot be packed into {w}x{h}",
                self.num_objects
            )));
        }
        Ok(())
    }
}

/// Hidden per-detection facts kept beside a generated scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionTruth {
    /// Ground-truth identity, `None` for false positives.
    pub track_id: Option<u64>,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub sequence: VideoSequence,
    pub class_bank: ClassEmbeddingBank,
    pub prompts: PromptPairSet,
    /// Aligned with `sequence.frames[t].detections`.
    pub truth: Vec<Vec<DetectionTruth>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        if let Some(v) = normalized(&gaussian(rng, n, 1.0)) {
            return v;
        }
    }
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Removes the component along the unit vector `axis`.
fn orthogonalize(v: &[f64], axis: &[f64]) -> Vec<f64> {
    let d = dot(v, axis);
    v.iter().zip(axis).map(|(x, a)| x - d * a).collect()
}

fn unit_or(v: &[f64], fallback: &[f64]) -> Vec<f64> {
    normalized(v).unwrap_or_else(|| fallback.to_vec())
}

struct ObjectState {
    class: usize,
    center: [f64; 2],
    velocity: [f64; 2],
    size: [f64; 2],
    identity: Vec<f64>,
}

struct Vocabulary {
    state_axis: Vec<f64>,
    class_text: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
}

impl Vocabulary {
    fn text_embedding(&self, rng: &mut ChaCha8Rng, class: usize, state: f64, e: &EmbeddingConfig) -> Vec<f64> {
        let noise = orthogonalize(&gaussian(rng, e.text_dim, e.text_noise), &self.state_axis);
        let v = add(
            &add(&self.class_text[class], &noise),
            &scaled(&self.state_axis, e.state_strength * state),
        );
        unit_or(&v, &self.class_text[class])
    }

    fn image_embedding(&self, rng: &mut ChaCha8Rng, class: usize, e: &EmbeddingConfig) -> Vec<f64> {
        let v = add(&self.class_text[class], &gaussian(rng, e.text_dim, e.image_noise));
        unit_or(&v, &self.class_text[class])
    }

    fn raw_feature(&self, rng: &mut ChaCha8Rng, class: usize, identity: &[f64], e: &EmbeddingConfig) -> Vec<f64> {
        let mut raw = self.prototypes[class].clone();
        raw.extend_from_slice(identity);
        raw.extend(gaussian(rng, e.nuisance_dims, e.nuisance_sigma));
        add(&raw, &gaussian(rng, raw.len(), e.noise_sigma))
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

fn clamp_confidence(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Builds a scenario deterministically from its configuration.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let e = config.embedding;
    let mut rng = rng_for(config.seed, "scenario-layout", 0);

    let state_axis = random_unit(&mut rng, e.text_dim);
    let class_text: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| unit_or(&orthogonalize(&random_unit(&mut rng, e.text_dim), &state_axis), &state_axis))
        .collect();
    let background = unit_or(&orthogonalize(&random_unit(&mut rng, e.text_dim), &state_axis), &state_axis);
    let prototypes: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| scaled(&random_unit(&mut rng, e.class_dims), e.class_scale))
        .collect();
    let vocab = Vocabulary {
        state_axis,
        class_text,
        prototypes,
    };

    let pairs = DEFAULT_PROMPT_NAMES
        .iter()
        .map(|(pos, neg)| {
            let jitter = |rng: &mut ChaCha8Rng, sign: f64| {
                let g = orthogonalize(&gaussian(rng, e.text_dim, 0.15), &vocab.state_axis);
                unit_or(&add(&scaled(&vocab.state_axis, sign), &g), &vocab.state_axis)
            };
            PromptPair {
                pos: jitter(&mut rng, 1.0),
                neg: jitter(&mut rng, -1.0),
                name_pos: pos.to_string(),
                name_neg: neg.to_string(),
            }
        })
        .collect();
    let prompts = PromptPairSet::new(pairs)?;
    let class_bank = ClassEmbeddingBank {
        classes: vocab.class_text.clone(),
        background,
        temperature: DEFAULT_TEMPERATURE,
        base_mask: (0..config.num_classes).map(|c| c < config.num_base_classes).collect(),
    };
    class_bank.validate()?;

    let [width, height] = config.image_extent;
    let [smin, smax] = config.motion.box_size;
    let mut objects: Vec<ObjectState> = (0..config.num_objects)
        .map(|o| {
            let size = [rng.random_range(smin..=smax), rng.random_range(smin..=smax)];
            ObjectState {
                class: o % config.num_classes,
                center: [
                    rng.random_range(size[0] / 2.0..=width - size[0] / 2.0),
                    rng.random_range(size[1] / 2.0..=height - size[1] / 2.0),
                ],
                velocity: [
                    rng.random_range(-1.0..=1.0) * config.motion.max_speed,
                    rng.random_range(-1.0..=1.0) * config.motion.max_speed,
                ],
                size,
                identity: scaled(&random_unit(&mut rng, e.identity_dims), e.identity_scale),
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(config.num_frames);
    let mut ground_truth = Vec::with_capacity(config.num_frames);
    let mut truth = Vec::with_capacity(config.num_frames);
    for t in 0..config.num_frames {
        let mut rng = rng_for(config.seed, "scenario-frame", t as u64);
        if t > 0 {
            for obj in &mut objects {
                for axis in 0..2 {
                    let extent = config.image_extent[axis];
                    let half = obj.size[axis] / 2.0;
                    let jitter: f64 = StandardNormal.sample(&mut rng);
                    obj.center[axis] += obj.velocity[axis] + config.motion.noise * jitter;
                    reflect(&mut obj.center[axis], &mut obj.velocity[axis], half, extent - half);
                }
                let step = add(&obj.identity, &gaussian(&mut rng, e.identity_dims, e.drift_rate * e.identity_scale));
                obj.identity = scaled(&unit_or(&step, &obj.identity), e.identity_scale);
            }
        }

        let boxes: Vec<BoundingBox> = objects
            .iter()
            .map(|o| BoundingBox::new(o.center[0], o.center[1], o.size[0], o.size[1]))
            .collect::<Result<_>>()?;
        ground_truth.push(
            objects
                .iter()
                .zip(&boxes)
                .enumerate()
                .map(|(id, (o, b))| GroundTruthBox {
                    bbox: *b,
                    track_id: id as u64,
                    class_id: o.class,
                })
                .collect::<Vec<_>>(),
        );

        let clean: Vec<Vec<f64>> = objects
            .iter()
            .map(|o| vocab.raw_feature(&mut rng, o.class, &o.identity, &e))
            .collect();
        let mut dets: Vec<(Detection, DetectionTruth)> = Vec::new();
        for (o, obj) in objects.iter().enumerate() {
            let occluded = rng.random_bool(config.occlusion.probability);
            if rng.random_bool(config.detector.miss_rate) {
                continue;
            }
            let mut raw = clean[o].clone();
            if occluded {
                if let Some(other) = nearest_other(&objects, o) {
                    let mix = config.occlusion.overlap_mix;
                    raw = add(&scaled(&raw, 1.0 - mix), &scaled(&clean[other], mix));
                }
                raw = add(&raw, &gaussian(&mut rng, raw.len(), config.occlusion.noise));
            }
            let bbox = jitter_box(&mut rng, &boxes[o], config.detector.box_noise)?;
            let base_conf = if occluded {
                rng.random_range(0.3..0.6)
            } else {
                rng.random_range(0.7..0.95)
            };
            let conf_noise: f64 = StandardNormal.sample(&mut rng);
            let state = if occluded { -1.0 } else { 1.0 };
            let det = Detection::new(
                bbox,
                clamp_confidence(base_conf + config.detector.confidence_noise * conf_noise),
                vocab.text_embedding(&mut rng, obj.class, state, &e),
                vocab.image_embedding(&mut rng, obj.class, &e),
                raw,
                Some(obj.class),
            )?;
            dets.push((
                det,
                DetectionTruth {
                    track_id: Some(o as u64),
                    occluded,
                },
            ));
        }
        if rng.random_bool(config.detector.false_positive_rate) {
            let class = rng.random_range(0..config.num_classes);
            let size = [rng.random_range(smin..=smax), rng.random_range(smin..=smax)];
            let bbox = BoundingBox::new(
                rng.random_range(size[0] / 2.0..=width - size[0] / 2.0),
                rng.random_range(size[1] / 2.0..=height - size[1] / 2.0),
                size[0],
                size[1],
            )?;
            let identity = scaled(&random_unit(&mut rng, e.identity_dims), e.identity_scale);
            let state = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let det = Detection::new(
                bbox,
                clamp_confidence(rng.random_range(0.05..0.45)),
                vocab.text_embedding(&mut rng, class, state, &e),
                vocab.image_embedding(&mut rng, class, &e),
                vocab.raw_feature(&mut rng, class, &identity, &e),
                None,
            )?;
            dets.push((
                det,
                DetectionTruth {
                    track_id: None,
                    occluded: false,
                },
            ));
        }
        dets.shuffle(&mut rng);
        let (detections, facts): (Vec<Detection>, Vec<DetectionTruth>) = dets.into_iter().unzip();
        frames.push(FrameObservations {
            frame_index: t,
            detections,
        });
        truth.push(facts);
    }

    Ok(Scenario {
        config: config.clone(),
        sequence: VideoSequence {
            frames,
            ground_truth: Some(ground_truth),
        },
        class_bank,
        prompts,
        truth,
    })
}

fn nearest_other(objects: &[ObjectState], o: usize) -> Option<usize> {
    let c = objects[o].center;
    objects
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != o)
        .map(|(i, other)| (i, (other.center[0] - c[0]).powi(2) + (other.center[1] - c[1]).powi(2)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BoundingBox, sigma: f64) -> Result<BoundingBox> {
    if sigma == 0.0 {
        return Ok(*b);
    }
    let n = gaussian(rng, 4, sigma);
    BoundingBox::new(b.x + n[0], b.y + n[1], (b.w + n[2]).max(1.0), (b.h + n[3]).max(1.0))
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.jsonl";
pub const CLASS_BANK_FILE: &str = "class_bank.json";
pub const PROMPT_BANK_FILE: &str = "prompt_bank.json";
pub const SCENARIO_CONFIG_FILE: &str = "scenario_config.json";

/// Scenario files as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub dir: PathBuf,
    pub config: ScenarioConfig,
    pub sequence: VideoSequence,
    pub class_bank: ClassEmbeddingBank,
    pub prompts: PromptPairSet,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Scenario {
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        data::write_detections(&dir.join(DETECTIONS_FILE), &self.sequence)?;
        data::write_ground_truth(&dir.join(GROUND_TRUTH_FILE), &self.sequence)?;
        write_json(&dir.join(CLASS_BANK_FILE), &self.class_bank)?;
        write_json(&dir.join(PROMPT_BANK_FILE), &self.prompts)?;
        write_json(&dir.join(SCENARIO_CONFIG_FILE), &self.config)
    }

    pub fn bundle(&self) -> Bundle {
        Bundle {
            dir: PathBuf::new(),
            config: self.config.clone(),
            sequence: self.sequence.clone(),
            class_bank: self.class_bank.clone(),
            prompts: self.prompts.clone(),
        }
    }
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("bundle directory {} does not exist", dir.display())));
        }
        let config = ScenarioConfig::load(&dir.join(SCENARIO_CONFIG_FILE))?;
        let sequence = data::load_sequence(&dir.join(DETECTIONS_FILE), Some(&dir.join(GROUND_TRUTH_FILE)))?;
        let class_bank = ClassEmbeddingBank::load(&dir.join(CLASS_BANK_FILE))?;
        let prompts = PromptPairSet::load(&dir.join(PROMPT_BANK_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            sequence,
            class_bank,
            prompts,
        })
    }

    /// Ground truth keyed by frame index.
    pub fn ground_truth_map(&self) -> BTreeMap<usize, Vec<GroundTruthBox>> {
        let mut out = BTreeMap::new();
        if let Some(gt) = &self.sequence.ground_truth {
            for (frame, boxes) in self.sequence.frames.iter().zip(gt) {
                if !boxes.is_empty() {
                    out.insert(frame.frame_index, boxes.clone());
                }
            }
        }
        out
    }
}
