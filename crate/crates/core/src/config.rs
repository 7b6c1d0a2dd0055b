//! Resolved run configuration shared by the command line tool and the
//! ablation harness. JSON files may set any subset of keys; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_IOU_THRESHOLD;
use crate::numeric::split_seed;
use crate::prompt::PiecewiseSchedule;
use crate::sampler::SamplingPlan;
use crate::ssl::SslConfig;
use crate::synth::TrainOptions;
use crate::tracker::TrackerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub iou_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. The sampler and trainer seeds are derived from it by
    /// [`RunConfig::resolved`].
    pub seed: u64,
    pub sampling: SamplingPlan,
    pub ssl: SslConfig,
    pub training: TrainOptions,
    pub tracker: TrackerConfig,
    pub schedule: PiecewiseSchedule,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.ssl.validate()?;
        self.training.validate()?;
        self.tracker.validate()?;
        self.schedule.validate()?;
        if !(self.metrics.iou_threshold > 0.0 && self.metrics.iou_threshold <= 1.0) {
            return Err(Error::InvalidConfig("metrics.iou_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Copy with every per-module seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut out = *self;
        out.sampling.seed = split_seed(self.seed, "sampling", 0);
        out.training.seed = split_seed(self.seed, "training", 0);
        out
    }
}
