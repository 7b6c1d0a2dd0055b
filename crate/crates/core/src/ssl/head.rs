use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FeatureMatrix, SslConfig};
use crate::error::{Error, Result};
use crate::numeric::rng_for;

/// Linear projection followed by row L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationHead {
    /// `D_a x D_r`.
    pub projection: DMatrix<f64>,
    pub learning_rate: f64,
}

impl AssociationHead {
    pub fn new(projection: DMatrix<f64>, learning_rate: f64) -> Result<Self> {
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("projection has non-finite entries".into()));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(Self {
            projection,
            learning_rate,
        })
    }

    /// Gaussian initialization with variance `1 / D_r`.
    pub fn random(out_dim: usize, in_dim: usize, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "head-init", 0);
        let normal = Normal::new(0.0, 1.0 / (in_dim.max(1) as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let projection = DMatrix::from_fn(out_dim, in_dim, |_, _| normal.sample(&mut rng));
        Self::new(projection, learning_rate)
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Embeds raw features given one per row (`n x D_r`).
    pub fn embed(&self, raw: &DMatrix<f64>) -> Result<FeatureMatrix> {
        if raw.ncols() != self.in_dim() && raw.nrows() > 0 {
            return Err(Error::dims("raw feature", self.in_dim(), raw.ncols()));
        }
        if raw.nrows() == 0 {
            return Ok(FeatureMatrix::normalized(DMatrix::zeros(0, self.out_dim())));
        }
        Ok(FeatureMatrix::normalized(raw * self.projection.transpose()))
    }

    pub fn embed_one(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_row_slice(1, raw.len(), raw);
        Ok(self.embed(&m)?.matrix().row(0).iter().copied().collect())
    }

    /// `projection - learning_rate * gradient`.
    pub fn sgd_step(&self, gradient: &DMatrix<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.apply_gradient(gradient)?;
        Ok(next)
    }

    pub fn apply_gradient(&mut self, gradient: &DMatrix<f64>) -> Result<()> {
        if gradient.shape() != self.projection.shape() {
            return Err(Error::dims("gradient", self.projection.len(), gradient.len()));
        }
        self.projection -= gradient * self.learning_rate;
        Ok(())
    }
}

/// On-disk head: shape header, row-major data, step counter and the loss
/// configuration it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub rows: usize,
    pub cols: usize,
    pub projection: Vec<f64>,
    pub learning_rate: f64,
    pub step: usize,
    pub config: SslConfig,
}

impl Checkpoint {
    pub fn from_head(head: &AssociationHead, step: usize, config: SslConfig) -> Self {
        let (rows, cols) = head.projection.shape();
        let projection = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| head.projection[(r, c)])
            .collect();
        Self {
            rows,
            cols,
            projection,
            learning_rate: head.learning_rate,
            step,
            config,
        }
    }

    pub fn head(&self) -> Result<AssociationHead> {
        if self.projection.len() != self.rows * self.cols {
            return Err(Error::dims("checkpoint data", self.rows * self.cols, self.projection.len()));
        }
        AssociationHead::new(
            DMatrix::from_row_slice(self.rows, self.cols, &self.projection),
            self.learning_rate,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
