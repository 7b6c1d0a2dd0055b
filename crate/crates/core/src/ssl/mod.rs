//! Self-supervised consistency objective over per-frame feature matrices.
//!
//! The forward formulas live here; [`batch`] composes them into a training
//! batch loss with analytic gradients and [`head`] holds the trainable
//! linear association head.

pub mod batch;
pub mod head;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

pub use batch::{batch_loss, kink_distance, loss_gradient, ClusterSample, FrameSample, LossBreakdown, TrainingBatch};
pub use head::{AssociationHead, Checkpoint};

/// Probability clamp applied before the logs of the binary cross-entropy.
pub const BCE_EPSILON: f64 = 1e-7;

/// Which frame pairs feed the inter-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterScope {
    /// Pairs whose frames sit in the same contiguous run of the sampled
    /// sequence.
    Short,
    /// Every frame pair.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Row-softmax temperature.
    pub tau: f64,
    /// Scale `tau` by `sqrt(D_a) / 8` so logits keep their spread across
    /// embedding widths.
    pub adaptive_tau: bool,
    pub margin: f64,
    pub alpha: f64,
    pub iou_thres: f64,
    /// Weight on the intra term; 0 disables it.
    pub intra_weight: f64,
    pub inter_scope: InterScope,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 10.0,
            adaptive_tau: true,
            margin: 0.5,
            alpha: 0.9,
            iou_thres: 0.9,
            intra_weight: 1.0,
            inter_scope: InterScope::Short,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidConfig("tau must be > 0".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidConfig("margin must be >= 0".into()));
        }
        if !(self.alpha >= 0.0) || !(self.intra_weight >= 0.0) {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if !(self.iou_thres > 0.0 && self.iou_thres <= 1.0) {
            return Err(Error::InvalidConfig("iou_thres must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn effective_tau(&self, dim: usize) -> f64 {
        if self.adaptive_tau {
            self.tau * (dim as f64).sqrt() / 8.0
        } else {
            self.tau
        }
    }
}

/// Row-per-object association embeddings of one frame, every row unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: DMatrix<f64>) -> Result<Self> {
        for r in 0..rows.nrows() {
            let n = rows.row(r).norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("feature row {r} has norm {n}")));
            }
        }
        Ok(Self { rows })
    }

    /// L2-normalizes every row. Zero rows stay zero.
    pub fn normalized(mut rows: DMatrix<f64>) -> Self {
        for mut row in rows.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self { rows }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("feature row", cols, bad.len()));
        }
        Self::new(DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c]))
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            rows: self.rows.select_rows(idx),
        }
    }
}

/// `F_i · F_jᵀ`.
pub fn similarity_matrix(fi: &FeatureMatrix, fj: &FeatureMatrix) -> Result<DMatrix<f64>> {
    if fi.dim() != fj.dim() && !fi.is_empty() && !fj.is_empty() {
        return Err(Error::dims("feature dimension", fi.dim(), fj.dim()));
    }
    Ok(fi.matrix() * fj.matrix().transpose())
}

/// Row softmax of `tau · M`.
pub fn row_softmax(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (tau * (*v - max)).exp();
            total += *v;
        }
        row /= total;
    }
    out
}

/// Gradient of a scalar through `S = row_softmax(M, tau)`, given `dL/dS`.
pub(crate) fn row_softmax_backward(s: &DMatrix<f64>, ds: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut dm = DMatrix::zeros(s.nrows(), s.ncols());
    for r in 0..s.nrows() {
        let inner: f64 = (0..s.ncols()).map(|c| ds[(r, c)] * s[(r, c)]).sum();
        for c in 0..s.ncols() {
            dm[(r, c)] = tau * s[(r, c)] * (ds[(r, c)] - inner);
        }
    }
    dm
}

/// `S_ij · S_ji`: the round trip `t_i -> t_j -> t_i`.
pub fn pair_consistency(fi: &FeatureMatrix, fj: &FeatureMatrix, tau: f64) -> Result<DMatrix<f64>> {
    if fi.is_empty() || fj.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let m = similarity_matrix(fi, fj)?;
    Ok(row_softmax(&m, tau) * row_softmax(&m.transpose(), tau))
}

/// Third-order similarity `M_ij · M_jk`.
pub fn triplet_similarity(mij: &DMatrix<f64>, mjk: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if mij.ncols() != mjk.nrows() {
        return Err(Error::dims("triplet inner dimension", mij.ncols(), mjk.nrows()));
    }
    Ok(mij * mjk)
}

/// `S_ik · S_ki` with `S_ik` built from the third-order similarity through
/// the middle frame.
pub fn trip_consistency(
    fi: &FeatureMatrix,
    fj: &FeatureMatrix,
    fk: &FeatureMatrix,
    tau: f64,
) -> Result<DMatrix<f64>> {
    if fi.is_empty() || fj.is_empty() || fk.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mik = triplet_similarity(&similarity_matrix(fi, fj)?, &similarity_matrix(fj, fk)?)?;
    Ok(row_softmax(&mik, tau) * row_softmax(&mik.transpose(), tau))
}

/// Largest off-diagonal entry of row `r`, lowest column on ties.
pub(crate) fn max_off_diagonal(e: &DMatrix<f64>, r: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for c in 0..e.ncols() {
        if c == r {
            continue;
        }
        let v = e[(r, c)];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best
}

/// `Σ_r relu(max_{c≠r} E(r,c) − E(r,r) + m)` over a square matrix.
pub fn margin_loss(e: &DMatrix<f64>, margin: f64) -> f64 {
    let mut acc = CompensatedSum::new();
    for r in 0..e.nrows() {
        if let Some((_, off)) = max_off_diagonal(e, r) {
            acc.add((off - e[(r, r)] + margin).max(0.0));
        }
    }
    acc.value()
}

/// Subgradient of [`margin_loss`]: active rows route +1 to their arg-max
/// off-diagonal and −1 to the diagonal; rows at the kink are inactive.
pub(crate) fn margin_loss_backward(e: &DMatrix<f64>, margin: f64, scale: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(e.nrows(), e.ncols());
    for r in 0..e.nrows() {
        if let Some((c, off)) = max_off_diagonal(e, r) {
            if off - e[(r, r)] + margin > 0.0 {
                g[(r, c)] += scale;
                g[(r, r)] -= scale;
            }
        }
    }
    g
}

/// Pair term plus triplet term of the intra-consistency loss for one
/// ordered frame triple.
pub fn intra_loss(
    fi: &FeatureMatrix,
    fj: &FeatureMatrix,
    fk: &FeatureMatrix,
    config: &SslConfig,
) -> Result<f64> {
    let tau = config.effective_tau(fi.dim());
    let pair = pair_consistency(fi, fj, tau)?;
    let trip = trip_consistency(fi, fj, fk, tau)?;
    Ok(margin_loss(&pair, config.margin) + margin_loss(&trip, config.margin))
}

/// `A(r,c) = 1` iff `iou(r,c) > thres` (strict).
pub fn assignment_matrix(iou: &DMatrix<f64>, thres: f64) -> DMatrix<f64> {
    iou.map(|v| if v > thres { 1.0 } else { 0.0 })
}

/// Mean binary cross-entropy between a similarity matrix and 0/1 targets.
pub fn inter_loss(s: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != a.shape() {
        return Err(Error::dims("assignment shape", s.len(), a.len()));
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    let mut acc = CompensatedSum::new();
    for (sv, av) in s.iter().zip(a.iter()) {
        let p = sv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        acc.add(-(av * p.ln() + (1.0 - av) * (1.0 - p).ln()));
    }
    Ok(acc.value() / s.len() as f64)
}

pub(crate) fn inter_loss_backward(s: &DMatrix<f64>, a: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let n = s.len() as f64;
    DMatrix::from_fn(s.nrows(), s.ncols(), |r, c| {
        let p = s[(r, c)];
        if p <= BCE_EPSILON || p >= 1.0 - BCE_EPSILON {
            return 0.0;
        }
        let y = a[(r, c)];
        -scale * (y / p - (1.0 - y) / (1.0 - p)) / n
    })
}

pub fn total_loss(intra: f64, inter: f64, alpha: f64) -> f64 {
    intra + alpha * inter
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        FeatureMatrix::from_rows(&v).unwrap()
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn fixed_tau(tau: f64) -> SslConfig {
        SslConfig {
            tau,
            adaptive_tau: false,
            ..SslConfig::default()
        }
    }

    #[test]
    fn similarity_examples() {
        let a = fm(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(similarity_matrix(&a, &a).unwrap(), DMatrix::identity(2, 2));
        let swapped = fm(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(
            similarity_matrix(&a, &swapped).unwrap(),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
        );
        let s3 = 3f64.sqrt() / 2.0;
        let b = fm(&[&[1.0, 0.0], &[0.5, s3]]);
        let m = similarity_matrix(&b, &b).unwrap();
        assert!((m[(0, 1)] - 0.5).abs() < 1e-12 && (m[(1, 0)] - 0.5).abs() < 1e-12);
        assert!(similarity_matrix(&a, &fm(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn row_softmax_examples() {
        let s = row_softmax(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]), 1.0);
        let hi = 2f64.exp() / (2f64.exp() + 1.0);
        assert!(close(&s, &DMatrix::from_row_slice(2, 2, &[hi, 1.0 - hi, 1.0 - hi, hi]), 1e-12));
        assert!((hi - 0.8808).abs() < 1e-4);
        let u = row_softmax(&DMatrix::from_element(1, 4, 0.3), 5.0);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let sat = row_softmax(&DMatrix::from_row_slice(1, 3, &[0.1, 0.9, 0.2]), 100.0);
        assert!(sat[(0, 1)] > 1.0 - 1e-8);
        assert_eq!(row_softmax(&DMatrix::zeros(0, 0), 1.0).shape(), (0, 0));
    }

    #[test]
    fn pair_consistency_examples() {
        let a = fm(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let e = pair_consistency(&a, &a, 100.0).unwrap();
        assert!(close(&e, &DMatrix::identity(3, 3), 1e-12));
        let p = fm(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let e = pair_consistency(&a, &p, 100.0).unwrap();
        assert!(close(&e, &DMatrix::identity(3, 3), 1e-12));
        let same = fm(&[&[0.6, 0.8, 0.0], &[0.6, 0.8, 0.0]]);
        let e = pair_consistency(&a, &same, 3.0).unwrap();
        for r in 1..3 {
            for c in 0..3 {
                assert!((e[(r, c)] - e[(0, c)]).abs() < 1e-12);
            }
        }
        let empty = FeatureMatrix::normalized(DMatrix::zeros(0, 3));
        assert_eq!(pair_consistency(&a, &empty, 1.0).unwrap().shape(), (0, 0));
    }

    #[test]
    fn triplet_similarity_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert_eq!(triplet_similarity(&i, &i).unwrap(), i);
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(triplet_similarity(&p, &p.transpose()).unwrap(), i);
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(triplet_similarity(&m, &i).unwrap(), m);
        assert!(triplet_similarity(&m, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn trip_consistency_examples() {
        let a = fm(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!(close(&trip_consistency(&a, &a, &a, 100.0).unwrap(), &DMatrix::identity(3, 3), 1e-12));
        let p = fm(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let q = fm(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert!(close(&trip_consistency(&a, &p, &q, 100.0).unwrap(), &DMatrix::identity(3, 3), 1e-12));
        let single = fm(&[&[1.0, 0.0, 0.0]]);
        let mik = triplet_similarity(&similarity_matrix(&a, &single).unwrap(), &similarity_matrix(&single, &a).unwrap()).unwrap();
        assert_eq!(mik.rank(1e-12), 1);
        let equidistant = fm(&[&[0.6, 0.8, 0.0], &[0.6, 0.0, 0.8], &[0.6, -0.8, 0.0]]);
        let e = trip_consistency(&equidistant, &single, &a, 2.0).unwrap();
        assert_eq!(e.shape(), (3, 3));
        for r in 1..3 {
            for c in 0..3 {
                assert!((e[(r, c)] - e[(0, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn margin_loss_examples() {
        assert_eq!(margin_loss(&DMatrix::identity(3, 3), 0.5), 0.0);
        assert!((margin_loss(&DMatrix::from_element(2, 2, 0.5), 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(margin_loss(&DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]), 0.5), 0.0);
        assert_eq!(margin_loss(&DMatrix::from_element(1, 1, 0.2), 0.5), 0.0);
    }

    #[test]
    fn intra_loss_examples() {
        let a = fm(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(intra_loss(&a, &a, &a, &fixed_tau(100.0)).unwrap(), 0.0);
        let x = fm(&[&[0.6, 0.8, 0.0], &[0.8, 0.6, 0.0]]);
        let y = fm(&[&[0.0, 0.6, 0.8], &[0.0, 0.8, 0.6]]);
        let cfg = fixed_tau(1.0);
        let loss = intra_loss(&x, &y, &x, &cfg).unwrap();
        // Oracle: the same formulas written out directly.
        let oracle = margin_loss(&pair_consistency(&x, &y, 1.0).unwrap(), 0.5)
            + margin_loss(&trip_consistency(&x, &y, &x, 1.0).unwrap(), 0.5);
        assert!(loss > 0.0);
        assert_eq!(loss, oracle);
        let one = fm(&[&[1.0, 0.0, 0.0]]);
        let two = fm(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(intra_loss(&one, &two, &one, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn assignment_examples() {
        assert_eq!(assignment_matrix(&DMatrix::from_element(1, 1, 1.0), 0.9)[(0, 0)], 1.0);
        assert_eq!(assignment_matrix(&DMatrix::from_element(1, 1, 0.9), 0.9)[(0, 0)], 0.0);
        let a = assignment_matrix(&DMatrix::from_row_slice(2, 2, &[0.95, 0.1, 0.2, 0.92]), 0.9);
        assert_eq!(a, DMatrix::identity(2, 2));
    }

    #[test]
    fn inter_loss_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = a.map(|v: f64| v.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON));
        assert!(inter_loss(&s, &a).unwrap() < 2e-7);
        let half = DMatrix::from_element(1, 1, 0.5);
        assert!((inter_loss(&half, &DMatrix::from_element(1, 1, 1.0)).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((inter_loss(&half, &DMatrix::from_element(1, 1, 0.0)).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(inter_loss(&half, &a).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 1.0, 0.9) - 1.9).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 2.0, 0.5), 1.0);
    }

    #[test]
    fn adaptive_tau_scales_with_width() {
        let cfg = SslConfig::default();
        assert_eq!(cfg.effective_tau(64), 10.0);
        assert!((cfg.effective_tau(16) - 5.0).abs() < 1e-12);
        assert_eq!(fixed_tau(10.0).effective_tau(16), 10.0);
    }

    fn arb_features(n: usize, d: usize) -> impl Strategy<Value = FeatureMatrix> {
        prop::collection::vec(-1.0..1.0f64, n * d)
            .prop_filter("nonzero rows", move |v| v.chunks(d).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
            .prop_map(move |v| FeatureMatrix::normalized(DMatrix::from_row_slice(n, d, &v)))
    }

    fn permute(f: &FeatureMatrix, perm: &[usize]) -> FeatureMatrix {
        f.select(perm)
    }

    proptest! {
        #[test]
        fn softmax_rows_are_stochastic(m in prop::collection::vec(-3.0..3.0f64, 12), tau in 0.1..20.0f64) {
            let s = row_softmax(&DMatrix::from_row_slice(3, 4, &m), tau);
            for r in 0..3 {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(r).iter().all(|v| *v > 0.0 && *v <= 1.0));
            }
        }

        #[test]
        fn consistency_matrices_are_stochastic(fi in arb_features(3, 4), fj in arb_features(2, 4), fk in arb_features(4, 4), tau in 0.5..15.0f64) {
            for e in [pair_consistency(&fi, &fj, tau).unwrap(), trip_consistency(&fi, &fj, &fk, tau).unwrap()] {
                for r in 0..e.nrows() {
                    prop_assert!((e.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn margin_loss_nonnegative(v in prop::collection::vec(0.0..1.0f64, 16)) {
            let e = DMatrix::from_row_slice(4, 4, &v);
            prop_assert!(margin_loss(&e, 0.5) >= 0.0);
            let dominant = (0..4).all(|r| (0..4).all(|c| c == r || e[(r, r)] >= e[(r, c)]));
            prop_assert_eq!(margin_loss(&e, 0.0) == 0.0, dominant);
        }

        #[test]
        fn intra_loss_permutation_invariant(fi in arb_features(3, 4), fj in arb_features(3, 4), fk in arb_features(3, 4)) {
            let cfg = fixed_tau(4.0);
            let base = intra_loss(&fi, &fj, &fk, &cfg).unwrap();
            let perm = [2, 0, 1];
            let permuted = intra_loss(&permute(&fi, &perm), &permute(&fj, &perm), &permute(&fk, &perm), &cfg).unwrap();
            prop_assert!((base - permuted).abs() < 1e-9);
        }

        #[test]
        fn intra_loss_rotation_invariant(fi in arb_features(2, 3), fj in arb_features(3, 3), fk in arb_features(2, 3), angle in 0.0..6.3f64) {
            let cfg = fixed_tau(4.0);
            let (c, s) = (angle.cos(), angle.sin());
            let rot = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
            let r = |f: &FeatureMatrix| FeatureMatrix::new(f.matrix() * &rot).unwrap();
            let base = intra_loss(&fi, &fj, &fk, &cfg).unwrap();
            let rotated = intra_loss(&r(&fi), &r(&fj), &r(&fk), &cfg).unwrap();
            prop_assert!((base - rotated).abs() < 1e-9);
        }
    }
}
