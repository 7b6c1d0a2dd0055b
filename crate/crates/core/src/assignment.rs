//! Rectangular linear assignment (Hungarian method with potentials).

use nalgebra::DMatrix;

/// Minimum-cost assignment on a rectangular cost matrix.
///
/// Returns, for every row, the assigned column (`None` when there are more
/// rows than columns and the row is left out). Every column is used at most
/// once and the number of assigned pairs is `min(rows, cols)`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let by_col = min_cost_assignment(&cost.transpose());
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }

    // rows <= cols; 1-based potentials formulation.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Maximum-weight matching restricted to eligible pairs: maximizes the number
/// of matched eligible pairs first and their total weight second. Weights
/// must lie in `[0, 1]`.
pub fn max_eligible_matching<F>(weights: &DMatrix<f64>, eligible: F) -> Vec<(usize, usize)>
where
    F: Fn(usize, usize) -> bool,
{
    let (rows, cols) = weights.shape();
    // A match is worth more than any sum of weight differences.
    let bonus = (rows.min(cols) as f64 + 1.0) * 2.0;
    let cost = DMatrix::from_fn(rows, cols, |i, j| {
        if eligible(i, j) {
            -(bonus + weights[(i, j)])
        } else {
            0.0
        }
    });
    min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .filter(|&(i, j)| eligible(i, j))
        .collect()
}
