//! Similarity of two sets of component maps: cross-correlation, subspace
//! stability `e`, greedy one-to-one matching `t` and percentile summaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    #[serde(with = "matrix_rows")]
    pub cross_corr: DMatrix<f64>,
    /// Absolute correlations re-indexed by match order; greedy matches on the diagonal.
    #[serde(with = "matrix_rows")]
    pub reordered: DMatrix<f64>,
    pub permutation: Vec<(usize, usize)>,
    pub e: f64,
    pub t: f64,
    pub d: usize,
    pub percentiles: Percentiles,
}

/// Fractions of matched pairs above 0.75, above 0.50 and below 0.25.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub above_075: f64,
    pub above_050: f64,
    pub below_025: f64,
}

impl MatchReport {
    pub fn from_correlation(c: DMatrix<f64>) -> Result<Self> {
        let e = subspace_energy(&c)?;
        let (reordered, permutation, t) = greedy_match(&c)?;
        let d = permutation.len();
        let percentiles = percentile_summary(&reordered);
        Ok(Self {
            cross_corr: c,
            reordered,
            permutation,
            e,
            t,
            d,
            percentiles,
        })
    }

    pub fn compare(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<Self> {
        Self::from_correlation(cross_correlation(a1, a2)?)
    }
}

fn centered_unit_rows(a: &DMatrix<f64>, set: &'static str, lenient: bool) -> Result<DMatrix<f64>> {
    let n = a.ncols() as f64;
    let mut out = a.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let mean = row.sum() / n;
        row.add_scalar_mut(-mean);
        let norm = row.norm();
        if norm > 0.0 && norm.is_finite() {
            row /= norm;
        } else if lenient {
            row.fill(0.0);
        } else {
            return Err(Error::DegenerateRow { set, row: i });
        }
    }
    Ok(out)
}

/// Pearson correlation of every row of `a1` with every row of `a2`.
pub fn cross_correlation(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    correlate(a1, a2, false)
}

/// Like [`cross_correlation`], but rows without variance (for instance maps
/// with an empty support after thresholding) correlate as 0 with everything.
pub fn cross_correlation_lenient(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    correlate(a1, a2, true)
}

fn correlate(a1: &DMatrix<f64>, a2: &DMatrix<f64>, lenient: bool) -> Result<DMatrix<f64>> {
    if a1.ncols() != a2.ncols() {
        return Err(Error::Dimension(format!(
            "map sets have {} and {} voxels",
            a1.ncols(),
            a2.ncols()
        )));
    }
    let u1 = centered_unit_rows(a1, "first map set", lenient)?;
    let u2 = centered_unit_rows(a2, "second map set", lenient)?;
    Ok(u1 * u2.transpose())
}

/// `e = ‖C‖²_F / min(k₁, k₂)`.
pub fn subspace_energy(c: &DMatrix<f64>) -> Result<f64> {
    let d = c.nrows().min(c.ncols());
    if d == 0 {
        return Err(Error::Dimension("empty cross-correlation matrix".into()));
    }
    Ok(c.norm_squared() / d as f64)
}

/// Greedy matching of maximally correlated pairs (by absolute value).
///
/// Returns the reordered absolute matrix, the matched `(row, col)` pairs in
/// match order, and `t`, the mean of the matched absolute correlations.
/// Ties go to the smallest row, then the smallest column.
pub fn greedy_match(c: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<(usize, usize)>, f64)> {
    let (k1, k2) = c.shape();
    let d = k1.min(k2);
    if d == 0 {
        return Err(Error::Dimension("empty cross-correlation matrix".into()));
    }
    let mut row_used = vec![false; k1];
    let mut col_used = vec![false; k2];
    let mut permutation = Vec::with_capacity(d);
    for _ in 0..d {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..k1).filter(|&i| !row_used[i]) {
            for j in (0..k2).filter(|&j| !col_used[j]) {
                let v = c[(i, j)].abs();
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, _) = best.expect("unmatched rows and columns remain");
        row_used[i] = true;
        col_used[j] = true;
        permutation.push((i, j));
    }
    let reordered = DMatrix::from_fn(d, d, |p, q| c[(permutation[p].0, permutation[q].1)].abs());
    let t = reordered.diagonal().sum() / d as f64;
    Ok((reordered, permutation, t))
}

pub fn percentile_summary(reordered: &DMatrix<f64>) -> Percentiles {
    let diag = reordered.diagonal();
    let d = diag.len().max(1) as f64;
    let frac = |pred: &dyn Fn(f64) -> bool| diag.iter().filter(|v| pred(**v)).count() as f64 / d;
    Percentiles {
        above_075: frac(&|v| v > 0.75),
        above_050: frac(&|v| v > 0.50),
        below_025: frac(&|v| v < 0.25),
    }
}

/// For each row of `reference`, the largest absolute correlation with any row of `other`.
pub fn best_match_scores(reference: &DMatrix<f64>, other: &DMatrix<f64>) -> Result<Vec<f64>> {
    let c = cross_correlation(reference, other)?;
    Ok(c.row_iter()
        .map(|r| r.iter().fold(0.0f64, |a, v| a.max(v.abs())))
        .collect())
}

/// Serialize a matrix as a list of rows.
pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n_cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(flat.len() / n_cols.max(1), n_cols, &flat))
    }
}
