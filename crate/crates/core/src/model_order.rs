//! Subject-level model order by subspace stability under frame resampling,
//! compared with the same statistic on pure Gaussian noise.
//!
//! For a candidate order `k`, two bootstrap replicates of the frames each
//! yield orthonormal principal directions `a₁…a_k` and `b₁…b_k`. The order-`k`
//! stability is the energy the `k`-th direction of each replicate keeps in
//! the other replicate's rank-`k` subspace, averaged over both sides:
//!
//! ```text
//! s_k = ½ (‖P_{B_k} a_k‖² + ‖P_{A_k} b_k‖²)
//! ```
//!
//! Everything runs on the frame-side Gram matrix: resampled frames only
//! select rows and columns of `Y Yᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{standardize, SubjectDataset};
use crate::error::{Error, Result};
use crate::group_cca::quantile_sorted;
use crate::linalg::sorted_symmetric_eigen;
use crate::rng::{self, tag};

/// Quantile of the noise distribution an order must beat.
pub const NOISE_QUANTILE: f64 = 0.95;
/// Eigenvalues below this fraction of the largest count as numerically zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEstimate {
    pub n_sbj: usize,
    /// Mean stability of the data for orders `1..=max_order`.
    pub stability_curve: Vec<f64>,
    /// Mean stability of Gaussian noise of the same shape.
    pub noise_curve: Vec<f64>,
    /// Upper noise quantile per order; the data must exceed it.
    pub noise_threshold: Vec<f64>,
    pub n_replicates: usize,
}

pub fn estimate_order(
    dataset: &SubjectDataset,
    max_order: usize,
    n_replicates: usize,
    seed: u64,
) -> Result<OrderEstimate> {
    let (n_frames, n_voxels) = dataset.data.shape();
    let limit = n_frames.min(n_voxels).saturating_sub(1);
    if max_order == 0 || max_order > limit {
        return Err(Error::Dimension(format!("max_order = {max_order} outside 1..={limit}")));
    }
    if n_replicates < 20 {
        return Err(Error::Parameter(format!("n_replicates must be ≥ 20, got {n_replicates}")));
    }

    let gram = &dataset.data * dataset.data.transpose();
    let observed: Vec<Vec<f64>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[tag::ORDER, r as u64]);
            resampled_stability(&gram, max_order, &mut rng)
        })
        .collect::<Result<_>>()?;
    let noise: Vec<Vec<f64>> = (0..n_replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[tag::NOISE_BASELINE, r as u64]);
            let g = DMatrix::from_fn(n_frames, n_voxels, |_, _| StandardNormal.sample(&mut rng));
            let g = standardize(&g)?.data;
            resampled_stability(&(&g * g.transpose()), max_order, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mean_at = |reps: &[Vec<f64>], k: usize| reps.iter().map(|c| c[k]).sum::<f64>() / reps.len() as f64;
    let stability_curve: Vec<f64> = (0..max_order).map(|k| mean_at(&observed, k)).collect();
    let noise_curve: Vec<f64> = (0..max_order).map(|k| mean_at(&noise, k)).collect();
    let noise_threshold: Vec<f64> = (0..max_order)
        .map(|k| {
            let mut v: Vec<f64> = noise.iter().map(|c| c[k]).collect();
            v.sort_by(f64::total_cmp);
            quantile_sorted(&v, NOISE_QUANTILE)
        })
        .collect();
    let n_sbj = stability_curve
        .iter()
        .zip(&noise_threshold)
        .take_while(|(s, q)| s > q)
        .count();
    Ok(OrderEstimate {
        n_sbj,
        stability_curve,
        noise_curve,
        noise_threshold,
        n_replicates,
    })
}

/// Stability curve for one pair of frame resamples of the data behind `gram`.
fn resampled_stability(gram: &DMatrix<f64>, max_order: usize, rng: &mut rng::Rng) -> Result<Vec<f64>> {
    let n = gram.nrows();
    let mut draw = || -> Vec<usize> { (0..n).map(|_| rng.random_range(0..n)).collect() };
    let (ia, ib) = (draw(), draw());
    let c = basis_overlap(gram, &ia, &ib, max_order)?;
    Ok(marginal_stability(&c))
}

/// Inner products between the top-`k` principal directions of two frame
/// resamples, `C[i][j] = ⟨a_i, b_j⟩`. Directions beyond the numerical rank of
/// a resample are reported as zero rows/columns.
pub(crate) fn basis_overlap(gram: &DMatrix<f64>, ia: &[usize], ib: &[usize], k: usize) -> Result<DMatrix<f64>> {
    let (ua, sa) = top_directions(&gram.select_rows(ia).select_columns(ia), k)?;
    let (ub, sb) = top_directions(&gram.select_rows(ib).select_columns(ib), k)?;
    let cross = gram.select_rows(ia).select_columns(ib);
    let mut c = ua.transpose() * cross * ub;
    for i in 0..k {
        for j in 0..k {
            c[(i, j)] = if sa[i] > 0.0 && sb[j] > 0.0 { c[(i, j)] / (sa[i] * sb[j]) } else { 0.0 };
        }
    }
    Ok(c)
}

/// Leading `k` eigenvectors of a frame Gram matrix with the matching singular
/// values (zero past the numerical rank).
fn top_directions(sub_gram: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (values, vectors) = sorted_symmetric_eigen(sub_gram.clone())?;
    let top = values[0].max(0.0);
    let sigma = DVector::from_fn(k, |i, _| {
        if values[i] > top * RANK_TOL && values[i] > 0.0 {
            values[i].sqrt()
        } else {
            0.0
        }
    });
    Ok((vectors.columns(0, k).into_owned(), sigma))
}

/// `s_k = ½ (Σ_{j≤k} C[k][j]² + Σ_{i≤k} C[i][k]²)` for every `k`.
pub(crate) fn marginal_stability(c: &DMatrix<f64>) -> Vec<f64> {
    let k = c.nrows().min(c.ncols());
    (0..k)
        .map(|p| {
            let row: f64 = (0..=p).map(|j| c[(p, j)].powi(2)).sum();
            let col: f64 = (0..=p).map(|i| c[(i, p)].powi(2)).sum();
            (0.5 * (row + col)).clamp(0.0, 1.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginal_of_identity_and_swap() {
        assert_eq!(marginal_stability(&DMatrix::identity(3, 3)), vec![1.0, 1.0, 1.0]);
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(marginal_stability(&swap), vec![0.0, 1.0]);
    }

    #[test]
    fn rank_one_dataset_selects_one() {
        let u = DVector::from_fn(30, |i, _| ((i as f64) * 0.7).sin() + 0.2 * i as f64);
        let v = DVector::from_fn(60, |j, _| ((j * j) as f64 * 0.13).cos() + 0.1);
        let ds = SubjectDataset::new("r1", &(&u * v.transpose())).unwrap();
        let est = estimate_order(&ds, 5, 20, 3).unwrap();
        assert_eq!(est.n_sbj, 1);
        assert!((est.stability_curve[0] - 1.0).abs() < 1e-6);
        assert!(est.stability_curve[1..].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn argument_checks() {
        let ds = SubjectDataset::new("x", &DMatrix::from_fn(6, 10, |i, j| ((i * 10 + j) as f64).sin())).unwrap();
        assert!(matches!(estimate_order(&ds, 6, 20, 0), Err(Error::Dimension(_))));
        assert!(matches!(estimate_order(&ds, 0, 20, 0), Err(Error::Dimension(_))));
        assert!(matches!(estimate_order(&ds, 3, 10, 0), Err(Error::Parameter(_))));
    }
}
