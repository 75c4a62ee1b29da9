//! Subject-level PCA: split each subject's data into retained patterns,
//! their time loadings, and the observation-noise basis.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataio::{Manifest, SubjectDataset};
use crate::error::{Error, Result};
use crate::linalg::{canonical_row_sign, thin_svd};

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDecomposition {
    /// `n_sbj × n_voxels`, orthonormal rows.
    pub patterns: DMatrix<f64>,
    /// `n_frames × n_sbj`, left singular vectors scaled by their singular values.
    pub loadings: DMatrix<f64>,
    /// All `min(n_frames, n_voxels)` singular values, non-increasing.
    pub singular_values: DVector<f64>,
    /// Right singular vectors past `n_sbj` that lie inside the numerical rank.
    pub noise_basis: DMatrix<f64>,
    pub n_sbj: usize,
}

impl SubjectDecomposition {
    pub fn n_voxels(&self) -> usize {
        self.patterns.ncols()
    }

    /// Observation noise left after removing the retained components.
    pub fn residual(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        data - &self.loadings * &self.patterns
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::new("subject_decomposition");
        manifest.put_matrix(dir, "patterns", &self.patterns)?;
        manifest.put_matrix(dir, "loadings", &self.loadings)?;
        manifest.put_matrix(dir, "singular_values", &DMatrix::from_row_slice(1, self.singular_values.len(), self.singular_values.as_slice()))?;
        manifest.put_matrix(dir, "noise_basis", &self.noise_basis)?;
        manifest.scalars = serde_json::json!({ "n_sbj": self.n_sbj });
        manifest.save(&dir.join("decomposition.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(&dir.join("decomposition.json"))?;
        let sv = manifest.get_matrix(dir, "singular_values")?;
        let n_sbj = manifest.scalars["n_sbj"]
            .as_u64()
            .ok_or_else(|| Error::Config("decomposition manifest lacks n_sbj".into()))?;
        Ok(Self {
            patterns: manifest.get_matrix(dir, "patterns")?,
            loadings: manifest.get_matrix(dir, "loadings")?,
            singular_values: DVector::from_iterator(sv.len(), sv.iter().copied()),
            noise_basis: manifest.get_matrix(dir, "noise_basis")?,
            n_sbj: n_sbj as usize,
        })
    }
}

/// Truncated SVD of one subject, keeping the first `n_sbj` components.
///
/// Each component is signed so that the largest-magnitude entry of its
/// pattern row is positive.
pub fn subject_svd(dataset: &SubjectDataset, n_sbj: usize) -> Result<SubjectDecomposition> {
    decompose(&dataset.data, n_sbj)
}

pub(crate) fn decompose(data: &DMatrix<f64>, n_sbj: usize) -> Result<SubjectDecomposition> {
    let (n_frames, n_voxels) = data.shape();
    let m = n_frames.min(n_voxels);
    if n_sbj == 0 || n_sbj > m {
        return Err(Error::Dimension(format!("n_sbj = {n_sbj} outside 1..={m}")));
    }
    let svd = thin_svd(data)?;
    let mut vt = svd.vt;
    let mut u = svd.u;
    for i in 0..m {
        if canonical_row_sign(&mut vt, i) < 0.0 {
            u.column_mut(i).neg_mut();
        }
    }
    let mut loadings = u.columns(0, n_sbj).into_owned();
    for (j, mut col) in loadings.column_iter_mut().enumerate() {
        col *= svd.s[j];
    }
    Ok(SubjectDecomposition {
        patterns: vt.rows(0, n_sbj).into_owned(),
        loadings,
        singular_values: svd.s,
        noise_basis: vt.rows(n_sbj, svd.rank.saturating_sub(n_sbj)).into_owned(),
        n_sbj,
    })
}

/// Orthonormal pattern rows, used as-is by the CCA route.
pub fn whitened_patterns(d: &SubjectDecomposition) -> DMatrix<f64> {
    d.patterns.clone()
}

/// Pattern rows scaled by their singular values (fixed-effect route).
pub fn variance_weighted_patterns(d: &SubjectDecomposition) -> DMatrix<f64> {
    let mut out = d.patterns.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d.singular_values[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::standardize;
    use crate::linalg::orthonormality_error;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn rank_one() {
        let u = DVector::from_fn(10, |i, _| (i as f64 + 1.0).sin()).normalize();
        let v = DVector::from_fn(50, |i, _| ((i * i) as f64 * 0.1).cos()).normalize();
        let y = &u * v.transpose();
        let d = decompose(&y, 1).unwrap();
        assert!((d.singular_values[0] - 1.0).abs() < 1e-12);
        assert!(d.singular_values.iter().skip(1).all(|s| *s < 1e-10));
        let sign = d.patterns[(0, 0)].signum() * v[0].signum();
        for j in 0..50 {
            assert!((d.patterns[(0, j)] - sign * v[j]).abs() < 1e-12);
        }
        let w = whitened_patterns(&d);
        assert_eq!(w.nrows(), 1);
        assert!((w.row(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_retention_is_exact() {
        let ds = standardize(&gaussian(12, 20, 3)).unwrap();
        let d = subject_svd(&ds, 12).unwrap();
        assert_eq!(d.noise_basis.nrows(), 0);
        let rebuilt = &d.loadings * &d.patterns;
        assert!((rebuilt - &ds.data).abs().max() < 1e-8);
    }

    #[test]
    fn invariants_hold() {
        let ds = standardize(&gaussian(25, 40, 9)).unwrap();
        let d = subject_svd(&ds, 6).unwrap();
        assert!(orthonormality_error(&d.patterns) < 1e-8);
        let both = crate::linalg::vstack(&[&d.patterns, &d.noise_basis]).unwrap();
        assert!(orthonormality_error(&both) < 1e-8);
        let sv = d.singular_values.as_slice();
        assert!(sv.windows(2).all(|w| w[0] >= w[1]) && sv.iter().all(|s| *s >= 0.0));
        // energy: biased standardization gives ‖Y‖² = n_frames · n_voxels
        let energy: f64 = sv.iter().map(|s| s * s).sum();
        assert!((energy - 25.0 * 40.0).abs() / 1000.0 < 1e-6);
        assert!((ds.data.norm_squared() - 1000.0).abs() < 1e-6);
        let residual = d.residual(&ds.data).norm_squared();
        let tail: f64 = sv[6..].iter().map(|s| s * s).sum();
        assert!((residual - tail).abs() / tail < 1e-6);
        for row in d.patterns.row_iter() {
            let j = crate::linalg::argmax_abs(row.iter());
            assert!(row[j] > 0.0);
        }
    }

    #[test]
    fn variance_weighting_scales_rows() {
        let patterns = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let d = SubjectDecomposition {
            patterns: patterns.clone(),
            loadings: DMatrix::zeros(2, 2),
            singular_values: DVector::from_vec(vec![2.0, 1.0]),
            noise_basis: DMatrix::zeros(0, 3),
            n_sbj: 2,
        };
        let w = variance_weighted_patterns(&d);
        assert_eq!(w, DMatrix::from_row_slice(2, 3, &[2.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        assert_eq!(whitened_patterns(&d), patterns);
    }

    #[test]
    fn out_of_range_order() {
        let ds = standardize(&gaussian(5, 8, 1)).unwrap();
        assert!(matches!(subject_svd(&ds, 0), Err(Error::Dimension(_))));
        assert!(matches!(subject_svd(&ds, 6), Err(Error::Dimension(_))));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = standardize(&gaussian(8, 15, 2)).unwrap();
        let d = subject_svd(&ds, 3).unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(SubjectDecomposition::load(dir.path()).unwrap(), d);
    }
}
