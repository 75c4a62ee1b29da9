//! FastICA rotation of a whitened group subspace into component maps, and
//! amplitude thresholding of the maps.
//!
//! Voxels are the samples. The subspace rows are centered, rescaled to unit
//! variance and re-whitened, then rotated by a fixed-point iteration on the
//! negentropy contrast.

use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::Manifest;
use crate::error::{Error, Result};
use crate::linalg::{canonical_row_sign, orthonormality_error, sorted_symmetric_eigen};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    /// g(u) = tanh(u)
    Logcosh,
    /// g(u) = u³
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcaMode {
    Symmetric,
    Deflation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcaOptions {
    pub nonlinearity: Nonlinearity,
    pub mode: IcaMode,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaOptions {
    fn default() -> Self {
        Self {
            nonlinearity: Nonlinearity::Logcosh,
            mode: IcaMode::Symmetric,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMaps {
    /// `n_comp × n_voxels`, each row with mean 0 and unit variance over voxels.
    pub maps: DMatrix<f64>,
    /// Maps the components back to the standardized subspace:
    /// `standardized_subspace(B) = mixing · maps`.
    pub mixing: DMatrix<f64>,
    /// Orthogonal rotation found by the fixed-point iteration.
    pub rotation: DMatrix<f64>,
    pub threshold: f64,
    /// Per map, voxels with `|value| > threshold`, ascending.
    pub supports: Vec<Vec<usize>>,
    pub converged: bool,
    pub n_iterations: usize,
}

impl ComponentMaps {
    pub fn n_components(&self) -> usize {
        self.maps.nrows()
    }

    /// Maps with every sub-threshold voxel set to zero.
    pub fn thresholded(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.maps.nrows(), self.maps.ncols());
        for (i, support) in self.supports.iter().enumerate() {
            for &v in support {
                out[(i, v)] = self.maps[(i, v)];
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::new("component_maps");
        manifest.put_matrix(dir, "maps", &self.maps)?;
        manifest.put_matrix(dir, "mixing", &self.mixing)?;
        manifest.put_matrix(dir, "rotation", &self.rotation)?;
        manifest.scalars = serde_json::json!({
            "threshold": self.threshold,
            "supports": self.supports,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
        });
        manifest.save(&dir.join("component_maps.json"))
    }
}

/// Row-center `subspace` over voxels and scale it by `sqrt(n_voxels)`, the
/// scale on which `mixing` is expressed.
pub fn standardized_subspace(subspace: &DMatrix<f64>) -> DMatrix<f64> {
    let n = subspace.ncols() as f64;
    let mut x = subspace.clone();
    for mut row in x.row_iter_mut() {
        let mean = row.mean();
        row.apply(|v| *v = (*v - mean) * n.sqrt());
    }
    x
}

pub fn fastica(subspace: &DMatrix<f64>, opts: &IcaOptions) -> Result<ComponentMaps> {
    let (k, n) = subspace.shape();
    if k == 0 {
        return Err(Error::Dimension("cannot run ICA on an empty subspace".into()));
    }
    if n < 2 {
        return Err(Error::Dimension(format!("need at least 2 voxels, got {n}")));
    }
    let err = orthonormality_error(subspace);
    if !(err < 1e-6) {
        return Err(Error::Precondition(format!(
            "subspace rows are not orthonormal (max deviation {err:.3e})"
        )));
    }

    let x = standardized_subspace(subspace);
    let whitening = whitening_matrix(&x)?;
    let z = &whitening * &x;

    let mut rng = rng::stream(opts.seed, &[tag::ICA]);
    let init = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut rng));
    let (rotation, converged, n_iterations) = match opts.mode {
        IcaMode::Symmetric => symmetric(&z, init, opts)?,
        IcaMode::Deflation => deflation(&z, init, opts),
    };

    let mut maps = &rotation * &z;
    for i in 0..k {
        standardize_row(&mut maps, i);
        let skew = maps.row(i).iter().map(|v| v * v * v).sum::<f64>() / n as f64;
        if skew.abs() < 1e-3 {
            canonical_row_sign(&mut maps, i);
        } else if skew < 0.0 {
            maps.row_mut(i).neg_mut();
        }
    }

    let gram = &maps * maps.transpose();
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Numerical("component maps are linearly dependent".into()))?;
    let mixing = &x * maps.transpose() * inv;

    Ok(ComponentMaps {
        supports: supports(&maps, 0.0),
        maps,
        mixing,
        rotation,
        threshold: 0.0,
        converged,
        n_iterations,
    })
}

/// Recompute supports for threshold `tau`; map values are unchanged.
pub fn threshold_maps(maps: &ComponentMaps, tau: f64) -> Result<ComponentMaps> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("threshold must be ≥ 0, got {tau}")));
    }
    Ok(ComponentMaps {
        supports: supports(&maps.maps, tau),
        threshold: tau,
        ..maps.clone()
    })
}

fn supports(maps: &DMatrix<f64>, tau: f64) -> Vec<Vec<usize>> {
    maps.row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| v.abs() > tau)
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

fn standardize_row(m: &mut DMatrix<f64>, i: usize) {
    let n = m.ncols() as f64;
    let mean = m.row(i).sum() / n;
    let var = m.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    m.row_mut(i).apply(|v| *v = (*v - mean) * inv);
}

/// Symmetric inverse square root of the sample covariance of the rows of `x`.
fn whitening_matrix(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.ncols() as f64;
    let cov = x * x.transpose() / n;
    let (values, vectors) = sorted_symmetric_eigen(cov)?;
    let top = values[0];
    if values.iter().any(|v| !(*v > top * 1e-12)) {
        return Err(Error::Numerical("centered subspace is rank deficient".into()));
    }
    let scale = DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt()));
    Ok(&vectors * scale * vectors.transpose())
}

/// `(W Wᵀ)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_symmetric_eigen(w * w.transpose())?;
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("unmixing matrix became singular".into()));
    }
    let scale = DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt()));
    Ok(&vectors * scale * vectors.transpose() * w)
}

fn contrast(nl: Nonlinearity, u: f64) -> (f64, f64) {
    match nl {
        Nonlinearity::Logcosh => {
            let t = u.tanh();
            (t, 1.0 - t * t)
        }
        Nonlinearity::Cube => (u * u * u, 3.0 * u * u),
    }
}

fn symmetric(
    z: &DMatrix<f64>,
    init: DMatrix<f64>,
    opts: &IcaOptions,
) -> Result<(DMatrix<f64>, bool, usize)> {
    let (k, n) = z.shape();
    let mut w = symmetric_decorrelation(&init)?;
    for it in 1..=opts.max_iter {
        let mut g = &w * z;
        let mut mean_dg = vec![0.0; k];
        for i in 0..k {
            for j in 0..n {
                let (gv, dg) = contrast(opts.nonlinearity, g[(i, j)]);
                g[(i, j)] = gv;
                mean_dg[i] += dg;
            }
            mean_dg[i] /= n as f64;
        }
        let mut next = &g * z.transpose() / n as f64;
        for i in 0..k {
            let row = w.row(i).clone_owned();
            let mut r = next.row_mut(i);
            r -= row * mean_dg[i];
        }
        let next = symmetric_decorrelation(&next)?;
        let lim = (0..k)
            .map(|i| (1.0 - next.row(i).dot(&w.row(i)).abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < opts.tol {
            return Ok((w, true, it));
        }
    }
    Ok((w, false, opts.max_iter))
}

fn deflation(z: &DMatrix<f64>, init: DMatrix<f64>, opts: &IcaOptions) -> (DMatrix<f64>, bool, usize) {
    let (k, n) = z.shape();
    let mut w_all = DMatrix::<f64>::zeros(k, k);
    let mut all_converged = true;
    let mut most_iters = 0;
    for p in 0..k {
        let mut w = init.row(p).transpose();
        orthogonalize_against(&mut w, &w_all, p);
        let mut converged = false;
        let mut iters = opts.max_iter;
        for it in 1..=opts.max_iter {
            let u = w.transpose() * z;
            let mut gz = nalgebra::DVector::zeros(k);
            let mut mean_dg = 0.0;
            for j in 0..n {
                let (gv, dg) = contrast(opts.nonlinearity, u[j]);
                gz.axpy(gv, &z.column(j), 1.0);
                mean_dg += dg;
            }
            let mut next = gz / n as f64 - &w * (mean_dg / n as f64);
            orthogonalize_against(&mut next, &w_all, p);
            let lim = (1.0 - next.dot(&w).abs()).abs();
            w = next;
            if lim < opts.tol {
                converged = true;
                iters = it;
                break;
            }
        }
        all_converged &= converged;
        most_iters = most_iters.max(iters);
        w_all.set_row(p, &w.transpose());
    }
    (w_all, all_converged, most_iters)
}

fn orthogonalize_against(w: &mut nalgebra::DVector<f64>, basis: &DMatrix<f64>, count: usize) {
    for _ in 0..2 {
        for q in 0..count {
            let dot = basis.row(q).transpose().dot(w);
            w.axpy(-dot, &basis.row(q).transpose(), 1.0);
        }
    }
    let norm = w.norm();
    if norm > 0.0 {
        *w /= norm;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_rows;
    use rand::SeedableRng;
    use rand_distr::Uniform;

    fn orthonormal(m: DMatrix<f64>) -> DMatrix<f64> {
        let mut m = m;
        orthonormalize_rows(&mut m, &[]);
        m
    }

    #[test]
    fn single_component_is_standardized_input() {
        let row = DMatrix::from_fn(1, 200, |_, j| ((j as f64) * 0.3).sin().powi(3) + 0.01);
        let b = orthonormal(row);
        let out = fastica(&b, &IcaOptions::default()).unwrap();
        assert_eq!(out.mixing.shape(), (1, 1));
        let mut expected = standardized_subspace(&b);
        standardize_row(&mut expected, 0);
        let sign = out.maps[(0, 0)].signum() * expected[(0, 0)].signum();
        assert!((&out.maps - expected * sign).abs().max() < 1e-10);
    }

    #[test]
    fn maps_are_standardized_and_mixing_reconstructs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let lap = rand_distr::Exp::new(1.0).unwrap();
        let raw = DMatrix::from_fn(3, 3000, |_, _| {
            let e: f64 = lap.sample(&mut rng);
            if rand::Rng::random::<bool>(&mut rng) { e } else { -e }
        });
        let b = orthonormal(raw);
        for mode in [IcaMode::Symmetric, IcaMode::Deflation] {
            let opts = IcaOptions { mode, ..Default::default() };
            let out = fastica(&b, &opts).unwrap();
            for row in out.maps.row_iter() {
                let mean = row.mean();
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3000.0;
                assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
            }
            let x = standardized_subspace(&b);
            let rel = (&x - &out.mixing * &out.maps).norm() / x.norm();
            assert!(rel < 1e-6, "{rel}");
            assert!(out.converged);
            assert!(orthonormality_error(&out.rotation) < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let b = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        assert!(matches!(fastica(&b, &IcaOptions::default()), Err(Error::Precondition(_))));
        let empty = DMatrix::zeros(0, 10);
        assert!(matches!(fastica(&empty, &IcaOptions::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn gaussian_sources_do_not_crash() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let raw = DMatrix::from_fn(2, 2000, |_, _| StandardNormal.sample(&mut rng));
        let b = orthonormal(raw);
        for nonlinearity in [Nonlinearity::Logcosh, Nonlinearity::Cube] {
            let opts = IcaOptions { nonlinearity, max_iter: 50, ..Default::default() };
            let out = fastica(&b, &opts).unwrap();
            assert!(out.maps.iter().all(|v| v.is_finite()));
            for row in out.maps.row_iter() {
                assert!(row.mean().abs() < 1e-6);
            }
        }
    }

    #[test]
    fn thresholding() {
        let maps = DMatrix::from_row_slice(2, 4, &[0.0, 1.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
        let cm = ComponentMaps {
            supports: supports(&maps, 0.0),
            maps,
            mixing: DMatrix::identity(2, 2),
            rotation: DMatrix::identity(2, 2),
            threshold: 0.0,
            converged: true,
            n_iterations: 1,
        };
        assert_eq!(cm.supports, vec![vec![1, 2, 3], vec![]]);
        let t = threshold_maps(&cm, 0.9).unwrap();
        assert_eq!(t.supports, vec![vec![1, 2], vec![]]);
        assert_eq!(t.maps, cm.maps);
        assert_eq!(t.thresholded()[(0, 3)], 0.0);
        assert!(matches!(threshold_maps(&cm, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn normal_tail_fraction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u = Uniform::new(0.0, 1.0).unwrap();
        // Box–Muller keeps this independent of the library normal sampler
        let maps = DMatrix::from_fn(1, 100_000, |_, _| {
            let (a, b): (f64, f64) = (u.sample(&mut rng), u.sample(&mut rng));
            (-2.0 * (1.0 - a).ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
        });
        let frac = supports(&maps, 3.0)[0].len() as f64 / 100_000.0;
        assert!((0.0017..=0.0037).contains(&frac), "{frac}");
    }
}
