//! Synthetic multi-subject data from the two-level generative model
//!
//! ```text
//! B   = M · A                       group patterns from independent sources
//! P_s = Λ_s · B + σ_R · G_s         subject patterns
//! Y_s = W_s · P_s + σ_E · H_s       observed frames
//! ```
//!
//! with Laplace sources `A`, Gaussian `G_s`, `H_s`, a random orthogonal `M`,
//! `Λ_s` an identity block plus a Gaussian perturbation, and time courses
//! `W_s` with zero mean, unit variance and no mutual correlation.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Manifest, SubjectDataset};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_rows, thin_svd};
use crate::metrics::cross_correlation;
use crate::rng::{self, tag};

/// Dimensions and noise levels of a synthetic group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_grp: usize,
    pub n_sbj: usize,
    pub n_frames: usize,
    pub n_voxels: usize,
    /// Amplitude of the subject residual patterns `R_s`.
    pub residual_scale: f64,
    /// Amplitude of the observation noise `E_s`.
    pub noise_scale: f64,
    /// Standard deviation of the Gaussian perturbation added to `Λ_s`.
    pub loading_perturbation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    /// The reference scenario: 8 subjects sharing 5 sources.
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_grp: 5,
            n_sbj: 8,
            n_frames: 120,
            n_voxels: 2000,
            residual_scale: 0.25,
            noise_scale: 5.0,
            loading_perturbation: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    /// `n_grp × n_voxels`, standardized rows.
    pub sources: DMatrix<f64>,
    pub group_mixing: DMatrix<f64>,
    /// `Λ_s`, one `n_sbj × n_grp` matrix per subject.
    pub subject_loadings: Vec<DMatrix<f64>>,
    pub subject_residual_scale: f64,
    /// `W_s`, one `n_frames × n_sbj` matrix per subject.
    pub time_loadings: Vec<DMatrix<f64>>,
    pub observation_noise_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticGroup {
    pub datasets: Vec<SubjectDataset>,
    pub truth: SyntheticGroundTruth,
    pub warnings: Vec<String>,
}

const MAX_SOURCE_CORRELATION: f64 = 0.05;

pub fn generate_group(spec: &SynthSpec) -> Result<SyntheticGroup> {
    let SynthSpec { n_subjects, n_grp, n_sbj, n_frames, n_voxels, .. } = *spec;
    if n_subjects == 0 || n_grp == 0 || n_sbj == 0 || n_frames < 2 || n_voxels < 2 {
        return Err(Error::Dimension(format!(
            "invalid synthetic shape: {n_subjects} subjects, n_grp {n_grp}, n_sbj {n_sbj}, \
             {n_frames} frames, {n_voxels} voxels"
        )));
    }
    if n_sbj >= n_frames {
        return Err(Error::Dimension(format!("n_sbj = {n_sbj} needs more than {n_frames} frames")));
    }
    if n_grp > n_voxels {
        return Err(Error::Dimension(format!("n_grp = {n_grp} exceeds {n_voxels} voxels")));
    }
    for (name, v) in [
        ("residual_scale", spec.residual_scale),
        ("noise_scale", spec.noise_scale),
        ("loading_perturbation", spec.loading_perturbation),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be a finite value ≥ 0, got {v}")));
        }
    }
    let mut warnings = Vec::new();
    if n_sbj < n_grp {
        warnings.push(format!(
            "n_sbj = {n_sbj} < n_grp = {n_grp}: subjects cannot express every group source"
        ));
    }

    let mut rng = rng::stream(spec.seed, &[tag::SYNTH, 0]);
    let sources = draw_sources(n_grp, n_voxels, &mut rng)?;
    let mut group_mixing = DMatrix::from_fn(n_grp, n_grp, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize_rows(&mut group_mixing, &[]);
    let group_patterns = &group_mixing * &sources;

    let mut datasets = Vec::with_capacity(n_subjects);
    let mut subject_loadings = Vec::with_capacity(n_subjects);
    let mut time_loadings = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let mut rng = rng::stream(spec.seed, &[tag::SYNTH, 1 + s as u64]);
        let loadings = draw_loadings(n_sbj, n_grp, spec.loading_perturbation, &mut rng)?;
        let mut patterns = &loadings * &group_patterns;
        if spec.residual_scale > 0.0 {
            patterns += gaussian(n_sbj, n_voxels, &mut rng) * spec.residual_scale;
        }
        let w = time_courses(n_frames, n_sbj, &mut rng);
        let mut y = &w * patterns;
        if spec.noise_scale > 0.0 {
            y += gaussian(n_frames, n_voxels, &mut rng) * spec.noise_scale;
        }
        datasets.push(SubjectDataset::new(format!("sub-{:02}", s + 1), &y)?);
        subject_loadings.push(loadings);
        time_loadings.push(w);
    }

    Ok(SyntheticGroup {
        datasets,
        truth: SyntheticGroundTruth {
            sources,
            group_mixing,
            subject_loadings,
            subject_residual_scale: spec.residual_scale,
            time_loadings,
            observation_noise_scale: spec.noise_scale,
            seed: spec.seed,
        },
        warnings,
    })
}

fn gaussian(rows: usize, cols: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn time_courses(n_frames: usize, n_sbj: usize, rng: &mut rng::Rng) -> DMatrix<f64> {
    let mut t = gaussian(n_sbj, n_frames, rng);
    for mut row in t.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    orthonormalize_rows(&mut t, &[]);
    t.transpose() * (n_frames as f64).sqrt()
}

fn laplace_row(n: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            if rng.random::<bool>() { e } else { -e }
        })
        .collect();
    let mean = row.iter().sum::<f64>() / n as f64;
    let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    row
}

/// Standardized Laplace rows, redrawn until all pairwise correlations are small.
fn draw_sources(n_grp: usize, n_voxels: usize, rng: &mut rng::Rng) -> Result<DMatrix<f64>> {
    let mut sources = DMatrix::zeros(n_grp, n_voxels);
    for i in 0..n_grp {
        for attempt in 0.. {
            let row = laplace_row(n_voxels, rng);
            sources.row_mut(i).copy_from_slice(&row);
            if i == 0 {
                break;
            }
            let c = cross_correlation(&sources.rows(i, 1).into_owned(), &sources.rows(0, i).into_owned())?;
            if c.iter().all(|v| v.abs() < MAX_SOURCE_CORRELATION) {
                break;
            }
            if attempt > 1000 {
                return Err(Error::Numerical(format!(
                    "could not draw {n_grp} weakly correlated sources over {n_voxels} voxels"
                )));
            }
        }
    }
    Ok(sources)
}

fn draw_loadings(n_sbj: usize, n_grp: usize, perturbation: f64, rng: &mut rng::Rng) -> Result<DMatrix<f64>> {
    for _ in 0..100 {
        let lambda = DMatrix::from_fn(n_sbj, n_grp, |i, j| {
            let base = if i == j { 1.0 } else { 0.0 };
            let g: f64 = StandardNormal.sample(rng);
            base + perturbation * g
        });
        let svd = thin_svd(&lambda)?;
        let rank_needed = n_sbj.min(n_grp);
        if svd.s[rank_needed - 1] > 1e-3 * svd.s[0] {
            return Ok(lambda);
        }
    }
    Err(Error::Numerical("could not draw full-rank subject loadings".into()))
}

impl SyntheticGroundTruth {
    /// Write the ground truth matrices and a `ground_truth.json` manifest.
    pub fn save(&self, dir: &Path, spec: &SynthSpec) -> Result<()> {
        let mut manifest = Manifest::new("synthetic_ground_truth");
        manifest.put_matrix(dir, "sources", &self.sources)?;
        manifest.put_matrix(dir, "group_mixing", &self.group_mixing)?;
        for (s, (l, w)) in self.subject_loadings.iter().zip(&self.time_loadings).enumerate() {
            manifest.put_matrix(dir, &format!("subject_loadings_{:02}", s + 1), l)?;
            manifest.put_matrix(dir, &format!("time_loadings_{:02}", s + 1), w)?;
        }
        manifest.scalars = serde_json::json!({
            "spec": spec,
            "subject_residual_scale": self.subject_residual_scale,
            "observation_noise_scale": self.observation_noise_scale,
            "seed": self.seed,
        });
        manifest.save(&dir.join("ground_truth.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_rank_equals_n_grp() {
        let spec = SynthSpec {
            n_subjects: 2,
            n_grp: 3,
            n_sbj: 3,
            n_frames: 20,
            n_voxels: 200,
            residual_scale: 0.0,
            noise_scale: 0.0,
            loading_perturbation: 0.0,
            seed: 4,
        };
        let group = generate_group(&spec).unwrap();
        for ds in &group.datasets {
            let s = thin_svd(&ds.data).unwrap().s;
            assert!(s[2] > 1e-6 * s[0]);
            assert!(s[3] < 1e-10 * s[0], "{}", s[3]);
        }
        assert!(group.warnings.is_empty());
    }

    #[test]
    fn sources_standardized_and_decorrelated() {
        let spec = SynthSpec { n_subjects: 1, n_voxels: 2000, ..Default::default() };
        let group = generate_group(&spec).unwrap();
        let a = &group.truth.sources;
        for row in a.row_iter() {
            let mean = row.mean();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2000.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
        let c = cross_correlation(a, a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(c[(i, j)].abs() < MAX_SOURCE_CORRELATION);
                }
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SynthSpec { n_subjects: 2, n_voxels: 300, n_frames: 30, seed: 9, ..Default::default() };
        let a = generate_group(&spec).unwrap();
        let b = generate_group(&spec).unwrap();
        assert_eq!(a.truth, b.truth);
        for (x, y) in a.datasets.iter().zip(&b.datasets) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn warns_and_rejects() {
        let spec = SynthSpec { n_subjects: 1, n_sbj: 3, n_voxels: 300, ..Default::default() };
        assert_eq!(generate_group(&spec).unwrap().warnings.len(), 1);
        let bad = SynthSpec { noise_scale: -1.0, ..Default::default() };
        assert!(matches!(generate_group(&bad), Err(Error::Parameter(_))));
        let bad = SynthSpec { n_grp: 0, ..Default::default() };
        assert!(matches!(generate_group(&bad), Err(Error::Dimension(_))));
    }
}
