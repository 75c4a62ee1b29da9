//! Group-level reproducible subspace by generalized CCA over the stacked
//! subject patterns, with a bootstrap significance threshold on the canonical
//! correlations drawn from the subjects' observation-noise bases.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rayon::prelude::*;

use crate::dataio::Manifest;
use crate::decomp::{variance_weighted_patterns, whitened_patterns, SubjectDecomposition};
use crate::error::{Error, Result};
use crate::linalg::{canonical_row_sign, thin_svd, vstack};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupModel {
    /// `n_grp × n_voxels`, orthonormal rows.
    pub group_patterns: DMatrix<f64>,
    /// Singular values of the stacked whitened patterns, non-increasing.
    pub canonical_correlations: DVector<f64>,
    /// Bootstrap threshold; absent only when `n_grp` was fixed and the noise
    /// bases are too small to draw a null.
    pub z_threshold: Option<f64>,
    pub n_grp: usize,
    /// `(S·n_sbj) × n_grp` left singular vectors of the decomposed stack.
    pub canonical_weights: DMatrix<f64>,
    pub used_cca: bool,
    /// Singular values of the stack that produced `group_patterns`; equal to
    /// `canonical_correlations` on the CCA route.
    pub stack_singular_values: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupOptions {
    pub use_cca: bool,
    pub p_value: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Fixed group order; when absent the bootstrap threshold decides.
    pub n_grp: Option<usize>,
}

impl Default for GroupOptions {
    fn default() -> Self {
        Self {
            use_cca: true,
            p_value: 0.05,
            n_bootstrap: 1000,
            seed: 0,
            n_grp: None,
        }
    }
}

impl GroupModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = Manifest::new("group_model");
        manifest.put_matrix(dir, "group_patterns", &self.group_patterns)?;
        manifest.put_matrix(dir, "canonical_weights", &self.canonical_weights)?;
        manifest.put_matrix(
            dir,
            "canonical_correlations",
            &DMatrix::from_row_slice(1, self.canonical_correlations.len(), self.canonical_correlations.as_slice()),
        )?;
        manifest.put_matrix(
            dir,
            "stack_singular_values",
            &DMatrix::from_row_slice(1, self.stack_singular_values.len(), self.stack_singular_values.as_slice()),
        )?;
        manifest.scalars = serde_json::json!({
            "z_threshold": self.z_threshold,
            "n_grp": self.n_grp,
            "used_cca": self.used_cca,
        });
        manifest.save(&dir.join("group_model.json"))
    }
}

fn check_inputs(decomps: &[SubjectDecomposition]) -> Result<usize> {
    if decomps.len() < 2 {
        return Err(Error::InsufficientSubjects(decomps.len()));
    }
    let n_voxels = decomps[0].n_voxels();
    for (s, d) in decomps.iter().enumerate() {
        if d.n_voxels() != n_voxels {
            return Err(Error::Dimension(format!(
                "subject {s} has {} voxels, expected {n_voxels}",
                d.n_voxels()
            )));
        }
        if d.n_sbj == 0 {
            return Err(Error::Dimension(format!("subject {s} retains no components")));
        }
    }
    Ok(n_voxels)
}

struct StackSvd {
    weights: DMatrix<f64>,
    values: DVector<f64>,
    components: DMatrix<f64>,
}

fn decompose_stack(blocks: &[DMatrix<f64>]) -> Result<StackSvd> {
    let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    let stack = vstack(&refs)?;
    let svd = thin_svd(&stack)?;
    let mut components = svd.vt;
    let mut weights = svd.u;
    for i in 0..components.nrows() {
        if canonical_row_sign(&mut components, i) < 0.0 {
            weights.column_mut(i).neg_mut();
        }
    }
    Ok(StackSvd {
        weights,
        values: svd.s,
        components,
    })
}

pub fn fit_group_subspace(decomps: &[SubjectDecomposition], opts: &GroupOptions) -> Result<GroupModel> {
    check_inputs(decomps)?;
    let whitened: Vec<DMatrix<f64>> = decomps.iter().map(whitened_patterns).collect();
    let cca = decompose_stack(&whitened)?;
    let z_threshold = match bootstrap_null(decomps, opts.n_bootstrap, opts.p_value, opts.seed) {
        Ok(z) => Some(z),
        Err(Error::InsufficientNoise { .. }) if opts.n_grp.is_some() => None,
        Err(e) => return Err(e),
    };
    let selected = z_threshold.map_or(0, |th| cca.values.iter().filter(|z| **z > th).count());

    let chosen = if opts.use_cca {
        cca
    } else {
        let weighted: Vec<DMatrix<f64>> = decomps.iter().map(variance_weighted_patterns).collect();
        decompose_stack(&weighted)?
    };
    let n_grp = opts.n_grp.unwrap_or(selected).min(chosen.components.nrows());

    let canonical_correlations = if opts.use_cca {
        chosen.values.clone()
    } else {
        decompose_stack(&whitened)?.values
    };
    Ok(GroupModel {
        group_patterns: chosen.components.rows(0, n_grp).into_owned(),
        canonical_correlations,
        z_threshold,
        n_grp,
        canonical_weights: chosen.weights.columns(0, n_grp).into_owned(),
        used_cca: opts.use_cca,
        stack_singular_values: chosen.values,
    })
}

/// Bootstrap distribution of the largest canonical correlation reachable
/// with observation noise alone; returns its `1 - p_value` quantile.
///
/// Each replicate draws, per subject, `n_sbj` distinct rows of that subject's
/// noise basis and takes the top singular value of the stacked draw.
pub fn bootstrap_null(
    decomps: &[SubjectDecomposition],
    n_bootstrap: usize,
    p_value: f64,
    seed: u64,
) -> Result<f64> {
    let mut z0 = bootstrap_samples(decomps, n_bootstrap, seed)?;
    if !(0.0..1.0).contains(&p_value) {
        return Err(Error::Parameter(format!("p_value must lie in [0, 1), got {p_value}")));
    }
    z0.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&z0, 1.0 - p_value))
}

/// Replicate maxima `z₀`, in replicate order.
pub fn bootstrap_samples(
    decomps: &[SubjectDecomposition],
    n_bootstrap: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(decomps)?;
    if n_bootstrap < 100 {
        return Err(Error::Parameter(format!("n_bootstrap must be ≥ 100, got {n_bootstrap}")));
    }
    for (s, d) in decomps.iter().enumerate() {
        if d.noise_basis.nrows() < d.n_sbj {
            return Err(Error::InsufficientNoise {
                subject: s,
                available: d.noise_basis.nrows(),
                required: d.n_sbj,
            });
        }
    }
    let grams = NoiseGrams::new(decomps);
    (0..n_bootstrap)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, &[tag::BOOTSTRAP, r as u64]);
            let draws: Vec<Vec<usize>> = decomps
                .iter()
                .map(|d| index::sample(&mut rng, d.noise_basis.nrows(), d.n_sbj).into_vec())
                .collect();
            let gram = grams.assemble(decomps, &draws);
            let top = gram.symmetric_eigenvalues().max();
            if !top.is_finite() {
                return Err(Error::Numerical("non-finite bootstrap eigenvalue".into()));
            }
            Ok(top.max(0.0).sqrt())
        })
        .collect()
}

/// Pairwise noise-basis Gram blocks, precomputed when they fit in memory.
struct NoiseGrams {
    blocks: Option<Vec<Vec<DMatrix<f64>>>>,
}

const GRAM_CACHE_LIMIT: usize = 32 << 20;

impl NoiseGrams {
    fn new(decomps: &[SubjectDecomposition]) -> Self {
        let sizes: Vec<usize> = decomps.iter().map(|d| d.noise_basis.nrows()).collect();
        let total: usize = sizes.iter().sum();
        if total * total > GRAM_CACHE_LIMIT {
            return Self { blocks: None };
        }
        let blocks = (0..decomps.len())
            .into_par_iter()
            .map(|s| {
                (0..decomps.len())
                    .map(|t| {
                        if t < s {
                            DMatrix::zeros(0, 0)
                        } else {
                            &decomps[s].noise_basis * decomps[t].noise_basis.transpose()
                        }
                    })
                    .collect()
            })
            .collect();
        Self { blocks: Some(blocks) }
    }

    fn assemble(&self, decomps: &[SubjectDecomposition], draws: &[Vec<usize>]) -> DMatrix<f64> {
        let offsets: Vec<usize> = draws
            .iter()
            .scan(0, |acc, d| {
                let o = *acc;
                *acc += d.len();
                Some(o)
            })
            .collect();
        let n: usize = draws.iter().map(|d| d.len()).sum();
        match &self.blocks {
            Some(blocks) => {
                let mut gram = DMatrix::zeros(n, n);
                for s in 0..draws.len() {
                    for t in s..draws.len() {
                        let block = &blocks[s][t];
                        for (a, &i) in draws[s].iter().enumerate() {
                            for (b, &j) in draws[t].iter().enumerate() {
                                let v = block[(i, j)];
                                gram[(offsets[s] + a, offsets[t] + b)] = v;
                                gram[(offsets[t] + b, offsets[s] + a)] = v;
                            }
                        }
                    }
                }
                gram
            }
            None => {
                let rows: Vec<DMatrix<f64>> = decomps
                    .iter()
                    .zip(draws)
                    .map(|(d, idx)| d.noise_basis.select_rows(idx.iter()))
                    .collect();
                let refs: Vec<&DMatrix<f64>> = rows.iter().collect();
                let stack = vstack(&refs).expect("noise bases share the voxel count");
                &stack * stack.transpose()
            }
        }
    }
}

/// Linear-interpolation quantile of ascending `sorted` at level `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
