//! End-to-end group fit: order selection, subject SVDs, group subspace,
//! FastICA and thresholding.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataio::{RunConfig, SubjectDataset};
use crate::decomp::{subject_svd, SubjectDecomposition};
use crate::error::{Error, Result};
use crate::group_cca::{fit_group_subspace, GroupModel, GroupOptions};
use crate::ica::{fastica, threshold_maps, ComponentMaps, IcaOptions};
use crate::model_order::{estimate_order, OrderEstimate};

/// Default cap on candidate subject-level orders.
pub const DEFAULT_MAX_ORDER: usize = 30;

#[derive(Debug, Clone)]
pub struct GroupFit {
    pub n_sbj: usize,
    pub order: Option<OrderEstimate>,
    pub decompositions: Vec<SubjectDecomposition>,
    pub group: GroupModel,
    /// Absent when no group component passed the threshold.
    pub maps: Option<ComponentMaps>,
    /// Wall-clock milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
}

pub fn check_group(datasets: &[SubjectDataset]) -> Result<()> {
    if datasets.len() < 2 {
        return Err(Error::InsufficientSubjects(datasets.len()));
    }
    let n_voxels = datasets[0].n_voxels();
    if let Some(d) = datasets.iter().find(|d| d.n_voxels() != n_voxels) {
        return Err(Error::Dimension(format!(
            "subject {} has {} voxels, expected {n_voxels}",
            d.subject_id,
            d.n_voxels()
        )));
    }
    if let Some(d) = datasets.iter().find(|d| !d.standardized) {
        return Err(Error::Precondition(format!("subject {} is not standardized", d.subject_id)));
    }
    Ok(())
}

/// Subject-level order from one designated subject.
pub fn select_order(datasets: &[SubjectDataset], cfg: &RunConfig) -> Result<OrderEstimate> {
    let subject = datasets.get(cfg.order_subject).ok_or_else(|| {
        Error::Config(format!(
            "order_subject = {} but only {} subjects",
            cfg.order_subject,
            datasets.len()
        ))
    })?;
    let limit = subject.n_frames().min(subject.n_voxels()).saturating_sub(1);
    let max_order = cfg.max_order.unwrap_or(DEFAULT_MAX_ORDER.min(limit));
    let est = estimate_order(subject, max_order, cfg.order_replicates, cfg.rng_seed)?;
    if est.n_sbj == 0 {
        return Err(Error::Precondition(format!(
            "no subject-level component of {} is more stable than noise",
            subject.subject_id
        )));
    }
    Ok(est)
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
    Ok(out)
}

/// Run the full pipeline on standardized datasets.
///
/// Parallel work uses the ambient rayon pool; results do not depend on its size.
pub fn fit_group(datasets: &[SubjectDataset], cfg: &RunConfig) -> Result<GroupFit> {
    cfg.validate()?;
    check_group(datasets)?;
    let mut timings = BTreeMap::new();

    let (n_sbj, order) = match cfg.n_sbj {
        Some(n) => (n, None),
        None => {
            let est = timed(&mut timings, "model_order", || select_order(datasets, cfg))?;
            (est.n_sbj, Some(est))
        }
    };

    let decompositions = timed(&mut timings, "subject_svd", || {
        datasets.par_iter().map(|d| subject_svd(d, n_sbj)).collect::<Result<Vec<_>>>()
    })?;

    let group_opts = GroupOptions {
        use_cca: cfg.use_cca,
        p_value: cfg.p_value,
        n_bootstrap: cfg.n_bootstrap,
        seed: cfg.rng_seed,
        n_grp: cfg.n_grp,
    };
    let group = timed(&mut timings, "group_cca", || fit_group_subspace(&decompositions, &group_opts))?;

    let maps = if group.n_grp > 0 {
        let ica_opts = IcaOptions {
            nonlinearity: cfg.ica_nonlinearity,
            mode: cfg.ica_mode,
            max_iter: cfg.ica_max_iter,
            tol: cfg.ica_tol,
            seed: cfg.rng_seed,
        };
        let maps = timed(&mut timings, "ica", || fastica(&group.group_patterns, &ica_opts))?;
        Some(timed(&mut timings, "threshold", || threshold_maps(&maps, cfg.map_threshold))?)
    } else {
        None
    };

    Ok(GroupFit {
        n_sbj,
        order,
        decompositions,
        group,
        maps,
        timings_ms: timings,
    })
}
