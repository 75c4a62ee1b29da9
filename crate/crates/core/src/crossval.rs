//! Half-split reproducibility: fit each half of the subjects independently
//! and compare the resulting map sets.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{RunConfig, SubjectDataset};
use crate::error::{Error, Result};
use crate::metrics::{best_match_scores, cross_correlation, cross_correlation_lenient, MatchReport};
use crate::pipeline::{check_group, fit_group, select_order, GroupFit};
use crate::rng::{self, tag};

pub const DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub splits: Vec<(Vec<String>, Vec<String>)>,
    pub n_splits: usize,
    pub seed: u64,
}

/// Number of distinct unordered partitions into halves of sizes ⌊S/2⌋ and ⌈S/2⌉.
pub fn count_half_splits(n_subjects: usize) -> u128 {
    let k = n_subjects / 2;
    let mut c: u128 = 1;
    for i in 0..k as u128 {
        c = c.saturating_mul(n_subjects as u128 - i) / (i + 1);
    }
    if n_subjects % 2 == 0 {
        c / 2
    } else {
        c
    }
}

pub fn make_splits(subject_ids: &[String], n_splits: usize, seed: u64) -> Result<SplitPlan> {
    let s = subject_ids.len();
    if s < 4 {
        return Err(Error::Parameter(format!(
            "half-split cross-validation needs at least 4 subjects, got {s}"
        )));
    }
    if n_splits == 0 {
        return Err(Error::Parameter("n_splits must be positive".into()));
    }
    let available = count_half_splits(s);
    if n_splits as u128 > available {
        return Err(Error::Combinatorics { requested: n_splits, available });
    }
    let half = s / 2;
    let mut rng = rng::stream(seed, &[tag::SPLITS]);
    let mut seen = BTreeSet::new();
    let mut splits = Vec::with_capacity(n_splits);
    let mut order: Vec<usize> = (0..s).collect();
    while splits.len() < n_splits {
        order.shuffle(&mut rng);
        let mut first: Vec<usize> = order[..half].to_vec();
        first.sort_unstable();
        // with equal halves, the one holding subject 0 comes first
        if s % 2 == 0 && first[0] != 0 {
            first = (0..s).filter(|i| !first.contains(i)).collect();
        }
        if !seen.insert(first.clone()) {
            continue;
        }
        let second: Vec<usize> = (0..s).filter(|i| !first.contains(i)).collect();
        let names = |idx: &[usize]| idx.iter().map(|&i| subject_ids[i].clone()).collect();
        splits.push((names(&first), names(&second)));
    }
    Ok(SplitPlan { splits, n_splits, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub index: usize,
    pub n_grp: [usize; 2],
    pub converged: [bool; 2],
    /// Either half produced no component; metrics are undefined.
    pub excluded: bool,
    pub unthresholded: Option<MatchReport>,
    pub thresholded: Option<MatchReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_e: Option<f64>,
    pub sd_e: Option<f64>,
    pub mean_t: Option<f64>,
    pub sd_t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_e: Option<f64>,
    pub sd_e: Option<f64>,
    pub mean_t: Option<f64>,
    pub sd_t: Option<f64>,
    pub thresholded: MetricSummary,
    pub n_included: usize,
    pub n_excluded: usize,
    pub n_nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproducibilityReport {
    pub config: RunConfig,
    pub plan: SplitPlan,
    pub n_sbj: usize,
    pub full_n_grp: usize,
    pub per_split: Vec<SplitOutcome>,
    pub summary: Summary,
    /// Per full-group map, best-match |correlation| averaged over all split halves.
    pub per_map_score: Vec<f64>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(sd))
}

fn summarize(reports: &[&MatchReport]) -> MetricSummary {
    let e: Vec<f64> = reports.iter().map(|r| r.e).collect();
    let t: Vec<f64> = reports.iter().map(|r| r.t).collect();
    let (mean_e, sd_e) = mean_sd(&e);
    let (mean_t, sd_t) = mean_sd(&t);
    MetricSummary { mean_e, sd_e, mean_t, sd_t }
}

/// Recompute the summary from per-split outcomes.
pub fn summarize_splits(per_split: &[SplitOutcome]) -> Summary {
    let un: Vec<&MatchReport> = per_split.iter().filter_map(|o| o.unthresholded.as_ref()).collect();
    let th: Vec<&MatchReport> = per_split.iter().filter_map(|o| o.thresholded.as_ref()).collect();
    let u = summarize(&un);
    Summary {
        mean_e: u.mean_e,
        sd_e: u.sd_e,
        mean_t: u.mean_t,
        sd_t: u.sd_t,
        thresholded: summarize(&th),
        n_included: un.len(),
        n_excluded: per_split.iter().filter(|o| o.excluded).count(),
        n_nonconverged: per_split
            .iter()
            .map(|o| o.converged.iter().filter(|c| !**c).count())
            .sum(),
    }
}

fn converged(fit: &GroupFit) -> bool {
    fit.maps.as_ref().map(|m| m.converged).unwrap_or(true)
}

pub fn run_crossval(datasets: &[SubjectDataset], config: &RunConfig, plan: &SplitPlan) -> Result<ReproducibilityReport> {
    config.validate()?;
    let mut sorted: Vec<&SubjectDataset> = datasets.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    if sorted.windows(2).any(|w| w[0].subject_id == w[1].subject_id) {
        return Err(Error::Parameter("subject ids must be unique".into()));
    }
    let sorted: Vec<SubjectDataset> = sorted.into_iter().cloned().collect();
    check_group(&sorted)?;
    let by_id: HashMap<&str, &SubjectDataset> = sorted.iter().map(|d| (d.subject_id.as_str(), d)).collect();

    let n_sbj = match config.n_sbj {
        Some(n) => n,
        None => select_order(&sorted, config)?.n_sbj,
    };
    let cfg = RunConfig { n_sbj: Some(n_sbj), ..config.clone() };

    let full = fit_group(&sorted, &cfg)?;
    let full_maps = full.maps.as_ref().map(|m| m.maps.clone());

    let gather = |ids: &[String]| -> Result<Vec<SubjectDataset>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|d| (*d).clone())
                    .ok_or_else(|| Error::Parameter(format!("split references unknown subject {id}")))
            })
            .collect()
    };

    let halves: Vec<(GroupFit, GroupFit)> = plan
        .splits
        .par_iter()
        .map(|(a, b)| Ok((fit_group(&gather(a)?, &cfg)?, fit_group(&gather(b)?, &cfg)?)))
        .collect::<Result<_>>()?;

    let mut per_split = Vec::with_capacity(halves.len());
    let mut best_scores: Vec<Vec<f64>> = Vec::new();
    for (index, (fa, fb)) in halves.iter().enumerate() {
        let outcome = match (&fa.maps, &fb.maps) {
            (Some(ma), Some(mb)) => SplitOutcome {
                index,
                n_grp: [fa.group.n_grp, fb.group.n_grp],
                converged: [converged(fa), converged(fb)],
                excluded: false,
                unthresholded: Some(MatchReport::from_correlation(cross_correlation(&ma.maps, &mb.maps)?)?),
                thresholded: Some(MatchReport::from_correlation(cross_correlation_lenient(
                    &ma.thresholded(),
                    &mb.thresholded(),
                )?)?),
            },
            _ => SplitOutcome {
                index,
                n_grp: [fa.group.n_grp, fb.group.n_grp],
                converged: [converged(fa), converged(fb)],
                excluded: true,
                unthresholded: None,
                thresholded: None,
            },
        };
        per_split.push(outcome);
        if let Some(reference) = &full_maps {
            for half in [fa, fb] {
                if let Some(m) = &half.maps {
                    best_scores.push(best_match_scores(reference, &m.maps)?);
                }
            }
        }
    }

    let per_map_score = match &full_maps {
        Some(reference) if !best_scores.is_empty() => (0..reference.nrows())
            .map(|i| best_scores.iter().map(|s| s[i]).sum::<f64>() / best_scores.len() as f64)
            .collect(),
        Some(reference) => vec![0.0; reference.nrows()],
        None => Vec::new(),
    };

    Ok(ReproducibilityReport {
        config: cfg,
        plan: plan.clone(),
        n_sbj,
        full_n_grp: full.group.n_grp,
        summary: summarize_splits(&per_split),
        per_split,
        per_map_score,
    })
}
