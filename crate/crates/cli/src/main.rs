//! Batch front end for the canonical ICA pipeline.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 3 on a
//! numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use canica::crossval::{make_splits, run_crossval, DEFAULT_SPLITS};
use canica::dataio::{self, load_matrix, load_subjects, to_canonical_json, write_json, RunConfig};
use canica::metrics::{cross_correlation_lenient, MatchReport};
use canica::model_order::{estimate_order, OrderEstimate};
use canica::pipeline::{fit_group, DEFAULT_MAX_ORDER};
use canica::synth::{generate_group, SynthSpec};
use canica::{Error, SubjectDataset};

/// Report fields that vary between otherwise identical runs.
pub const NONDETERMINISTIC_FIELDS: &[&str] = &["timings_ms"];

#[derive(Parser)]
#[command(name = "canica", version, about = "Multi-subject canonical ICA")]
struct Cli {
    /// Worker threads for per-subject, per-replicate and per-split work.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use variance-weighted subject patterns instead of CCA.
    #[arg(long)]
    no_cca: bool,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit group components from `<DATA_DIR>/sub-*.canmat`.
    Fit {
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Half-split reproducibility of the group components.
    Crossval {
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SPLITS)]
        splits: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate a synthetic group from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the subject-level order of one subject matrix.
    Order {
        subject: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare two map matrices.
    Metrics {
        maps_a: PathBuf,
        maps_b: PathBuf,
        /// Zero voxels with |value| ≤ threshold before comparing.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn load_config(path: Option<&Path>) -> canica::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply(overrides: &Overrides) -> canica::Result<RunConfig> {
    let mut cfg = load_config(overrides.config.as_deref())?;
    if let Some(seed) = overrides.seed {
        cfg.rng_seed = seed;
    }
    if overrides.no_cca {
        cfg.use_cca = false;
    }
    if let Some(t) = overrides.threshold {
        cfg.map_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> canica::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

#[derive(Serialize)]
struct IcaSummary {
    converged: bool,
    n_iterations: usize,
    threshold: f64,
    support_sizes: Vec<usize>,
}

#[derive(Serialize)]
struct RunReport {
    status: &'static str,
    error: Option<String>,
    config: Option<RunConfig>,
    subject_ids: Vec<String>,
    n_sbj: Option<usize>,
    order: Option<OrderEstimate>,
    canonical_correlations: Vec<f64>,
    z_threshold: Option<f64>,
    n_grp: Option<usize>,
    used_cca: Option<bool>,
    ica: Option<IcaSummary>,
    /// Output files, relative to the output directory.
    outputs: Vec<String>,
    timings_ms: std::collections::BTreeMap<String, f64>,
}

impl RunReport {
    fn failed(err: &Error, config: Option<RunConfig>) -> Self {
        RunReport {
            status: "error",
            error: Some(err.to_string()),
            config,
            subject_ids: Vec::new(),
            n_sbj: None,
            order: None,
            canonical_correlations: Vec::new(),
            z_threshold: None,
            n_grp: None,
            used_cca: None,
            ica: None,
            outputs: Vec::new(),
            timings_ms: Default::default(),
        }
    }
}

fn fit_subjects(datasets: &[SubjectDataset], cfg: &RunConfig, out: &Path) -> canica::Result<RunReport> {
    let fit = fit_group(datasets, cfg)?;
    let mut outputs = Vec::new();
    fit.group.save(out)?;
    outputs.extend(
        ["group_model.json", "group_patterns.canmat", "canonical_weights.canmat"]
            .iter()
            .chain(&["canonical_correlations.canmat", "stack_singular_values.canmat"])
            .map(|s| s.to_string()),
    );
    let ica = match &fit.maps {
        Some(maps) => {
            maps.save(out)?;
            outputs.extend(
                ["component_maps.json", "maps.canmat", "mixing.canmat", "rotation.canmat"]
                    .iter()
                    .map(|s| s.to_string()),
            );
            Some(IcaSummary {
                converged: maps.converged,
                n_iterations: maps.n_iterations,
                threshold: maps.threshold,
                support_sizes: maps.supports.iter().map(Vec::len).collect(),
            })
        }
        None => None,
    };
    outputs.push("report.json".into());
    Ok(RunReport {
        status: "ok",
        error: None,
        config: Some(cfg.clone()),
        subject_ids: datasets.iter().map(|d| d.subject_id.clone()).collect(),
        n_sbj: Some(fit.n_sbj),
        order: fit.order,
        canonical_correlations: fit.group.canonical_correlations.iter().copied().collect(),
        z_threshold: fit.group.z_threshold,
        n_grp: Some(fit.group.n_grp),
        used_cca: Some(fit.group.used_cca),
        ica,
        outputs,
        timings_ms: fit.timings_ms,
    })
}

fn cmd_fit(data_dir: &Path, out: &Path, overrides: &Overrides) -> canica::Result<()> {
    create_dir(out)?;
    let mut cfg = None;
    let result = apply(overrides).and_then(|c| {
        cfg = Some(c.clone());
        let datasets = load_subjects(data_dir)?;
        fit_subjects(&datasets, &c, out)
    });
    match result {
        Ok(report) => {
            write_json(&out.join("report.json"), &report)?;
            println!(
                "n_sbj = {}, n_grp = {}, z_threshold = {}",
                report.n_sbj.unwrap_or(0),
                report.n_grp.unwrap_or(0),
                report.z_threshold.map_or("none".into(), |z| format!("{z:.6}"))
            );
            Ok(())
        }
        Err(err) => {
            let _ = write_json(&out.join("report.json"), &RunReport::failed(&err, cfg));
            Err(err)
        }
    }
}

fn cmd_crossval(data_dir: &Path, out: &Path, splits: usize, overrides: &Overrides) -> canica::Result<()> {
    create_dir(out)?;
    let cfg = apply(overrides)?;
    let datasets = load_subjects(data_dir)?;
    let mut ids: Vec<String> = datasets.iter().map(|d| d.subject_id.clone()).collect();
    ids.sort();
    let plan = make_splits(&ids, splits, cfg.rng_seed)?;
    let report = run_crossval(&datasets, &cfg, &plan)?;
    write_json(&out.join("crossval_report.json"), &report)?;
    let s = &report.summary;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "mean_e = {}, mean_t = {}, thresholded mean_t = {}, included splits = {}/{}",
        fmt(s.mean_e),
        fmt(s.mean_t),
        fmt(s.thresholded.mean_t),
        s.n_included,
        report.per_split.len()
    );
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path) -> canica::Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Io { path: spec_path.to_path_buf(), source: e })?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let group = generate_group(&spec)?;
    create_dir(out)?;
    for warning in &group.warnings {
        eprintln!("warning: {warning}");
    }
    let mut files = Vec::new();
    for ds in &group.datasets {
        let name = format!("{}.canmat", ds.subject_id);
        dataio::save_matrix(out.join(&name), &ds.data)?;
        files.push(name);
    }
    group.truth.save(out, &spec)?;
    let summary = serde_json::json!({ "subjects": files, "ground_truth": "ground_truth.json", "warnings": group.warnings });
    print!("{}", to_canonical_json(&summary)?);
    Ok(())
}

fn cmd_order(subject: &Path, config: Option<&Path>, seed: Option<u64>) -> canica::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let id = subject.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ds = SubjectDataset::new(id, &load_matrix(subject)?)?;
    let limit = ds.n_frames().min(ds.n_voxels()).saturating_sub(1);
    let max_order = cfg.max_order.unwrap_or(DEFAULT_MAX_ORDER.min(limit));
    let est = estimate_order(&ds, max_order, cfg.order_replicates, cfg.rng_seed)?;
    print!("{}", to_canonical_json(&est)?);
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path, threshold: Option<f64>) -> canica::Result<()> {
    let (mut ma, mut mb) = (load_matrix(a)?, load_matrix(b)?);
    let report = match threshold {
        Some(t) if t >= 0.0 => {
            for m in [&mut ma, &mut mb] {
                m.apply(|v| {
                    if v.abs() <= t {
                        *v = 0.0
                    }
                });
            }
            MatchReport::from_correlation(cross_correlation_lenient(&ma, &mb)?)?
        }
        Some(t) => return Err(Error::Parameter(format!("threshold must be ≥ 0, got {t}"))),
        None => MatchReport::compare(&ma, &mb)?,
    };
    print!("{}", to_canonical_json(&report)?);
    Ok(())
}

fn run(cli: Cli) -> canica::Result<()> {
    match &cli.command {
        Command::Fit { data_dir, out, overrides } => cmd_fit(data_dir, out, overrides),
        Command::Crossval { data_dir, out, splits, overrides } => cmd_crossval(data_dir, out, *splits, overrides),
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Order { subject, config, seed } => cmd_order(subject, config.as_deref(), *seed),
        Command::Metrics { maps_a, maps_b, threshold } => cmd_metrics(maps_a, maps_b, *threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = err.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(if err.is_numerical() { 3 } else { 2 })
        }
    }
}
