use canica::crossval::{make_splits, run_crossval};
use canica::metrics::best_match_scores;
use canica::pipeline::fit_group;
use canica::synth::{generate_group, SynthSpec};
use canica::{Error, RunConfig, SubjectDataset};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec { n_subjects: 6, n_grp: 3, n_sbj: 4, n_frames: 60, n_voxels: 800, seed, ..Default::default() }
}

fn recovery(spec: &SynthSpec, cfg: &RunConfig) -> f64 {
    let group = generate_group(spec).unwrap();
    let fit = fit_group(&group.datasets, cfg).unwrap();
    match fit.maps {
        Some(maps) => {
            let scores = best_match_scores(&group.truth.sources, &maps.maps).unwrap();
            scores.iter().sum::<f64>() / scores.len() as f64
        }
        None => 0.0,
    }
}

#[test]
fn recovery_degrades_with_observation_noise() {
    let cfg = RunConfig { n_sbj: Some(8), n_bootstrap: 200, ..Default::default() };
    let means: Vec<f64> = [5.0, 8.0, 12.0]
        .iter()
        .map(|&noise_scale| {
            (0..20u64)
                .map(|seed| recovery(&SynthSpec { noise_scale, seed, ..Default::default() }, &cfg))
                .sum::<f64>()
                / 20.0
        })
        .collect();
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn fit_reports_every_stage() {
    let group = generate_group(&small_spec(3)).unwrap();
    let cfg = RunConfig { n_bootstrap: 200, max_order: Some(8), order_replicates: 20, ..Default::default() };
    let fit = fit_group(&group.datasets, &cfg).unwrap();
    assert!(fit.order.is_some());
    assert!(fit.n_sbj >= 1);
    for stage in ["model_order", "subject_svd", "group_cca", "ica", "threshold"] {
        assert!(fit.timings_ms.contains_key(stage), "{stage} missing");
    }
    let maps = fit.maps.unwrap();
    assert_eq!(maps.n_components(), fit.group.n_grp);
    assert_eq!(maps.threshold, 3.0);
}

#[test]
fn bad_group_inputs() {
    let group = generate_group(&small_spec(1)).unwrap();
    let cfg = RunConfig { n_sbj: Some(4), n_bootstrap: 100, ..Default::default() };
    match fit_group(&group.datasets[..1], &cfg) {
        Err(e @ Error::InsufficientSubjects(1)) => assert!(e.to_string().contains("at least 2 subjects required")),
        other => panic!("{other:?}"),
    }
    let mut mixed = group.datasets.clone();
    mixed[1] = SubjectDataset::new("short", &mixed[1].data.columns(0, 700).into_owned()).unwrap();
    assert!(matches!(fit_group(&mixed, &cfg), Err(Error::Dimension(_))));
    let cfg = RunConfig { n_sbj: None, order_subject: 9, ..cfg };
    assert!(matches!(fit_group(&group.datasets, &cfg), Err(Error::Config(_))));
}

#[test]
fn identical_halves_reproduce_exactly() {
    let group = generate_group(&small_spec(5)).unwrap();
    let copies: Vec<SubjectDataset> = (0..4)
        .map(|i| SubjectDataset { subject_id: format!("copy-{i}"), ..group.datasets[0].clone() })
        .collect();
    let ids: Vec<String> = copies.iter().map(|d| d.subject_id.clone()).collect();
    let plan = make_splits(&ids, 3, 0).unwrap();
    let cfg = RunConfig { n_sbj: Some(4), n_grp: Some(3), n_bootstrap: 100, ..Default::default() };
    let report = run_crossval(&copies, &cfg, &plan).unwrap();
    assert_eq!(report.summary.n_included, 3);
    assert!(report.summary.mean_t.unwrap() >= 0.95);
    assert!((report.summary.mean_e.unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn crossval_ignores_input_order() {
    let group = generate_group(&small_spec(7)).unwrap();
    let ids: Vec<String> = group.datasets.iter().map(|d| d.subject_id.clone()).collect();
    let plan = make_splits(&ids, 4, 3).unwrap();
    let cfg = RunConfig { n_sbj: Some(4), n_bootstrap: 100, ..Default::default() };
    let a = run_crossval(&group.datasets, &cfg, &plan).unwrap();
    let mut reversed = group.datasets.clone();
    reversed.reverse();
    let b = run_crossval(&reversed, &cfg, &plan).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_split.len(), 4);
    assert_eq!(a.per_map_score.len(), a.full_n_grp);
}

#[test]
fn too_many_splits() {
    let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
    assert!(matches!(make_splits(&ids, 4, 0), Err(Error::Combinatorics { requested: 4, available: 3 })));
}
