use std::collections::BTreeSet;

use attrmine::corpus::Clusters;
use attrmine::discovery::IterationReport;
use attrmine::pipeline::{self, PipelineConfig, RunOutput, SyntheticFiles, SyntheticSpec};
use tempfile::TempDir;

fn setup(spec: &SyntheticSpec, pretrain_steps: usize) -> (TempDir, SyntheticFiles, PipelineConfig) {
    let dir = tempfile::tempdir().unwrap();
    let files = pipeline::write_synthetic(dir.path().join("data"), spec).unwrap();
    let mut config = PipelineConfig::default();
    files.configure(&mut config);
    config.paths.workdir = dir.path().join("work");
    config.pretrain.steps = pretrain_steps;
    (dir, files, config)
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { types: 2, products: 400, seed: 4, ..SyntheticSpec::default() }
}

fn seeds_of(files: &SyntheticFiles) -> Clusters {
    serde_json::from_str(&std::fs::read_to_string(&files.seeds).unwrap()).unwrap()
}

fn check_prediction_sets(report: &IterationReport) {
    let mut types = BTreeSet::new();
    for set in &report.predictions {
        assert!(types.insert(set.product_type.clone()), "type {} predicted twice", set.product_type);
        for value in set.assigned.keys() {
            assert!(!set.noise.contains(value), "{value} is both clustered and noise");
        }
        for a in set.assigned.values() {
            assert!((0.0..=1.0).contains(&a.confidence));
            assert!(!a.cluster.is_empty());
        }
    }
}

fn check_seeds_kept(report: &IterationReport, seeds: &Clusters) {
    for (t, attrs) in seeds {
        for (a, values) in attrs {
            let kept = report
                .training_clusters
                .get(t)
                .and_then(|c| c.get(a))
                .unwrap_or_else(|| panic!("iteration {}: {t}/{a} missing", report.iteration));
            for v in values {
                assert!(kept.contains(v), "iteration {}: seed {v} dropped from {t}/{a}", report.iteration);
            }
        }
    }
}

fn predictions(out: &RunOutput) -> Vec<String> {
    out.reports.iter().map(|r| serde_json::to_string(&r.predictions).unwrap()).collect()
}

#[test]
fn single_iteration_makes_one_pass() {
    let (_dir, files, mut config) = setup(&small_spec(), 200);
    config.max_iter = 1;
    let out = pipeline::run(&config, false).unwrap();
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.iterations.len(), 1);
    let report = &out.reports[0];
    assert_eq!(report.change_rate, 1.0);
    check_prediction_sets(report);
    check_seeds_kept(report, &seeds_of(&files));
    assert!(out.iterations[0].ari.is_some());
}

#[test]
fn runs_are_deterministic_and_stop_early() {
    let (_dir, files, mut config) = setup(&small_spec(), 200);
    config.max_iter = 4;
    config.discovery.min_change = 0.9;
    let first = pipeline::run(&config, false).unwrap();
    let second = pipeline::run(&config, false).unwrap();
    assert_eq!(predictions(&first), predictions(&second));

    let rates: Vec<f64> = first.reports.iter().map(|r| r.change_rate).collect();
    let stop = rates
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, c)| **c < config.discovery.min_change)
        .map(|(i, _)| i + 1)
        .unwrap_or(config.max_iter);
    assert_eq!(first.reports.len(), stop, "change rates {rates:?}");
    let seeds = seeds_of(&files);
    for report in &first.reports {
        check_prediction_sets(report);
        check_seeds_kept(report, &seeds);
    }
}

#[test]
fn three_attribute_corpus_yields_few_clusters_per_type() {
    let spec = SyntheticSpec { attributes: 3, ..SyntheticSpec::default() };
    let (_dir, _files, mut config) = setup(&spec, PipelineConfig::default().pretrain.steps);
    config.max_iter = 2;
    config.discovery.min_change = 0.0;
    let out = pipeline::run(&config, false).unwrap();
    let last = out.reports.last().unwrap();
    assert_eq!(last.iteration, 2);
    for set in &last.predictions {
        let n = set.clusters().len();
        assert!((2..=4).contains(&n), "{} has {n} clusters", set.product_type);
    }
}
