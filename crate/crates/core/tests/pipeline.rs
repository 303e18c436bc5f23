use std::fs;
use std::path::{Path, PathBuf};

use pdgcl::harness::{self, ExperimentSpec, SweepAxis};
use pdgcl::train::Method;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// A spec small enough to run in a second or two.
fn tiny(out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        methods: vec![Method::Pdg],
        holdouts: vec![150],
        seeds: vec![1, 2],
        steps_per_env: 3,
        eval_every: 5,
        train_images: 400,
        test_images: 60,
        data_dir: data_dir(),
        out_dir: out.to_path_buf(),
        jobs: 2,
        ..ExperimentSpec::default()
    };
    spec.apply_text("batch_size = 32\nmemory_batch = 8\nrisk_batch = 8\nmemory_capacity = 50\nhidden = 16")
        .unwrap();
    spec
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn two_seeds_make_two_runs_and_one_summary() {
    let dir = tempfile::tempdir().unwrap();
    let table = harness::run(&tiny(dir.path())).unwrap();
    assert_eq!(listing(dir.path()), ["pdg_h150_s1.csv", "pdg_h150_s2.csv", "summary.csv"]);
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].seeds, vec![1, 2]);

    // 18 updates, evaluated at 5, 10, 15 and 18.
    let csv = fs::read_to_string(dir.path().join("pdg_h150_s1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 18);
    let evaluated: Vec<&str> = csv
        .lines()
        .skip(1)
        .filter(|l| !l.split(',').nth(1).unwrap().is_empty())
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(evaluated, ["5", "10", "15", "18"]);
}

#[test]
fn identical_specs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run(&tiny(a.path())).unwrap();
    let mut spec = tiny(b.path());
    spec.jobs = 1;
    harness::run(&spec).unwrap();
    for name in listing(a.path()) {
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn summary_matches_recomputation_from_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.methods = vec![Method::Pdg, Method::Er];
    spec.seeds = vec![3, 4, 5];
    let table = harness::run(&spec).unwrap();
    for row in &table.rows {
        let finals: Vec<(f64, f64, f64)> = row
            .seeds
            .iter()
            .map(|s| {
                let p = dir.path().join(format!("{}_h150_s{s}.csv", row.method));
                harness::final_metrics_from_csv(&fs::read_to_string(p).unwrap()).unwrap()
            })
            .collect();
        let avg: Vec<f64> = finals.iter().map(|f| f.0).collect();
        let target: Vec<f64> = finals.iter().map(|f| f.1).collect();
        let memo: Vec<f64> = finals.iter().map(|f| f.2).collect();
        assert_eq!(row.avg, harness::mean_std(&avg));
        assert_eq!(row.target, harness::mean_std(&target));
        assert_eq!(row.memorization, harness::mean_std(&memo));
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary, table.summary_csv());
}

#[test]
fn missing_data_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut spec = tiny(&out);
    spec.data_dir = dir.path().join("nowhere");
    assert!(harness::run(&spec).is_err());
    assert!(!out.exists());

    let mut spec = tiny(&out);
    spec.holdouts = vec![10];
    assert!(harness::run(&spec).is_err());
    assert!(!out.exists());
}

#[test]
fn sweep_runs_emit_plot_series() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = tiny(dir.path());
    spec.seeds = vec![1];
    spec.sweep = SweepAxis::Memory;
    spec.sweep_values = vec![40.0, 10.0];
    let table = harness::run(&spec).unwrap();
    assert_eq!(table.rows.len(), 2);
    let plots = dir.path().join("plots");
    let written = harness::emit_plot_data(&table, SweepAxis::Memory, &plots, true).unwrap();
    assert_eq!(written.len(), 3 + 3);
    let target = fs::read_to_string(plots.join("series_target_pdg_h150.csv")).unwrap();
    let xs: Vec<&str> = target.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(xs, ["10", "40"]);
    assert!(harness::emit_plot_data(&table, SweepAxis::Alpha, &plots, false).is_err());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "cfg") {
            let spec = ExperimentSpec::from_file(&path).unwrap();
            spec.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
