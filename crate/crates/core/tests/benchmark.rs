use dtpm::data::SplitMode;
use dtpm::evaluation::{run_benchmark, BenchSettings};
use dtpm::models::{Method, TrainConfig};
use dtpm::synthetic::TwoClusterConfig;
use dtpm::Dataset;

fn toy(dim: usize, inliers: usize) -> Dataset {
    TwoClusterConfig { dim, inliers, ..Default::default() }.generate().unwrap()
}

fn quick(method: Method, seeds: Vec<u64>) -> BenchSettings {
    let mut s = BenchSettings::new(method, SplitMode::Semi, seeds);
    s.train = TrainConfig { hidden: vec![16, 16], epochs: 2, batch_size: 32, lr: 1e-3, ..TrainConfig::default() };
    s
}

#[test]
fn nonparam_separates_toy_three_dimensional_outliers() {
    let r = run_benchmark(&toy(3, 1000), &BenchSettings::new(Method::Nonparam, SplitMode::Semi, vec![0])).unwrap();
    assert!(r.mean.auc_roc >= 0.95, "{}", r.mean.auc_roc);
}

#[test]
fn analytic_detector_ranks_outliers() {
    let r = run_benchmark(&toy(3, 300), &BenchSettings::new(Method::Analytic, SplitMode::Semi, vec![0, 1])).unwrap();
    assert!(r.mean.auc_roc >= 0.9, "{}", r.mean.auc_roc);
}

#[test]
fn single_seed_has_zero_spread() {
    let r = run_benchmark(&toy(3, 200), &BenchSettings::new(Method::Nonparam, SplitMode::Semi, vec![4])).unwrap();
    assert_eq!(r.std.auc_roc, 0.0);
    assert_eq!(r.stderr.auc_pr, 0.0);
    assert_eq!(r.mean, r.per_seed[0].metrics);
}

#[test]
fn repeated_runs_and_seed_order_give_identical_reports() {
    let ds = toy(4, 200);
    for method in Method::ALL {
        let a = run_benchmark(&ds, &quick(method, vec![0, 1, 2])).unwrap();
        let b = run_benchmark(&ds, &quick(method, vec![2, 0, 1])).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{method}");
        let mut threaded = quick(method, vec![1, 2, 0]);
        threaded.jobs = 2;
        assert_eq!(a.to_json().unwrap(), run_benchmark(&ds, &threaded).unwrap().to_json().unwrap(), "{method}");
        assert_eq!(a.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}

#[test]
fn unsupervised_mode_scores_every_row() {
    let ds = toy(3, 200);
    let mut s = BenchSettings::new(Method::Nonparam, SplitMode::Unsup, vec![0]);
    s.k = 8;
    let r = run_benchmark(&ds, &s).unwrap();
    assert_eq!(r.per_seed[0].scores.len(), ds.len());
    assert!(r.mean.auc_roc > 0.8);
}

#[test]
fn configuration_errors_surface() {
    let ds = toy(3, 50);
    let empty = BenchSettings::new(Method::Nonparam, SplitMode::Semi, vec![]);
    assert!(matches!(run_benchmark(&ds, &empty), Err(dtpm::Error::Config(_))));
    let mut big_k = BenchSettings::new(Method::Nonparam, SplitMode::Semi, vec![0]);
    big_k.k = 10_000;
    let err = run_benchmark(&ds, &big_k).unwrap_err();
    assert!(matches!(err, dtpm::Error::Config(_)));
    assert!(err.to_string().contains("seed 0"), "{err}");
}

#[test]
fn report_writers() {
    let r = run_benchmark(&toy(3, 100), &quick(Method::Nonparam, vec![0, 1])).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    r.write_json(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["dataset", "method", "mode", "per_seed", "mean", "std", "stderr"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["method"], "nonparam");
    assert!(v["per_seed"][0].get("train_seconds").is_none());

    let mut seeds = Vec::new();
    r.write_seed_csv(&mut seeds).unwrap();
    let seeds = String::from_utf8(seeds).unwrap();
    assert_eq!(seeds.lines().count(), 3);
    assert!(seeds.starts_with("seed,"));

    let mut speed = Vec::new();
    r.write_speed_csv(&mut speed).unwrap();
    assert!(String::from_utf8(speed).unwrap().starts_with("method,mean_auc,mean_inference_time\nnonparam,"));
}
