//! Ranking metrics and multi-seed benchmarking.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, SplitMode};
use crate::error::{Error, Result};
use crate::models::{train, AnalyticDetector, Detector, Method, NonParamDetector, TrainConfig, DEFAULT_K};
use crate::scalar::Scalar;
use crate::schedule::DiffusionSchedule;

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (pos, labels.len() - pos)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok(())
}

/// 1-based ranks, ties get the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random anomaly outscores a random normal (ties count 1/2).
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC-ROC needs both normal and anomalous labels".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `sum_i (R_i - R_{i-1}) P_i` over distinct score
/// thresholds, highest first.
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Metric("AUC-PR needs at least one anomaly".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            tp += usize::from(labels[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// F1 after flagging the top-n scores, n = number of true anomalies. Ties at
/// the cut go to the lower row index.
pub fn f1_at_contamination(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::Metric("F1 needs at least one anomaly".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let tp = order[..pos].iter().filter(|&&i| labels[i] == 1).count() as f64;
    let (fp, fn_) = (pos as f64 - tp, pos as f64 - tp);
    Ok(2.0 * tp / (2.0 * tp + fp + fn_))
}

/// Spearman rank correlation (Pearson correlation of midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Metric("spearman needs two equally long series of length >= 2".into()));
    }
    let (rx, ry) = (midranks(x), midranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric("spearman undefined for a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<Self> {
        Ok(Self {
            auc_roc: auc_roc(scores, labels)?,
            auc_pr: auc_pr(scores, labels)?,
            f1: f1_at_contamination(scores, labels)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Wall-clock seconds; kept out of the JSON report so reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub train_seconds: f64,
    #[serde(skip)]
    pub score_seconds: f64,
    /// Row ids (into the source dataset) of the scored test rows.
    pub test_rows: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: Method,
    pub mode: SplitMode,
    pub per_seed: Vec<SeedResult>,
    pub mean: Metrics,
    /// Population standard deviation over seeds.
    pub std: Metrics,
    /// `std / sqrt(seeds)`.
    pub stderr: Metrics,
}

impl EvalReport {
    /// Aggregates per-seed results (sorted by seed first, so seed order on the
    /// command line does not matter).
    pub fn aggregate(dataset: &str, method: Method, mode: SplitMode, mut per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::config("a report needs at least one seed"));
        }
        per_seed.sort_by_key(|r| r.seed);
        let n = per_seed.len() as f64;
        let stat = |f: &dyn Fn(&Metrics) -> f64| {
            let mean = per_seed.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
            let var = per_seed.iter().map(|r| (f(&r.metrics) - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let (roc, pr, f1) = (stat(&|m| m.auc_roc), stat(&|m| m.auc_pr), stat(&|m| m.f1));
        let mean = Metrics { auc_roc: roc.0, auc_pr: pr.0, f1: f1.0 };
        let std = Metrics { auc_roc: roc.1, auc_pr: pr.1, f1: f1.1 };
        let se = n.sqrt();
        let stderr = Metrics { auc_roc: std.auc_roc / se, auc_pr: std.auc_pr / se, f1: std.f1 / se };
        Ok(Self { dataset: dataset.to_owned(), method, mode, per_seed, mean, std, stderr })
    }

    pub fn mean_train_seconds(&self) -> f64 {
        self.per_seed.iter().map(|r| r.train_seconds).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn mean_score_seconds(&self) -> f64 {
        self.per_seed.iter().map(|r| r.score_seconds).sum::<f64>() / self.per_seed.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// One row per seed: `seed,auc_roc,auc_pr,f1`.
    pub fn write_seed_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["seed", "auc_roc", "auc_pr", "f1"])?;
        for r in &self.per_seed {
            w.write_record([
                r.seed.to_string(),
                r.metrics.auc_roc.to_string(),
                r.metrics.auc_pr.to_string(),
                r.metrics.f1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Timing rows: `seed,train_seconds,score_seconds`.
    pub fn write_timing_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["seed", "train_seconds", "score_seconds"])?;
        for r in &self.per_seed {
            w.write_record([r.seed.to_string(), r.train_seconds.to_string(), r.score_seconds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Single row `method,mean_auc,mean_inference_time` for accuracy/latency
    /// scatter plots.
    pub fn write_speed_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "mean_auc", "mean_inference_time"])?;
        w.write_record([self.method.to_string(), self.mean.auc_roc.to_string(), self.mean_score_seconds().to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Everything a benchmark run needs besides the data.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub method: Method,
    pub mode: SplitMode,
    pub seeds: Vec<u64>,
    /// Training hyperparameters; `seed` is overridden per run seed. `timesteps`
    /// and `beta_hi` also define the analytic detector's grid.
    pub train: TrainConfig,
    pub k: usize,
    /// Seeds evaluated concurrently.
    pub jobs: usize,
}

impl BenchSettings {
    pub fn new(method: Method, mode: SplitMode, seeds: Vec<u64>) -> Self {
        Self { method, mode, seeds, train: TrainConfig::default(), k: DEFAULT_K, jobs: 1 }
    }
}

/// Split, fit and score a single seed.
pub fn run_seed<F: Scalar>(ds: &Dataset<F>, s: &BenchSettings, seed: u64) -> Result<SeedResult> {
    let sp = split(ds, s.mode, seed)?;
    let start = Instant::now();
    let detector: Box<dyn Detector<F>> = match s.method {
        Method::Analytic => Box::new(AnalyticDetector {
            train: sp.train.clone(),
            schedule: DiffusionSchedule::new(s.train.timesteps, s.train.beta_hi)?,
            standardizer: sp.standardizer.clone(),
        }),
        Method::Nonparam => Box::new(NonParamDetector::new(sp.train.clone(), s.k, sp.standardizer.clone())?),
        m => {
            let cfg = TrainConfig { seed, ..s.train.clone() };
            Box::new(train(m, &sp.train, sp.standardizer.clone(), &cfg)?)
        }
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let scores: Vec<f64> = detector.score_standardized(&sp.test)?.into_iter().map(Scalar::as_f64).collect();
    let score_seconds = start.elapsed().as_secs_f64();
    let metrics = Metrics::compute(&scores, &sp.test_labels)?;
    Ok(SeedResult { seed, metrics, train_seconds, score_seconds, test_rows: sp.test_rows, scores })
}

/// Runs every seed and aggregates. Any failing seed aborts the whole report.
pub fn run_benchmark<F: Scalar>(ds: &Dataset<F>, s: &BenchSettings) -> Result<EvalReport> {
    if s.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    let mut seeds = s.seeds.clone();
    seeds.sort_unstable();
    let jobs = s.jobs.max(1);
    let results: Vec<Result<SeedResult>> = if jobs == 1 {
        seeds.iter().map(|&seed| run_seed(ds, s, seed)).collect()
    } else {
        let mut out = Vec::with_capacity(seeds.len());
        for group in seeds.chunks(jobs) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = group.iter().map(|&seed| scope.spawn(move || run_seed(ds, s, seed))).collect();
                out.extend(handles.into_iter().map(|h| h.join().expect("benchmark worker panicked")));
            });
        }
        out
    };
    let per_seed = results
        .into_iter()
        .zip(&seeds)
        .map(|(r, seed)| r.map_err(|e| e.context(format!("{} on '{}', seed {seed}", s.method, ds.name))))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::aggregate(&ds.name, s.method, s.mode, per_seed)
}
