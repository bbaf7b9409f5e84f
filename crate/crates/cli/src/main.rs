//! `dtpm` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration error (including bad flags),
//! 3 data or I/O error, 4 numeric error. Progress goes to stderr; results are
//! written only to the files named by `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dtpm::data::{load_csv, load_features_csv, split, SplitMode, DEFAULT_MAX_ROWS};
use dtpm::evaluation::{run_benchmark, BenchSettings};
use dtpm::models::{
    denoise, Detector, Method, TrainConfig, DEFAULT_BINS, DEFAULT_DENOISE_STEP, DEFAULT_DENOISE_STEPS, DEFAULT_K,
};
use dtpm::schedule::{DEFAULT_BETA_HI, DEFAULT_TIMESTEPS};
use dtpm::{Dataset, Error, Model, Result};

#[derive(Parser)]
#[command(name = "dtpm", version, about = "Diffusion-time anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a parametric model on the training split and save it as JSON.
    Train(TrainArgs),
    /// Score every row of a CSV with a saved model.
    Score(ScoreArgs),
    /// Run a multi-seed benchmark and write the report.
    Bench(BenchArgs),
    /// Move one row toward the data by gradient descent on its score.
    Denoise(DenoiseArgs),
    /// Benchmark once per value of a single swept hyperparameter.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Headered CSV with numeric features and a 0/1 `label` column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = SplitMode::Semi)]
    mode: SplitMode,
    /// Larger datasets are subsampled to this many rows.
    #[arg(long, default_value_t = DEFAULT_MAX_ROWS)]
    max_rows: usize,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = DEFAULT_TIMESTEPS)]
    timesteps: usize,
    #[arg(long, default_value_t = DEFAULT_BETA_HI)]
    beta_hi: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Neighbors for the non-parametric detector.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "256,512,256")]
    hidden: Vec<usize>,
}

impl HyperArgs {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            timesteps: self.timesteps,
            beta_hi: self.beta_hi,
            bins: self.bins,
            seed,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `invgamma` or `categorical`.
    #[arg(long)]
    method: Method,
    #[arg(long, env = "DTPM_SEED", default_value_t = 0)]
    seed: u64,
    /// Model JSON to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of rows to score; a `label` column is ignored if present.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV with columns `row_id,score`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    method: Method,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Directory for report.json, per_seed.csv, timing.csv and speed.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based index of the row to denoise.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value_t = DEFAULT_DENOISE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_DENOISE_STEP)]
    step_size: f64,
    /// Trajectory CSV with columns `step,score,<features>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("sweep").required(true).multiple(false)))]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    method: Method,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_delimiter = ',', group = "sweep")]
    sweep_bins: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', group = "sweep")]
    sweep_timesteps: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', group = "sweep")]
    sweep_k: Option<Vec<usize>>,
    /// Output CSV with columns `setting,mean_auc`, sorted by setting.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Index(_) => 2,
        Error::Numeric(_) | Error::Domain(_) => 4,
        _ => 3,
    }
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let ds = load_csv(&args.data)?;
    let capped = ds.capped(args.max_rows);
    if capped.len() < ds.len() {
        eprintln!("capped {} from {} to {} rows", ds.name, ds.len(), capped.len());
    }
    eprintln!("loaded {}: {} rows, {} features, {} anomalies", capped.name, capped.len(), capped.dim(), capped.anomaly_count());
    Ok(capped)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if !args.method.is_parametric() {
        return Err(Error::Config(format!("'{}' has nothing to train; use invgamma or categorical", args.method)));
    }
    let cfg = args.hyper.train_config(args.seed);
    cfg.validate()?;
    let ds = load_dataset(&args.data)?;
    let sp = split(&ds, args.data.mode, args.seed)?;
    let start = Instant::now();
    let model = dtpm::train(args.method, &sp.train, sp.standardizer.clone(), &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    create_parent(&args.out)?;
    model.save(&args.out)?;
    eprintln!(
        "trained {} on {} rows: final loss {:.6}, {secs:.2} s, wrote {}",
        args.method,
        sp.train.rows(),
        model.final_loss().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let (_, x) = load_features_csv(&args.data)?;
    let scores = model.score_batch(&x)?;
    create_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["row_id", "score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])?;
    }
    w.flush()?;
    eprintln!("scored {} rows with {}, wrote {}", scores.len(), model.method(), args.out.display());
    Ok(())
}

fn bench_settings(method: Method, mode: SplitMode, seeds: Vec<u64>, jobs: usize, hyper: &HyperArgs) -> Result<BenchSettings> {
    let mut s = BenchSettings::new(method, mode, seeds);
    s.train = hyper.train_config(0);
    s.train.validate()?;
    s.k = hyper.k;
    s.jobs = jobs;
    Ok(s)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let ds = load_dataset(&args.data)?;
    let s = bench_settings(args.method, args.data.mode, args.seeds, args.jobs, &args.hyper)?;
    let start = Instant::now();
    let report = run_benchmark(&ds, &s)?;
    fs::create_dir_all(&args.out)?;
    report.write_json(args.out.join("report.json"))?;
    report.write_seed_csv(fs::File::create(args.out.join("per_seed.csv"))?)?;
    report.write_timing_csv(fs::File::create(args.out.join("timing.csv"))?)?;
    report.write_speed_csv(fs::File::create(args.out.join("speed.csv"))?)?;
    eprintln!(
        "{} on {} ({}, {} seeds): AUC-ROC {:.4} +/- {:.4}, AUC-PR {:.4}, F1 {:.4} in {:.1} s",
        args.method,
        ds.name,
        args.data.mode,
        report.per_seed.len(),
        report.mean.auc_roc,
        report.std.auc_roc,
        report.mean.auc_pr,
        report.mean.f1,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_denoise(args: DenoiseArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let (names, x) = load_features_csv(&args.data)?;
    if args.row >= x.rows() {
        return Err(Error::Config(format!("row {} out of range for {} rows", args.row, x.rows())));
    }
    let traj = denoise(&model, x.row(args.row), args.steps, args.step_size)?;
    create_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    let mut header = vec!["step".to_owned(), "score".to_owned()];
    header.extend(names);
    w.write_record(&header)?;
    for (i, (p, s)) in traj.points.iter().zip(&traj.scores).enumerate() {
        let mut rec = vec![i.to_string(), s.to_string()];
        rec.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!(
        "denoised row {}: score {:.4} -> {:.4} over {} iterates ({:?})",
        args.row,
        traj.scores[0],
        traj.scores[traj.scores.len() - 1],
        traj.scores.len(),
        traj.stop
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (name, mut values) = match (args.sweep_bins, args.sweep_timesteps, args.sweep_k) {
        (Some(v), None, None) => ("bins", v),
        (None, Some(v), None) => ("timesteps", v),
        (None, None, Some(v)) => ("k", v),
        _ => return Err(Error::Config("sweep exactly one of --sweep-bins, --sweep-timesteps, --sweep-k".into())),
    };
    let applies = match name {
        "bins" => args.method == Method::Categorical,
        "k" => args.method == Method::Nonparam,
        _ => args.method != Method::Nonparam,
    };
    if !applies {
        return Err(Error::Config(format!("sweeping {name} has no effect on method '{}'", args.method)));
    }
    values.sort_unstable();
    values.dedup();
    let ds = load_dataset(&args.data)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in &values {
        let mut hyper = args.hyper.clone();
        match name {
            "bins" => hyper.bins = v,
            "timesteps" => hyper.timesteps = v,
            _ => hyper.k = v,
        }
        let s = bench_settings(args.method, args.data.mode, args.seeds.clone(), args.jobs, &hyper)?;
        let report = run_benchmark(&ds, &s).map_err(|e| e.context(format!("{name} = {v}")))?;
        eprintln!("{name} = {v}: mean AUC-ROC {:.4}", report.mean.auc_roc);
        rows.push((v, report.mean.auc_roc));
    }
    create_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["setting", "mean_auc"])?;
    for (v, auc) in rows {
        w.write_record([v.to_string(), auc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
