//! Diffusion-time detectors.
//!
//! Two trained variants share one training loop: for each shuffled mini-batch
//! draw a timestep `t ~ U{0..T-1}` and noise `eps ~ N(0, I)` per row, form
//! `x_t = x_0 + sigma_t eps`, and fit the network to the timestep.
//!
//! - [`InvGammaModel`] predicts the inverse-Gamma scale `b` and minimizes the
//!   negative log-likelihood `-(a ln b - (a+1) ln sigma^2 - b / sigma^2)`.
//!   Its anomaly score is the posterior mode `b / (a + 1)`.
//! - [`CategoricalModel`] predicts a distribution over `B` timestep bins with
//!   cross-entropy. Its score is the expected bin index.
//!
//! The untrained [`AnalyticDetector`] and [`NonParamDetector`] score from the
//! training matrix directly.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mlp::{AdamState, Head, Mlp, Tape};
use crate::neighbors::KnnIndex;
use crate::posterior::{analytic_posterior, nonparametric_score, shape_for_dim};
use crate::scalar::Scalar;
use crate::schedule::{DiffusionSchedule, DEFAULT_BETA_HI, DEFAULT_TIMESTEPS};
use crate::{seeded_rng, RngStream};

pub const DEFAULT_K: usize = 32;
pub const DEFAULT_BINS: usize = 7;

/// Rows per forward pass when scoring large matrices.
const SCORE_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Analytic,
    Nonparam,
    Invgamma,
    Categorical,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Analytic, Method::Nonparam, Method::Invgamma, Method::Categorical];

    pub fn is_parametric(self) -> bool {
        matches!(self, Method::Invgamma | Method::Categorical)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Analytic => "analytic",
            Method::Nonparam => "nonparam",
            Method::Invgamma => "invgamma",
            Method::Categorical => "categorical",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}' (expected analytic, nonparam, invgamma or categorical)")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Training hyperparameters. Defaults: hidden [256, 512, 256], Adam lr 1e-4,
/// dropout 0.5, batch 64, 400 epochs, T = 300, 7 bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub timesteps: usize,
    pub beta_hi: f64,
    pub bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 512, 256],
            epochs: 400,
            batch_size: 64,
            lr: 1e-4,
            dropout: 0.5,
            timesteps: DEFAULT_TIMESTEPS,
            beta_hi: DEFAULT_BETA_HI,
            bins: DEFAULT_BINS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if self.timesteps < 2 {
            return Err(Error::config("need at least 2 timesteps"));
        }
        if self.bins == 0 || self.bins > self.timesteps {
            return Err(Error::config(format!("bin count {} must lie in 1..={}", self.bins, self.timesteps)));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of inverse-Gamma(a, b_i) at `sigma2_i` and its
/// gradient with respect to each `b_i`.
pub fn inv_gamma_loss<F: Scalar>(b_pred: &[F], sigma2: &[F], a: F) -> Result<(F, Vec<F>)> {
    if b_pred.len() != sigma2.len() || b_pred.is_empty() {
        return Err(Error::dim("prediction and variance batches must have the same nonzero length"));
    }
    let n = F::of(b_pred.len() as f64);
    let mut loss = F::zero();
    let mut grad = Vec::with_capacity(b_pred.len());
    for (&b, &s) in b_pred.iter().zip(sigma2) {
        if !(b > F::zero()) || !(s > F::zero()) {
            return Err(Error::Domain(format!("inverse-Gamma loss needs b > 0 and sigma^2 > 0, got b={b}, sigma^2={s}")));
        }
        loss = loss - (a * b.ln() - (a + F::one()) * s.ln() - b / s);
        grad.push(-(a / b - F::one() / s) / n);
    }
    Ok((loss / n, grad))
}

/// Bin `floor(t B / T)` of timestep `t`.
pub fn categorical_target(t: usize, timesteps: usize, bins: usize) -> Result<usize> {
    if bins == 0 || bins > timesteps {
        return Err(Error::contract(format!("bin count {bins} must lie in 1..={timesteps}")));
    }
    if t >= timesteps {
        return Err(Error::contract(format!("timestep {t} outside 0..{timesteps}")));
    }
    Ok(t * bins / timesteps)
}

/// Mean cross-entropy of softmax(logits) against integer targets, with the
/// gradient with respect to the logits.
pub fn cross_entropy_from_logits<F: Scalar>(logits: &Matrix<F>, targets: &[usize]) -> Result<(F, Matrix<F>)> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::dim("one target per logit row required"));
    }
    let n = F::of(targets.len() as f64);
    let mut loss = F::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::contract(format!("target {y} outside 0..{}", row.len())));
        }
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss = loss + lse - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            let target = if j == y { F::one() } else { F::zero() };
            *g = (p - target) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Anything that maps standardized rows to anomaly scores (higher = more
/// anomalous).
pub trait Detector<F: Scalar> {
    fn standardizer(&self) -> &Standardizer;

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>>;

    /// Scores raw (unstandardized) rows.
    fn score_batch(&self, raw: &Matrix<F>) -> Result<Vec<F>> {
        let std = self.standardizer();
        if raw.cols() != std.dim() {
            return Err(Error::data(format!("input width {} does not match model width {}", raw.cols(), std.dim())));
        }
        self.score_standardized(&std.apply(raw)?)
    }

    fn score(&self, x: &[F]) -> Result<F> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.score_batch(&m)?[0])
    }
}

/// Detectors whose score is differentiable in the input.
pub trait DifferentiableDetector<F: Scalar>: Detector<F> {
    /// Score of one standardized row and its gradient in standardized space.
    fn score_and_gradient_standardized(&self, z: &[F]) -> Result<(F, Vec<F>)>;

    /// Score of one raw row and its gradient with respect to the raw input.
    fn score_gradient(&self, x: &[F]) -> Result<(F, Vec<F>)> {
        let std = self.standardizer();
        let z = std.apply_row(x).map_err(|_| Error::data("input width does not match model width"))?;
        let (s, g) = self.score_and_gradient_standardized(&z)?;
        Ok((s, g.iter().zip(&std.std).map(|(&gi, &sd)| gi / F::of(sd)).collect()))
    }
}

fn chunked_predict<F: Scalar>(mlp: &Mlp<F>, x: &Matrix<F>, mut per_row: impl FnMut(&[F]) -> F) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + SCORE_CHUNK).min(x.rows());
        let rows: Vec<usize> = (start..end).collect();
        let y = mlp.predict(&x.select_rows(&rows))?;
        out.extend(y.iter_rows().map(&mut per_row));
        start = end;
    }
    if x.rows() == 0 {
        mlp.predict(x)?;
    }
    Ok(out)
}

fn expected_bin<F: Scalar>(p: &[F]) -> F {
    p.iter().enumerate().map(|(k, &pk)| F::of(k as f64) * pk).sum()
}

/// Network predicting the inverse-Gamma scale `b` of the diffusion-time
/// posterior; shape `a` is fixed by the data dimension.
#[derive(Debug, Clone)]
pub struct InvGammaModel<F> {
    pub mlp: Mlp<F>,
    pub a: f64,
    pub schedule: DiffusionSchedule<F>,
    pub standardizer: Standardizer,
    /// Mean training loss of every epoch (empty for loaded models).
    pub loss_history: Vec<f64>,
}

/// Network predicting a categorical distribution over timestep bins.
#[derive(Debug, Clone)]
pub struct CategoricalModel<F> {
    pub mlp: Mlp<F>,
    pub bins: usize,
    pub schedule: DiffusionSchedule<F>,
    pub standardizer: Standardizer,
    pub loss_history: Vec<f64>,
}

impl<F: Scalar> InvGammaModel<F> {
    /// Predicted scale `b` for standardized rows.
    pub fn predict_scale(&self, z: &Matrix<F>) -> Result<Vec<F>> {
        chunked_predict(&self.mlp, z, |r| r[0])
    }
}

impl<F: Scalar> CategoricalModel<F> {
    /// Bin probabilities for standardized rows.
    pub fn predict_proba(&self, z: &Matrix<F>) -> Result<Matrix<F>> {
        self.mlp.predict(z)
    }
}

impl<F: Scalar> Detector<F> for InvGammaModel<F> {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        let denom = F::of(self.a + 1.0);
        chunked_predict(&self.mlp, x, |r| r[0] / denom)
    }
}

impl<F: Scalar> Detector<F> for CategoricalModel<F> {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        chunked_predict(&self.mlp, x, expected_bin)
    }
}

fn single_row_tape<F: Scalar>(mlp: &Mlp<F>, z: &[F]) -> Result<(Matrix<F>, Tape<F>)> {
    mlp.forward(&Matrix::from_vec(1, z.len(), z.to_vec())?)
}

impl<F: Scalar> DifferentiableDetector<F> for InvGammaModel<F> {
    fn score_and_gradient_standardized(&self, z: &[F]) -> Result<(F, Vec<F>)> {
        let (out, tape) = single_row_tape(&self.mlp, z)?;
        let denom = F::of(self.a + 1.0);
        let seed = Matrix::from_vec(1, 1, vec![F::one() / denom])?;
        let g = self.mlp.backward(&tape, &seed)?;
        Ok((out.get(0, 0) / denom, g.input.into_vec()))
    }
}

impl<F: Scalar> DifferentiableDetector<F> for CategoricalModel<F> {
    fn score_and_gradient_standardized(&self, z: &[F]) -> Result<(F, Vec<F>)> {
        let (out, tape) = single_row_tape(&self.mlp, z)?;
        let seed = Matrix::from_vec(1, self.bins, (0..self.bins).map(|k| F::of(k as f64)).collect())?;
        let g = self.mlp.backward(&tape, &seed)?;
        Ok((expected_bin(out.row(0)), g.input.into_vec()))
    }
}

/// Posterior mean of `sigma^2` under the exact mixture posterior.
#[derive(Debug, Clone)]
pub struct AnalyticDetector<F> {
    pub train: Matrix<F>,
    pub schedule: DiffusionSchedule<F>,
    pub standardizer: Standardizer,
}

impl<F: Scalar> Detector<F> for AnalyticDetector<F> {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        x.iter_rows().map(|r| Ok(analytic_posterior(r, &self.train, &self.schedule)?.mean_variance())).collect()
    }
}

/// Mode of the k-nearest-neighbor inverse-Gamma posterior.
#[derive(Debug, Clone)]
pub struct NonParamDetector<F> {
    pub index: KnnIndex<F>,
    pub k: usize,
    pub standardizer: Standardizer,
}

impl<F: Scalar> NonParamDetector<F> {
    pub fn new(train: Matrix<F>, k: usize, standardizer: Standardizer) -> Result<Self> {
        let index = KnnIndex::new(train)?;
        if k == 0 || k > index.len() {
            return Err(Error::config(format!("k = {k} must lie in 1..={}", index.len())));
        }
        Ok(Self { index, k, standardizer })
    }
}

impl<F: Scalar> Detector<F> for NonParamDetector<F> {
    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        x.iter_rows().map(|r| nonparametric_score(r, &self.index, self.k)).collect()
    }
}

enum Objective {
    InvGamma { a: f64 },
    Categorical { bins: usize },
}

/// Shared mini-batch loop. Returns the trained network and per-epoch mean loss.
fn fit<F: Scalar>(
    train: &Matrix<F>,
    schedule: &DiffusionSchedule<F>,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(Mlp<F>, Vec<f64>)> {
    cfg.validate()?;
    let n = train.rows();
    let d = train.cols();
    if n == 0 || d == 0 {
        return Err(Error::data("training matrix is empty"));
    }
    if !train.all_finite() {
        return Err(Error::data("training matrix contains NaN or infinity"));
    }
    let (head, out_dim) = match objective {
        Objective::InvGamma { .. } => (Head::Softplus, 1),
        Objective::Categorical { bins } => (Head::Softmax, bins),
    };
    let mut dims = vec![d];
    dims.extend(&cfg.hidden);
    dims.push(out_dim);

    let mut init_rng = seeded_rng(cfg.seed, RngStream::Init);
    let mut mlp = Mlp::new(&dims, head, cfg.dropout, &mut init_rng)?;
    let mut adam = AdamState::new(&mlp, cfg.lr);
    let mut rng = seeded_rng(cfg.seed, RngStream::Training);
    let timesteps = schedule.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_no, rows) in order.chunks(cfg.batch_size).enumerate() {
            let mut xt = Matrix::zeros(rows.len(), d);
            let mut ts = Vec::with_capacity(rows.len());
            for (i, &r) in rows.iter().enumerate() {
                let t = rng.random_range(0..timesteps);
                let sigma = schedule.sigma(t);
                for (dst, &x0) in xt.row_mut(i).iter_mut().zip(train.row(r)) {
                    *dst = x0 + sigma * F::of(rng.sample::<f64, _>(StandardNormal));
                }
                ts.push(t);
            }
            let (out, tape) = mlp.forward_train(&xt, &mut rng)?;
            let (loss, grads) = match objective {
                Objective::InvGamma { a } => {
                    let b: Vec<F> = out.as_slice().to_vec();
                    let s2: Vec<F> = ts.iter().map(|&t| schedule.variance(t)).collect();
                    let (loss, g) = inv_gamma_loss(&b, &s2, F::of(a)).map_err(|e| {
                        Error::numeric(format!("epoch {epoch}, batch {batch_no}: {e}"))
                    })?;
                    (loss, mlp.backward(&tape, &Matrix::from_vec(rows.len(), 1, g)?)?)
                }
                Objective::Categorical { bins } => {
                    let targets = ts.iter().map(|&t| categorical_target(t, timesteps, bins)).collect::<Result<Vec<_>>>()?;
                    let (loss, g) = cross_entropy_from_logits(tape.logits(), &targets)?;
                    (loss, mlp.backward_logits(&tape, g)?)
                }
            };
            if !loss.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch}, batch {batch_no}")));
            }
            adam.step(&mut mlp, &grads)
                .map_err(|e| Error::numeric(format!("epoch {epoch}, batch {batch_no}: {e}")))?;
            epoch_loss += loss.as_f64() * rows.len() as f64;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((mlp, history))
}

pub fn train_inv_gamma<F: Scalar>(train: &Matrix<F>, standardizer: Standardizer, cfg: &TrainConfig) -> Result<InvGammaModel<F>> {
    let schedule = DiffusionSchedule::new(cfg.timesteps, cfg.beta_hi)?;
    let a = shape_for_dim(train.cols());
    let (mlp, loss_history) = fit(train, &schedule, cfg, Objective::InvGamma { a })?;
    Ok(InvGammaModel { mlp, a, schedule, standardizer, loss_history })
}

pub fn train_categorical<F: Scalar>(
    train: &Matrix<F>,
    standardizer: Standardizer,
    cfg: &TrainConfig,
) -> Result<CategoricalModel<F>> {
    if cfg.bins == 0 || cfg.bins > cfg.timesteps {
        return Err(Error::config(format!("bin count {} must lie in 1..={}", cfg.bins, cfg.timesteps)));
    }
    let schedule = DiffusionSchedule::new(cfg.timesteps, cfg.beta_hi)?;
    let (mlp, loss_history) = fit(train, &schedule, cfg, Objective::Categorical { bins: cfg.bins })?;
    Ok(CategoricalModel { mlp, bins: cfg.bins, schedule, standardizer, loss_history })
}

/// A trained parametric model of either kind.
#[derive(Debug, Clone)]
pub enum TrainedModel<F> {
    InvGamma(InvGammaModel<F>),
    Categorical(CategoricalModel<F>),
}

/// Trains a parametric model on an already standardized matrix.
pub fn train<F: Scalar>(method: Method, train: &Matrix<F>, standardizer: Standardizer, cfg: &TrainConfig) -> Result<TrainedModel<F>> {
    match method {
        Method::Invgamma => Ok(TrainedModel::InvGamma(train_inv_gamma(train, standardizer, cfg)?)),
        Method::Categorical => Ok(TrainedModel::Categorical(train_categorical(train, standardizer, cfg)?)),
        other => Err(Error::config(format!("method '{other}' has no training phase"))),
    }
}

impl<F: Scalar> TrainedModel<F> {
    pub fn method(&self) -> Method {
        match self {
            TrainedModel::InvGamma(_) => Method::Invgamma,
            TrainedModel::Categorical(_) => Method::Categorical,
        }
    }

    pub fn mlp(&self) -> &Mlp<F> {
        match self {
            TrainedModel::InvGamma(m) => &m.mlp,
            TrainedModel::Categorical(m) => &m.mlp,
        }
    }

    pub fn schedule(&self) -> &DiffusionSchedule<F> {
        match self {
            TrainedModel::InvGamma(m) => &m.schedule,
            TrainedModel::Categorical(m) => &m.schedule,
        }
    }

    pub fn loss_history(&self) -> &[f64] {
        match self {
            TrainedModel::InvGamma(m) => &m.loss_history,
            TrainedModel::Categorical(m) => &m.loss_history,
        }
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history().last().copied()
    }

    pub fn to_file(&self) -> ModelFile {
        let mlp = self.mlp();
        let to64 = |v: &[Vec<F>]| v.iter().map(|w| w.iter().map(|x| x.as_f64()).collect()).collect();
        let schedule = self.schedule();
        let (standardization, head_meta) = match self {
            TrainedModel::InvGamma(m) => (m.standardizer.clone(), HeadMeta::InvGamma { a: m.a }),
            TrainedModel::Categorical(m) => {
                (m.standardizer.clone(), HeadMeta::Categorical { bins: m.bins, timesteps: schedule.len() })
            }
        };
        ModelFile {
            schema_version: SCHEMA_VERSION,
            layer_dims: mlp.layer_dims().to_vec(),
            head: mlp.head(),
            dropout_rate: mlp.dropout_rate(),
            weights: to64(mlp.weights()),
            biases: to64(mlp.biases()),
            standardization,
            schedule: ScheduleMeta { timesteps: schedule.len(), beta_hi: schedule.beta_hi() },
            head_meta,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!("unsupported model schema version {}", file.schema_version)));
        }
        let conv = |v: Vec<Vec<f64>>| v.into_iter().map(|w| w.into_iter().map(F::of).collect()).collect();
        let mlp = Mlp::from_parts(file.layer_dims, file.head, file.dropout_rate, conv(file.weights), conv(file.biases))?;
        let schedule = DiffusionSchedule::new(file.schedule.timesteps, file.schedule.beta_hi)?;
        let std = file.standardization;
        if std.mean.len() != mlp.input_dim() || std.std.len() != mlp.input_dim() {
            return Err(Error::data("standardization width does not match the network input"));
        }
        match (file.head, file.head_meta) {
            (Head::Softplus, HeadMeta::InvGamma { a }) => {
                if !(a > 0.0) {
                    return Err(Error::data("inverse-Gamma shape must be positive"));
                }
                Ok(TrainedModel::InvGamma(InvGammaModel { mlp, a, schedule, standardizer: std, loss_history: vec![] }))
            }
            (Head::Softmax, HeadMeta::Categorical { bins, timesteps }) => {
                if bins != mlp.output_dim() || timesteps != schedule.len() {
                    return Err(Error::data("categorical head metadata disagrees with network or schedule"));
                }
                Ok(TrainedModel::Categorical(CategoricalModel { mlp, bins, schedule, standardizer: std, loss_history: vec![] }))
            }
            _ => Err(Error::data("head type and head metadata disagree")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl<F: Scalar> Detector<F> for TrainedModel<F> {
    fn standardizer(&self) -> &Standardizer {
        match self {
            TrainedModel::InvGamma(m) => &m.standardizer,
            TrainedModel::Categorical(m) => &m.standardizer,
        }
    }

    fn score_standardized(&self, x: &Matrix<F>) -> Result<Vec<F>> {
        match self {
            TrainedModel::InvGamma(m) => m.score_standardized(x),
            TrainedModel::Categorical(m) => m.score_standardized(x),
        }
    }
}

impl<F: Scalar> DifferentiableDetector<F> for TrainedModel<F> {
    fn score_and_gradient_standardized(&self, z: &[F]) -> Result<(F, Vec<F>)> {
        match self {
            TrainedModel::InvGamma(m) => m.score_and_gradient_standardized(z),
            TrainedModel::Categorical(m) => m.score_and_gradient_standardized(z),
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk model layout (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub layer_dims: Vec<usize>,
    pub head: Head,
    pub dropout_rate: f64,
    /// Per layer, row-major `(out, in)`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub standardization: Standardizer,
    pub schedule: ScheduleMeta,
    pub head_meta: HeadMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleMeta {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum HeadMeta {
    InvGamma {
        a: f64,
    },
    Categorical {
        #[serde(rename = "B")]
        bins: usize,
        #[serde(rename = "T")]
        timesteps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Ran the requested number of steps.
    Completed,
    /// The score rose on two consecutive steps; those steps were dropped.
    ScoreIncreased,
    /// A non-finite score or gradient appeared; the last valid iterate is kept.
    NonFinite,
}

/// Iterates of [`denoise`], in raw feature units, with their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub points: Vec<Vec<F>>,
    pub scores: Vec<F>,
    pub stop: StopReason,
}

pub const DEFAULT_DENOISE_STEP: f64 = 0.01;
pub const DEFAULT_DENOISE_STEPS: usize = 200;

/// Gradient descent on the anomaly score in standardized space, moving the
/// input toward the data manifold.
pub fn denoise<F: Scalar, D: DifferentiableDetector<F> + ?Sized>(
    model: &D,
    x: &[F],
    steps: usize,
    step_size: f64,
) -> Result<Trajectory<F>> {
    if steps == 0 {
        return Err(Error::config("denoise needs at least one step"));
    }
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::config(format!("step size must be positive, got {step_size}")));
    }
    let std = model.standardizer();
    if x.len() != std.dim() {
        return Err(Error::data(format!("input width {} does not match model width {}", x.len(), std.dim())));
    }
    let eta = F::of(step_size);
    let mut z = std.apply_row(x)?;
    let (mut score, mut grad) = model.score_and_gradient_standardized(&z)?;
    if !score.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite score or gradient at the starting point"));
    }
    let mut points = vec![x.to_vec()];
    let mut scores = vec![score];
    let mut rises = 0;
    for _ in 0..steps {
        let next: Vec<F> = z.iter().zip(&grad).map(|(&zi, &gi)| zi - eta * gi).collect();
        let (next_score, next_grad) = model.score_and_gradient_standardized(&next)?;
        if !next_score.is_finite() || next_grad.iter().any(|g| !g.is_finite()) || next.iter().any(|v| !v.is_finite()) {
            return Ok(Trajectory { points, scores, stop: StopReason::NonFinite });
        }
        rises = if next_score > score { rises + 1 } else { 0 };
        points.push(std.invert_row(&next)?);
        scores.push(next_score);
        if rises == 2 {
            points.truncate(points.len() - 2);
            scores.truncate(scores.len() - 2);
            return Ok(Trajectory { points, scores, stop: StopReason::ScoreIncreased });
        }
        z = next;
        score = next_score;
        grad = next_grad;
    }
    Ok(Trajectory { points, scores, stop: StopReason::Completed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inv_gamma_loss_plug_in() {
        let (loss, _) = inv_gamma_loss::<f64>(&[1.0], &[1.0], 1.0).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inv_gamma_loss_minimized_at_a_sigma2() {
        let (a, s2) = (2.0f64, 0.3f64);
        let (_, g) = inv_gamma_loss(&[a * s2], &[s2], a).unwrap();
        assert!(g[0].abs() < 1e-14);
        // golden-section search on b
        let f = |b: f64| inv_gamma_loss(&[b], &[s2], a).unwrap().0;
        let (mut lo, mut hi) = (1e-3, 10.0);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        assert!((0.5 * (lo + hi) - a * s2).abs() < 1e-6);
    }

    #[test]
    fn inv_gamma_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let a: f64 = rng.random_range(0.5..5.0);
            let b: f64 = rng.random_range(0.05..3.0);
            let s2: f64 = rng.random_range(0.01..1.0);
            let (_, g) = inv_gamma_loss(&[b], &[s2], a).unwrap();
            let h = 1e-6 * b;
            let fd = (inv_gamma_loss(&[b + h], &[s2], a).unwrap().0 - inv_gamma_loss(&[b - h], &[s2], a).unwrap().0) / (2.0 * h);
            assert!((g[0] - fd).abs() / g[0].abs().max(fd.abs()).max(1e-8) < 1e-6, "{} vs {fd}", g[0]);
        }
    }

    #[test]
    fn inv_gamma_loss_domain() {
        assert!(matches!(inv_gamma_loss(&[0.0], &[1.0], 1.0), Err(Error::Domain(_))));
        assert!(matches!(inv_gamma_loss(&[1.0], &[-1.0], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bins() {
        assert_eq!(categorical_target(0, 300, 7).unwrap(), 0);
        assert_eq!(categorical_target(299, 300, 7).unwrap(), 6);
        let all: Vec<usize> = (0..300).map(|t| categorical_target(t, 300, 7).unwrap()).collect();
        assert!(all.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        let mut distinct = all.clone();
        distinct.dedup();
        assert_eq!(distinct, (0..7).collect::<Vec<_>>());
        assert!(categorical_target(300, 300, 7).is_err());
        assert!(categorical_target(0, 300, 0).is_err());
        assert!(categorical_target(0, 5, 6).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Matrix::<f64>::zeros(2, 4);
        let (loss, g) = cross_entropy_from_logits(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((g.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.get(0, 1) - 0.25 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("knn".parse::<Method>().is_err());
    }

    fn fixed_categorical(logit_bias: Vec<f64>) -> CategoricalModel<f64> {
        let bins = logit_bias.len();
        let mlp = Mlp::from_parts(vec![3, bins], Head::Softmax, 0.0, vec![vec![0.0; 3 * bins]], vec![logit_bias]).unwrap();
        CategoricalModel {
            mlp,
            bins,
            schedule: DiffusionSchedule::new(10, 0.01).unwrap(),
            standardizer: Standardizer { mean: vec![0.0; 3], std: vec![1.0; 3] },
            loss_history: vec![],
        }
    }

    #[test]
    fn categorical_score_extremes() {
        let uniform = fixed_categorical(vec![0.0; 7]);
        assert!((uniform.score(&[1.0, 2.0, 3.0]).unwrap() - 3.0).abs() < 1e-12);
        let mut bias = vec![-800.0; 7];
        bias[6] = 0.0;
        let last = fixed_categorical(bias);
        assert!((last.score(&[0.0; 3]).unwrap() - 6.0).abs() < 1e-12);
        assert!(matches!(uniform.score(&[1.0]), Err(Error::Data(_))));
    }

    #[test]
    fn denoise_flat_score_is_constant() {
        let m = fixed_categorical(vec![0.0; 5]);
        let traj = denoise(&m, &[0.3, -0.2, 1.0], 5, 0.1).unwrap();
        assert_eq!(traj.points.len(), 6);
        assert!(traj.points.iter().all(|p| p == &vec![0.3, -0.2, 1.0]));
        assert_eq!(traj.stop, StopReason::Completed);
    }

    #[test]
    fn denoise_rejects_bad_arguments() {
        let m = fixed_categorical(vec![0.0; 5]);
        assert!(matches!(denoise(&m, &[0.0; 3], 0, 0.1), Err(Error::Config(_))));
        assert!(matches!(denoise(&m, &[0.0; 3], 1, -1.0), Err(Error::Config(_))));
        assert!(matches!(denoise(&m, &[0.0; 2], 1, 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn model_file_rejects_mismatched_head_meta() {
        let m = TrainedModel::Categorical(fixed_categorical(vec![0.0; 4]));
        let mut file = m.to_file();
        file.head_meta = HeadMeta::InvGamma { a: 1.0 };
        assert!(TrainedModel::<f64>::from_file(file).is_err());
        let json = m.to_json().unwrap();
        assert!(json.contains("\"B\": 4") && json.contains("\"T\": 10"));
        let back = TrainedModel::<f64>::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn train_config_validation() {
        let bad = TrainConfig { dropout: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig { bins: 400, ..TrainConfig::default() };
        let err = train_categorical(&Matrix::<f64>::zeros(4, 2), Standardizer { mean: vec![0.0; 2], std: vec![1.0; 2] }, &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
