//! Posterior distributions over diffusion time.
//!
//! For a query `x` and training set `D`, the exact posterior over the noise
//! variance of a VE schedule is
//!
//! ```text
//! p(sigma_t^2 | x) ∝ sum_{x0 in D} sigma_t^-d exp(-|x - x0|^2 / (2 sigma_t^2))
//! ```
//!
//! With a single data point this is an inverse-Gamma density with shape
//! `a = d/2 - 1` and scale `b = |x - x0|^2 / 2`. Replacing the log-sum-exp by a
//! max gives the nearest-neighbor form, and replacing it by the mean over the
//! `k` nearest neighbors gives the non-parametric estimator.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};
use crate::neighbors::KnnIndex;
use crate::scalar::Scalar;
use crate::schedule::DiffusionSchedule;

/// Lower bound applied to a scale parameter before taking its logarithm.
pub const MIN_SCALE: f64 = 1e-12;

/// Shape parameter `a = d/2 - 1`, floored at 0.5 so the density stays proper
/// for `d <= 2`.
pub fn shape_for_dim(d: usize) -> f64 {
    (d as f64 / 2.0 - 1.0).max(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaParams<F> {
    pub a: F,
    pub b: F,
}

impl<F: Scalar> InverseGammaParams<F> {
    pub fn new(a: F, b: F) -> Result<Self> {
        if !(a > F::zero()) || !a.is_finite() {
            return Err(Error::Domain(format!("inverse-Gamma shape must be positive, got {a}")));
        }
        if !(b >= F::zero()) || !b.is_finite() {
            return Err(Error::Domain(format!("inverse-Gamma scale must be non-negative, got {b}")));
        }
        Ok(Self { a, b })
    }

    pub fn mode(&self) -> F {
        self.b / (self.a + F::one())
    }

    /// `a ln b - ln Γ(a) - (a + 1) ln s - b / s`.
    pub fn log_density(&self, s: F) -> Result<F> {
        inv_gamma_log_density(s, self)
    }
}

pub fn inv_gamma_log_density<F: Scalar>(s: F, p: &InverseGammaParams<F>) -> Result<F> {
    if !(s > F::zero()) {
        return Err(Error::Domain(format!("variance must be positive, got {s}")));
    }
    if !(p.b > F::zero()) {
        return Err(Error::Domain(format!("scale must be positive for a density, got {}", p.b)));
    }
    let ln_gamma_a = F::of(libm::lgamma(p.a.as_f64()));
    Ok(p.a * p.b.ln() - ln_gamma_a - (p.a + F::one()) * s.ln() - p.b / s)
}

/// Numerically stable `ln sum exp(v)`.
pub fn logsumexp<F: Scalar>(values: &[F]) -> Result<F> {
    if values.is_empty() {
        return Err(Error::contract("logsumexp of an empty slice"));
    }
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        return Ok(max);
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// A distribution over the discrete variances of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior<F> {
    sigma2_grid: Vec<F>,
    probs: Vec<F>,
}

impl<F: Scalar> GridPosterior<F> {
    /// Normalizes unnormalized log-weights over a strictly increasing grid.
    pub fn from_log_weights(sigma2_grid: Vec<F>, log_weights: &[F]) -> Result<Self> {
        if sigma2_grid.len() != log_weights.len() {
            return Err(Error::dim("grid and weight lengths differ"));
        }
        if sigma2_grid.windows(2).any(|w| !(w[0] < w[1])) || sigma2_grid.first().is_some_and(|&s| !(s > F::zero())) {
            return Err(Error::contract("variance grid must be positive and strictly increasing"));
        }
        let norm = logsumexp(log_weights)?;
        if !norm.is_finite() {
            return Err(Error::numeric("posterior weights are all zero or infinite"));
        }
        let probs = log_weights.iter().map(|&w| (w - norm).exp()).collect();
        Ok(Self { sigma2_grid, probs })
    }

    pub fn sigma2_grid(&self) -> &[F] {
        &self.sigma2_grid
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    /// Posterior mean of `sigma^2`.
    pub fn mean_variance(&self) -> F {
        self.sigma2_grid.iter().zip(&self.probs).map(|(&s, &p)| s * p).sum()
    }

    /// Posterior mean of the timestep index.
    pub fn mean_timestep(&self) -> F {
        self.probs.iter().enumerate().map(|(t, &p)| F::of(t as f64) * p).sum()
    }

    /// CSV with header `t,sigma2,prob`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "sigma2", "prob"])?;
        for (t, (s, p)) in self.sigma2_grid.iter().zip(&self.probs).enumerate() {
            w.write_record([t.to_string(), s.as_f64().to_string(), p.as_f64().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_query<F: Scalar>(x: &[F], train: &Matrix<F>) -> Result<()> {
    if train.rows() == 0 {
        return Err(Error::contract("posterior needs at least one training point"));
    }
    if x.is_empty() || x.len() != train.cols() {
        return Err(Error::dim(format!("query width {} does not match data width {}", x.len(), train.cols())));
    }
    Ok(())
}

/// Exact per-timestep log-weights
/// `logsumexp_{x0} [-d ln sigma_t - |x - x0|^2 / (2 sigma_t^2)]`.
pub fn analytic_log_weights<F: Scalar>(x: &[F], train: &Matrix<F>, schedule: &DiffusionSchedule<F>) -> Result<Vec<F>> {
    check_query(x, train)?;
    let d = F::of(x.len() as f64);
    let half_dists: Vec<F> = train.iter_rows().map(|r| squared_distance(x, r) / F::of(2.0)).collect();
    let mut terms = vec![F::zero(); half_dists.len()];
    (0..schedule.len())
        .map(|t| {
            let var = schedule.variance(t);
            let log_norm = -d * schedule.sigma(t).ln();
            for (term, &h) in terms.iter_mut().zip(&half_dists) {
                *term = log_norm - h / var;
            }
            logsumexp(&terms)
        })
        .collect()
}

/// Log-weights with the log-sum-exp replaced by its largest term (nearest
/// training point).
pub fn max_approx_log_weights<F: Scalar>(x: &[F], train: &Matrix<F>, schedule: &DiffusionSchedule<F>) -> Result<Vec<F>> {
    check_query(x, train)?;
    let d = F::of(x.len() as f64);
    let nearest = train.iter_rows().map(|r| squared_distance(x, r)).fold(F::infinity(), F::min) / F::of(2.0);
    Ok((0..schedule.len()).map(|t| -d * schedule.sigma(t).ln() - nearest / schedule.variance(t)).collect())
}

/// Exact posterior over the schedule's timesteps given the whole training set.
pub fn analytic_posterior<F: Scalar>(
    x: &[F],
    train: &Matrix<F>,
    schedule: &DiffusionSchedule<F>,
) -> Result<GridPosterior<F>> {
    let lw = analytic_log_weights(x, train, schedule)?;
    GridPosterior::from_log_weights(schedule.variances(), &lw)
}

/// Inverse-Gamma density restricted to the schedule grid and renormalized.
pub fn inv_gamma_on_grid<F: Scalar>(p: &InverseGammaParams<F>, schedule: &DiffusionSchedule<F>) -> Result<GridPosterior<F>> {
    let clamped = InverseGammaParams { a: p.a, b: p.b.max(F::of(MIN_SCALE)) };
    let grid = schedule.variances();
    let lw = grid.iter().map(|&s| clamped.log_density(s)).collect::<Result<Vec<_>>>()?;
    GridPosterior::from_log_weights(grid, &lw)
}

/// `b = mean over the k nearest neighbors of |x - x0|^2 / 2`.
pub fn nonparametric_scale<F: Scalar>(x: &[F], index: &KnnIndex<F>, k: usize) -> Result<F> {
    let nn = index.query(x, k)?;
    let sum: F = nn.squared_distances.iter().copied().sum();
    Ok(sum / F::of(2.0 * k as f64))
}

/// Mode `b / (a + 1)` of the non-parametric inverse-Gamma posterior.
pub fn nonparametric_score<F: Scalar>(x: &[F], index: &KnnIndex<F>, k: usize) -> Result<F> {
    let b = nonparametric_scale(x, index, k)?;
    let a = F::of(shape_for_dim(index.dim()));
    Ok(b / (a + F::one()))
}

/// Non-parametric posterior evaluated on the schedule grid.
pub fn nonparametric_posterior<F: Scalar>(
    x: &[F],
    index: &KnnIndex<F>,
    k: usize,
    schedule: &DiffusionSchedule<F>,
) -> Result<GridPosterior<F>> {
    let b = nonparametric_scale(x, index, k)?;
    let p = InverseGammaParams::new(F::of(shape_for_dim(index.dim())), b)?;
    inv_gamma_on_grid(&p, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_density_plug_in() {
        let p = InverseGammaParams::<f64>::new(1.0, 1.0).unwrap();
        assert!((p.log_density(1.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_density_domain() {
        let p = InverseGammaParams::new(1.0, 1.0).unwrap();
        assert!(matches!(p.log_density(0.0), Err(Error::Domain(_))));
        let zero_b = InverseGammaParams::new(1.0, 0.0).unwrap();
        assert!(matches!(zero_b.log_density(1.0), Err(Error::Domain(_))));
        assert!(InverseGammaParams::new(0.0, 1.0).is_err());
        assert!(InverseGammaParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn density_peaks_at_mode() {
        let p = InverseGammaParams::new(1.0, 4.0).unwrap();
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
        for i in 1..=100_000 {
            let s = i as f64 * 1e-4;
            let v = p.log_density(s).unwrap();
            if v > best {
                best = v;
                arg = s;
            }
        }
        assert!((arg - 2.0).abs() < 1e-3);
        assert_eq!(p.mode(), 2.0);
    }

    /// Adaptive Simpson over u = ln s, integrand p(e^u) e^u.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn density_integrates_to_one() {
        let p = InverseGammaParams::new(2.0, 3.0).unwrap();
        let f = |u: f64| {
            let s = u.exp();
            p.log_density(s).unwrap().exp() * s
        };
        let total = adaptive_simpson(&f, 1e-4f64.ln(), 1e4f64.ln(), 1e-10);
        assert!((total - 1.0).abs() < 1e-4, "integral {total}");
    }

    #[test]
    fn logsumexp_cases() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let c = 3.25;
        assert!((logsumexp(&[c; 5]).unwrap() - (c + 5f64.ln())).abs() < 1e-14);
        let v = logsumexp(&[1000.0, 1000.5]).unwrap();
        assert!((v - (1000.5 + (1.0 + (-0.5f64).exp()).ln())).abs() < 1e-12);
        assert!(matches!(logsumexp::<f64>(&[]), Err(Error::Contract(_))));
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn single_point_posterior_is_inverse_gamma() {
        let sched = DiffusionSchedule::<f64>::new(300, 0.01).unwrap();
        for d in [3usize, 4, 8] {
            let x: Vec<f64> = (0..d).map(|i| 0.1 * (i as f64 + 1.0)).collect();
            let train = Matrix::zeros(1, d);
            let post = analytic_posterior(&x, &train, &sched).unwrap();
            let b = x.iter().map(|v| v * v).sum::<f64>() / 2.0;
            let ig = inv_gamma_on_grid(&InverseGammaParams::new(d as f64 / 2.0 - 1.0, b).unwrap(), &sched).unwrap();
            for (p, q) in post.probs().iter().zip(ig.probs()) {
                assert!((p - q).abs() < 1e-9, "d={d}");
            }
        }
    }

    #[test]
    fn duplicating_training_set_leaves_posterior_unchanged() {
        let sched = DiffusionSchedule::<f64>::new(50, 0.01).unwrap();
        let train = Matrix::from_rows(&[[0.0, 0.1, 0.2], [0.3, -0.2, 0.0], [0.1, 0.1, 0.1]]).unwrap();
        let doubled = train.select_rows(&[0, 1, 2, 0, 1, 2]);
        let x = [0.2, 0.2, 0.2];
        let p = analytic_posterior(&x, &train, &sched).unwrap();
        let q = analytic_posterior(&x, &doubled, &sched).unwrap();
        for (a, b) in p.probs().iter().zip(q.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_points_match_brute_force_gaussian_sum() {
        let sched = DiffusionSchedule::<f64>::new(5, 0.01).unwrap();
        let train = Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.1, 0.05, -0.02]]).unwrap();
        let x = [0.05, 0.02, 0.01];
        let post = analytic_posterior(&x, &train, &sched).unwrap();
        // direct Gaussian densities, including the (2π)^{-d/2} constant
        let dens: Vec<f64> = (0..5)
            .map(|t| {
                let var = sched.variance(t);
                train
                    .iter_rows()
                    .map(|r| {
                        let sq: f64 = r.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
                        (2.0 * std::f64::consts::PI * var).powf(-1.5) * (-sq / (2.0 * var)).exp()
                    })
                    .sum()
            })
            .collect();
        let total: f64 = dens.iter().sum();
        for (p, d) in post.probs().iter().zip(&dens) {
            assert!((p - d / total).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_train_is_contract_error() {
        let sched = DiffusionSchedule::<f64>::new(5, 0.01).unwrap();
        let train = Matrix::<f64>::zeros(0, 3);
        assert!(matches!(analytic_posterior(&[0.0; 3], &train, &sched), Err(Error::Contract(_))));
    }

    #[test]
    fn nonparametric_hand_cases() {
        let idx = KnnIndex::<f64>::new(Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [9.0, 9.0, 9.0, 9.0]]).unwrap()).unwrap();
        let origin = [0.0; 4];
        assert!((nonparametric_scale(&origin, &idx, 2).unwrap() - 2.5).abs() < 1e-15);
        // d = 4 -> a = 1 -> score = b / 2
        assert!((nonparametric_score(&origin, &idx, 2).unwrap() - 1.25).abs() < 1e-15);
        assert_eq!(nonparametric_scale(&[1.0, 0.0, 0.0, 0.0], &idx, 1).unwrap(), 0.0);
        assert!(matches!(nonparametric_scale(&origin, &idx, 4), Err(Error::Config(_))));
    }

    #[test]
    fn outlier_scores_higher() {
        let idx = KnnIndex::new(Matrix::from_rows(&[[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, -0.1, 0.0]]).unwrap()).unwrap();
        let inlier = nonparametric_score(&[0.0, 0.0, 0.0], &idx, 3).unwrap();
        let outlier = nonparametric_score(&[10.0, 0.0, 0.0], &idx, 3).unwrap();
        assert!(outlier > inlier);
    }

    #[test]
    fn low_dimension_shape_floor() {
        assert_eq!(shape_for_dim(1), 0.5);
        assert_eq!(shape_for_dim(2), 0.5);
        assert_eq!(shape_for_dim(3), 0.5);
        assert_eq!(shape_for_dim(4), 1.0);
    }

    #[test]
    fn grid_posterior_csv() {
        let sched = DiffusionSchedule::<f64>::new(3, 0.01).unwrap();
        let g = inv_gamma_on_grid(&InverseGammaParams::new(1.0, 0.01).unwrap(), &sched).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,sigma2,prob\n0,"));
        assert_eq!(text.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn logsumexp_bounds(v in prop::collection::vec(-500.0f64..500.0, 1..50)) {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&v).unwrap();
            prop_assert!(max <= l && l <= max + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn posterior_normalized_and_scale_invariant(shift in -50.0f64..50.0, seed in 0u64..1000) {
            let sched = DiffusionSchedule::<f64>::new(40, 0.01).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lw = analytic_log_weights(&x, &train, &sched).unwrap();
            let p = GridPosterior::from_log_weights(sched.variances(), &lw).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = lw.iter().map(|w| w + shift).collect();
            let q = GridPosterior::from_log_weights(sched.variances(), &shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let approx = max_approx_log_weights(&x, &train, &sched).unwrap();
            for (m, e) in approx.iter().zip(&lw) {
                prop_assert!(*m <= *e + 1e-12 && *e <= *m + 6f64.ln() + 1e-12);
            }
        }
    }
}
