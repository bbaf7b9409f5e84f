//! Variance-exploding noise schedule.
//!
//! `x_t = x_0 + sigma_t * eps` with `sigma_t^2 = 1 - prod_{s<=t} (1 - beta_s)`
//! and a linear beta grid `beta_t = beta_hi * (t + 1) / T`, `t = 0..T-1`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_TIMESTEPS: usize = 300;
pub const DEFAULT_BETA_HI: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule<F> {
    beta_hi: f64,
    betas: Vec<F>,
    alpha_bars: Vec<F>,
    sigmas: Vec<F>,
}

impl<F: Scalar> DiffusionSchedule<F> {
    pub fn new(timesteps: usize, beta_hi: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::config(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(beta_hi > 0.0 && beta_hi < 1.0) {
            return Err(Error::config(format!("beta_hi must lie in (0, 1), got {beta_hi}")));
        }
        let t_max = F::of(timesteps as f64);
        let hi = F::of(beta_hi);
        let betas: Vec<F> = (0..timesteps).map(|t| hi * F::of((t + 1) as f64) / t_max).collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut prod = F::one();
        for &b in &betas {
            prod = prod * (F::one() - b);
            alpha_bars.push(prod);
        }
        let sigmas = alpha_bars.iter().map(|&a| (F::one() - a).sqrt()).collect();
        Ok(Self { beta_hi, betas, alpha_bars, sigmas })
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta_hi(&self) -> f64 {
        self.beta_hi
    }

    pub fn betas(&self) -> &[F] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[F] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[F] {
        &self.sigmas
    }

    pub fn sigma(&self, t: usize) -> F {
        self.sigmas[t]
    }

    /// `sigma_t^2 = 1 - alpha_bar_t`.
    pub fn variance(&self, t: usize) -> F {
        F::one() - self.alpha_bars[t]
    }

    pub fn variances(&self) -> Vec<F> {
        (0..self.len()).map(|t| self.variance(t)).collect()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index(format!("timestep {t} outside 0..{}", self.len())));
        }
        Ok(())
    }

    /// `x0 + sigma_t * eps` with caller-supplied noise.
    pub fn noise_with(&self, x0: &[F], t: usize, eps: &[F]) -> Result<Vec<F>> {
        self.check_t(t)?;
        if eps.len() != x0.len() {
            return Err(Error::dim("noise vector width differs from the sample"));
        }
        let s = self.sigmas[t];
        Ok(x0.iter().zip(eps).map(|(&x, &e)| x + s * e).collect())
    }

    /// Draws `x_t ~ N(x0, sigma_t^2 I)`.
    pub fn noising_sample<R: Rng + ?Sized>(&self, x0: &[F], t: usize, rng: &mut R) -> Result<Vec<F>> {
        self.check_t(t)?;
        let s = self.sigmas[t];
        Ok(x0.iter().map(|&x| x + s * F::of(rng.sample::<f64, _>(StandardNormal))).collect())
    }
}
