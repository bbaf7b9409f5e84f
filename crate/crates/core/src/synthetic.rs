//! Seeded synthetic anomaly datasets for smoke tests and desk-scale checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Two isotropic unit-variance Gaussian clusters centered at `±separation`
/// on every axis, plus uniform anomalies in the box `[-half_width, half_width]^d`.
#[derive(Debug, Clone)]
pub struct TwoClusterConfig {
    pub dim: usize,
    pub inliers: usize,
    /// Anomaly count as a fraction of the inlier count.
    pub anomaly_fraction: f64,
    pub separation: f64,
    pub half_width: f64,
    pub seed: u64,
}

impl Default for TwoClusterConfig {
    fn default() -> Self {
        Self { dim: 6, inliers: 2000, anomaly_fraction: 0.05, separation: 2.0, half_width: 6.0, seed: 0 }
    }
}

impl TwoClusterConfig {
    /// Rows are shuffled so labels are not sorted.
    pub fn generate<F: Scalar>(&self) -> Result<Dataset<F>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let anomalies = (self.inliers as f64 * self.anomaly_fraction).round() as usize;
        let mut rows: Vec<(Vec<f64>, u8)> = Vec::with_capacity(self.inliers + anomalies);
        for i in 0..self.inliers {
            let center = if i % 2 == 0 { self.separation } else { -self.separation };
            let x = (0..self.dim).map(|_| center + rng.sample::<f64, _>(StandardNormal)).collect();
            rows.push((x, 0));
        }
        for _ in 0..anomalies {
            let x = (0..self.dim).map(|_| rng.random_range(-self.half_width..self.half_width)).collect();
            rows.push((x, 1));
        }
        // Fisher-Yates with the same stream
        for i in (1..rows.len()).rev() {
            let j = rng.random_range(0..=i);
            rows.swap(i, j);
        }
        let labels = rows.iter().map(|r| r.1).collect();
        let data = rows.iter().flat_map(|r| r.0.iter().map(|&v| F::of(v))).collect();
        Dataset::new("two_cluster", Matrix::from_vec(rows.len(), self.dim, data)?, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let config = TwoClusterConfig { inliers: 200, ..Default::default() };
        let a: Dataset<f64> = config.generate().unwrap();
        assert_eq!(a.len(), 210);
        assert_eq!(a.anomaly_count(), 10);
        assert_eq!(a, config.generate().unwrap());
    }
}
