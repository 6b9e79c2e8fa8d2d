//! RBF-kernel Gaussian processes over the time axis.
//!
//! Kernels have unit marginal variance (`κ(t, t) = 1`); noise scale enters from the
//! outside. Timestamps are expected on a normalized `[0, 1]` horizon so that `gamma`
//! means the same thing for every sequence length.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ftm::CoreSequence;

pub const DEFAULT_JITTER: f64 = 1e-8;
/// Number of times the jitter is doubled before a factorization is declared failed.
pub const JITTER_RETRIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernelConfig {
    pub gamma: f64,
    pub jitter: f64,
}

impl RbfKernelConfig {
    pub fn new(gamma: f64, jitter: f64) -> Result<Self> {
        ensure!(gamma > 0.0 && gamma.is_finite(), "gamma must be > 0, got {gamma}");
        ensure!(jitter >= 0.0, "jitter must be >= 0, got {jitter}");
        Ok(Self { gamma, jitter })
    }
}

pub fn rbf_kernel(ti: f64, tj: f64, gamma: f64) -> Result<f64> {
    ensure!(gamma > 0.0, "gamma must be > 0, got {gamma}");
    Ok(rbf(ti, tj, gamma))
}

#[inline]
fn rbf(ti: f64, tj: f64, gamma: f64) -> f64 {
    let d = ti - tj;
    (-gamma * d * d).exp()
}

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub times: Vec<f64>,
    /// Kernel matrix including the jitter on the diagonal.
    pub matrix: DMatrix<f64>,
    pub jitter: f64,
}

impl KernelMatrix {
    pub fn new(times: &[f64], cfg: RbfKernelConfig) -> Result<Self> {
        ensure!(!times.is_empty(), "kernel matrix needs at least one time");
        let m = times.len();
        let matrix = DMatrix::from_fn(m, m, |i, j| {
            rbf(times[i], times[j], cfg.gamma) + if i == j { cfg.jitter } else { 0.0 }
        });
        Ok(Self {
            times: times.to_vec(),
            matrix,
            jitter: cfg.jitter,
        })
    }

    /// Cholesky factor, doubling the diagonal jitter up to [`JITTER_RETRIES`] times.
    pub fn cholesky(&self) -> Result<(Cholesky<f64, Dyn>, f64)> {
        let mut extra = 0.0;
        let mut bump = self.jitter.max(DEFAULT_JITTER);
        for attempt in 0..=JITTER_RETRIES {
            let mut k = self.matrix.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += extra;
            }
            if let Some(ch) = Cholesky::new(k) {
                return Ok((ch, self.jitter + extra));
            }
            if attempt < JITTER_RETRIES {
                extra = bump;
                bump *= 2.0;
            }
        }
        Err(Error::numerical(format!(
            "kernel matrix over {} times is not positive definite even with jitter {:.3e}",
            self.times.len(),
            self.jitter + extra
        )))
    }
}

/// Source of diffusion noise across a sequence of cores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSource {
    /// Independent GP per core element with RBF kernel of the given `gamma`.
    Gp { gamma: f64 },
    /// Independent standard normals for every element and time.
    Iid,
}

impl NoiseSource {
    /// Lower-triangular factor `L` with `L Lᵀ` the temporal covariance over `times`.
    pub fn factor(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        match *self {
            NoiseSource::Iid => Ok(DMatrix::identity(times.len(), times.len())),
            NoiseSource::Gp { gamma } => {
                let km = KernelMatrix::new(times, RbfKernelConfig::new(gamma, DEFAULT_JITTER)?)?;
                Ok(km.cholesky()?.0.l())
            }
        }
    }

    /// Draws `sigma * L z` for every core element; output is `times.len() x dim` row-major.
    pub fn sample<R: Rng>(&self, times: &[f64], dim: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
        let l = self.factor(times)?;
        Ok(sample_with_factor(&l, dim, sigma, rng))
    }
}

pub(crate) fn sample_with_factor<R: Rng>(l: &DMatrix<f64>, dim: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let m = l.nrows();
    let mut out = vec![0.0; m * dim];
    let mut z = vec![0.0; m];
    for e in 0..dim {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[(i, j)] * z[j];
            }
            out[i * dim + e] = sigma * acc;
        }
    }
    out
}

/// Core-shaped noise: every core element is an independent `N(0, sigma² K)` draw
/// across `times`.
pub fn sample_gp_noise(times: &[f64], ranks: &[usize], gamma: f64, sigma: f64, seed: u64) -> Result<CoreSequence> {
    ensure!(sigma >= 0.0, "sigma must be >= 0, got {sigma}");
    ensure!(!ranks.is_empty() && ranks.iter().all(|&r| r >= 1), "ranks must be >= 1");
    ensure!(
        times.windows(2).all(|w| w[0] < w[1]),
        "times must be strictly increasing"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim: usize = ranks.iter().product();
    let flat = NoiseSource::Gp { gamma }.sample(times, dim, sigma, &mut rng)?;
    CoreSequence::from_flat(times.to_vec(), ranks, &flat)
}

/// Weights `kᵀ (K + jitter I)⁻¹` and variance `1 - kᵀ K⁻¹ k` of the GP at `target`
/// given values at `rest`.
#[derive(Clone, Debug, PartialEq)]
pub struct GprConditional {
    pub weights: Vec<f64>,
    pub variance: f64,
}

pub fn gpr_conditional(target: f64, rest: &[f64], gamma: f64, jitter: f64) -> Result<GprConditional> {
    ensure!(!rest.is_empty(), "GPR conditional needs at least one conditioning time");
    ensure!(gamma > 0.0, "gamma must be > 0, got {gamma}");
    ensure!(jitter >= 0.0, "jitter must be >= 0");
    if jitter == 0.0 {
        ensure!(
            rest.iter().all(|&t| (t - target).abs() > 1e-12),
            "conditioning times contain the target; use jitter > 0"
        );
    }
    let km = KernelMatrix::new(rest, RbfKernelConfig { gamma, jitter })?;
    let chol = Cholesky::new(km.matrix.clone()).ok_or_else(|| {
        Error::numerical(format!(
            "conditioning kernel over {} times is singular at jitter {jitter:.1e}",
            rest.len()
        ))
    })?;
    let k = DVector::from_iterator(rest.len(), rest.iter().map(|&t| rbf(target, t, gamma)));
    let mut w = chol.solve(&k);
    // one round of refinement against the unfactored system
    let resid = &k - &km.matrix * &w;
    w += chol.solve(&resid);
    let variance = (1.0 - k.dot(&w)).max(0.0);
    Ok(GprConditional {
        weights: w.iter().copied().collect(),
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(rbf_kernel(0.3, 0.3, 7.0).unwrap(), 1.0);
        let v = rbf_kernel(0.0, 0.1, 100.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.36788).abs() < 1e-5);
        assert_eq!(rbf_kernel(0.2, 0.9, 50.0).unwrap(), rbf_kernel(0.9, 0.2, 50.0).unwrap());
        assert!(rbf_kernel(0.0, 1.0, 0.0).is_err());
        assert!(rbf_kernel(0.0, 1.0, -1.0).is_err());
        assert!(RbfKernelConfig::new(50.0, 0.0).is_ok());
        assert!(RbfKernelConfig::new(50.0, -1e-3).is_err());
    }

    #[test]
    fn kernel_matrix_is_symmetric_psd_on_irregular_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let m = rng.random_range(2..20);
            let mut t: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            t.sort_by(f64::total_cmp);
            let km = KernelMatrix::new(&t, RbfKernelConfig::new(50.0, DEFAULT_JITTER).unwrap()).unwrap();
            let k = &km.matrix;
            assert!((k - k.transpose()).amax() <= 1e-12);
            let eig = k.clone().symmetric_eigen();
            assert!(eig.eigenvalues.min() >= -1e-9);
        }
    }

    #[test]
    fn single_time_noise_is_iid_scaled() {
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let noise = NoiseSource::Gp { gamma: 50.0 }.sample(&[0.5], 6, 2.0, &mut a).unwrap();
        let plain: Vec<f64> = (0..6).map(|_| 2.0 * b.sample::<f64, _>(StandardNormal)).collect();
        for (x, y) in noise.iter().zip(&plain) {
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0));
        }
        let zero = NoiseSource::Gp { gamma: 50.0 }.sample(&[0.0, 0.5], 3, 0.0, &mut a).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gp_noise_covariance_matches_kernel() {
        let times: Vec<f64> = (0..16).map(|m| m as f64 / 15.0).collect();
        let sigma = 1.5;
        let draws = 10_000;
        let mut cov = DMatrix::<f64>::zeros(16, 16);
        let noise = sample_gp_noise(&times, &[draws], 50.0, sigma, 11).unwrap();
        // each of the `draws` core elements is an independent sequence
        for e in 0..draws {
            let v = DVector::from_iterator(16, noise.cores.iter().map(|c| c.data()[e]));
            cov += &v * v.transpose();
        }
        cov /= draws as f64;
        let km = KernelMatrix::new(&times, RbfKernelConfig::new(50.0, 0.0).unwrap()).unwrap();
        let target = km.matrix * (sigma * sigma);
        let rel = (&cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative covariance error {rel}");
    }

    #[test]
    fn gp_noise_contracts() {
        assert!(sample_gp_noise(&[0.0, 0.5], &[2], 50.0, -1.0, 0).is_err());
        assert!(sample_gp_noise(&[0.5, 0.0], &[2], 50.0, 1.0, 0).is_err());
        let a = sample_gp_noise(&[0.0, 0.5], &[2, 2], 50.0, 1.0, 3).unwrap();
        let b = sample_gp_noise(&[0.0, 0.5], &[2, 2], 50.0, 1.0, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conditional_edge_cases() {
        // interpolation at a conditioning point
        let c = gpr_conditional(0.4, &[0.4], 50.0, 1e-10).unwrap();
        assert!((c.weights[0] - 1.0).abs() < 1e-8);
        assert!(c.variance < 1e-8);
        assert!(gpr_conditional(0.4, &[0.4], 50.0, 0.0).is_err());
        assert!(gpr_conditional(0.4, &[], 50.0, 1e-8).is_err());

        // prior reversion far away
        let c = gpr_conditional(0.0, &[1.0, 1.1], 50.0, 1e-8).unwrap();
        assert!(c.weights.iter().all(|w| w.abs() < 1e-15));
        assert!((c.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conditional_variance_shrinks_with_more_data() {
        let sets: [&[f64]; 4] = [&[0.1], &[0.1, 0.3], &[0.1, 0.3, 0.6], &[0.1, 0.3, 0.45, 0.6]];
        let mut last = f64::INFINITY;
        for s in sets {
            let c = gpr_conditional(0.5, s, 50.0, 1e-8).unwrap();
            assert!(c.variance <= last + 1e-12);
            assert!(c.variance <= 1.0 + 1e-8);
            last = c.variance;
        }
    }

    #[test]
    fn constant_sequence_is_reproduced_near_data() {
        let rest = [0.2, 0.3, 0.4];
        let mut last = f64::INFINITY;
        for gap in [0.2, 0.05, 0.01, 1e-3, 1e-5] {
            let c = gpr_conditional(0.4 + gap, &rest, 50.0, 1e-8).unwrap();
            let pred: f64 = c.weights.iter().map(|w| 3.0 * w).sum();
            let err = (pred - 3.0).abs();
            assert!(err < last, "gap {gap}: {err} vs {last}");
            last = err;
        }
        assert!(last < 1e-4);
    }
}
