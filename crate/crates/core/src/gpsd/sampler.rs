//! Heun integration of the probability-flow ODE over a whole core sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{check_shape, Denoiser};
use crate::error::{ensure, Result};
use crate::ftm::CoreSequence;
use crate::gp::NoiseSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub num_steps: usize,
    /// Warp exponent `rho` of the EDM time discretization.
    pub rho: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_max: 80.0,
            sigma_min: 0.002,
            num_steps: 40,
            rho: 7.0,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma_max > 0.0 && self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max,
            "schedule needs 0 < sigma_min <= sigma_max"
        );
        ensure!(self.num_steps >= 1, "schedule needs at least one step");
        ensure!(self.rho > 0.0, "rho must be > 0");
        Ok(())
    }

    /// `num_steps + 1` noise levels from `sigma_max` down to exactly 0.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.num_steps;
        let (hi, lo) = (self.sigma_max.powf(1.0 / self.rho), self.sigma_min.powf(1.0 / self.rho));
        let mut out: Vec<f64> = (0..n)
            .map(|i| {
                if n == 1 {
                    self.sigma_max
                } else {
                    (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(self.rho)
                }
            })
            .collect();
        out.push(0.0);
        ensure!(
            out.windows(2).all(|w| w[0] > w[1]),
            "schedule is not strictly decreasing; use sigma_min < sigma_max"
        );
        Ok(out)
    }
}

/// Called after every ODE step with the step index, the new noise level and the
/// sequence, which it may modify in place.
pub type StepHook<'a> = dyn FnMut(usize, f64, &mut [f64]) -> Result<()> + 'a;

/// Integrates from `init` (at `sigmas[0]`) to `sigma = 0`. Returns the final
/// sequence; when `trace` is given, every intermediate state is pushed to it.
pub fn heun_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sigmas: &[f64],
    times: &[f64],
    init: Vec<f64>,
    mut hook: Option<&mut StepHook<'_>>,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    check_shape(&init, times, denoiser.core_dim())?;
    ensure!(sigmas.len() >= 2, "need at least one step");
    let mut x = init;
    if let Some(t) = trace.as_deref_mut() {
        t.push(x.clone());
    }
    for i in 0..sigmas.len() - 1 {
        let (s, s_next) = (sigmas[i], sigmas[i + 1]);
        let den = denoiser.denoise(&x, s, times)?;
        let d: Vec<f64> = x.iter().zip(&den).map(|(a, b)| (a - b) / s).collect();
        let h = s_next - s;
        let mut next: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        if s_next != 0.0 {
            let den2 = denoiser.denoise(&next, s_next, times)?;
            for j in 0..next.len() {
                let d2 = (next[j] - den2[j]) / s_next;
                next[j] = x[j] + h * 0.5 * (d[j] + d2);
            }
        }
        x = next;
        if let Some(f) = hook.as_deref_mut() {
            f(i, s_next, &mut x)?;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(x.clone());
        }
    }
    Ok(x)
}

/// Initial state `sigma_max · L z` drawn from `noise` with a seeded generator.
pub fn initial_noise(noise: &NoiseSource, times: &[f64], dim: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    noise.sample(times, dim, sigma, &mut rng)
}

pub fn unconditional_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    target_times: &[f64],
    ranks: &[usize],
    noise: &NoiseSource,
    seed: u64,
) -> Result<CoreSequence> {
    let dim: usize = ranks.iter().product();
    ensure!(dim == denoiser.core_dim(), "ranks do not match the denoiser core size");
    ensure!(
        target_times.windows(2).all(|w| w[0] < w[1]),
        "target times must be strictly increasing"
    );
    let sigmas = schedule.sigmas()?;
    let init = initial_noise(noise, target_times, dim, sigmas[0], seed)?;
    let out = heun_sample(denoiser, &sigmas, target_times, init, None, None)?;
    CoreSequence::from_flat(target_times.to_vec(), ranks, &out)
}
