//! Observation guidance for the core-sequence sampler.
//!
//! DPS pushes each observed core towards its own observations. Message passing
//! additionally predicts the core at every observed time from all *other* cores
//! through the GP prior and sends the resulting likelihood gradient to them.
//!
//! Everything here lives in the sampler's coordinates: cores are standardized, so
//! an observation model `y ≈ A vec(W_raw)` becomes `y − A μ ≈ (A diag(s)) vec(W)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ftm::{CoreSequence, CoreStandardizer, ObservationSet};
use crate::gp::{gpr_conditional, NoiseSource};
use crate::gpsd::{heun_sample, initial_noise, Denoiser, NoiseSchedule};
use crate::tucker::{design_matrix, CoordinateTuple, FeatureMap};

/// Tolerance for matching observed timesteps to target timesteps.
pub const TIME_MATCH_TOL: f64 = 1e-9;

/// Extra diagonal on the message covariance when the observation noise is zero.
const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Dps,
    Mpdps,
}

/// How guidance gradients pass through the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Backpropagate through the denoiser.
    Exact,
    /// Treat `∂D/∂W` as the identity and skip backpropagation.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub zeta: f64,
    /// Observation noise `ε`; `None` uses the dataset's value, or 0.05 if unknown.
    #[serde(default)]
    pub obs_noise_std: Option<f64>,
    pub gamma: f64,
    pub jitter: f64,
    pub mode: GuidanceMode,
    pub jacobian: JacobianMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            zeta: 1e-2,
            obs_noise_std: None,
            gamma: 50.0,
            jitter: 1e-8,
            mode: GuidanceMode::Mpdps,
            jacobian: JacobianMode::Exact,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mode == GuidanceMode::None || self.zeta > 0.0,
            "zeta must be > 0 when guidance is enabled"
        );
        ensure!(self.gamma > 0.0, "gamma must be > 0");
        ensure!(self.jitter >= 0.0, "jitter must be >= 0");
        if let Some(e) = self.obs_noise_std {
            ensure!(e >= 0.0, "observation noise must be >= 0");
        }
        Ok(())
    }

    pub fn effective_noise_std(&self, obs: &ObservationSet) -> f64 {
        match self.obs_noise_std {
            Some(e) => e,
            None if obs.noise_std > 0.0 => obs.noise_std,
            None => 0.05,
        }
    }
}

/// Observations at one target row as a linear map of the standardized core.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearObservation {
    pub index: usize,
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LinearObservation {
    pub fn new(a: DMatrix<f64>, y: DVector<f64>, index: usize) -> Result<Self> {
        ensure!(a.nrows() == y.len(), "design matrix and values differ in length");
        ensure!(a.nrows() > 0, "no observations");
        Ok(Self { index, a, y })
    }

    pub fn from_coords<F: FeatureMap + ?Sized>(
        latents: &F,
        standardizer: &CoreStandardizer,
        coords: &[CoordinateTuple],
        values: &[f64],
        index: usize,
    ) -> Result<Self> {
        let a = design_matrix(latents, coords)?;
        ensure!(a.ncols() == standardizer.dim(), "standardizer does not match the core size");
        ensure!(values.len() == coords.len(), "coordinates and values differ in length");
        let mean = DVector::from_column_slice(&standardizer.mean);
        let y = DVector::from_column_slice(values) - &a * mean;
        let mut a = a;
        for (j, s) in standardizer.std.iter().enumerate() {
            a.column_mut(j).scale_mut(*s);
        }
        Self::new(a, y, index)
    }

    pub fn core_dim(&self) -> usize {
        self.a.ncols()
    }
}

fn eps_sq(eps: f64) -> f64 {
    if eps > 0.0 {
        eps * eps
    } else {
        SIGMA_FLOOR
    }
}

/// Gradient of `−(1/ε²) ‖y − A d‖²` with respect to the denoised core `d`.
pub fn dps_cotangent(obs: &LinearObservation, denoised_core: &[f64], eps: f64) -> Vec<f64> {
    let d = DVector::from_column_slice(denoised_core);
    let r = &obs.y - &obs.a * d;
    let g = obs.a.tr_mul(&r) * (2.0 / eps_sq(eps));
    g.iter().copied().collect()
}

/// DPS gradient with respect to the perturbed core at `obs.index`, through the
/// denoiser. Rows other than `obs.index` are zero.
pub fn dps_guidance<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    times: &[f64],
    obs: &LinearObservation,
    eps: f64,
    jacobian: JacobianMode,
) -> Result<Vec<f64>> {
    let dim = denoiser.core_dim();
    ensure!(obs.core_dim() == dim, "observation model does not match the core size");
    ensure!(obs.index < times.len(), "observation row {} out of range", obs.index);
    let (den, _) = denoiser.vjp(x, sigma, times, &[])?;
    let n = obs.index;
    let mut cot = vec![0.0; x.len()];
    cot[n * dim..(n + 1) * dim].copy_from_slice(&dps_cotangent(obs, &den[n * dim..(n + 1) * dim], eps));
    let mut g = pull_back(denoiser, x, sigma, times, vec![cot], jacobian)?.pop().unwrap();
    keep_only_row(&mut g, n, dim);
    Ok(g)
}

/// Message operands for one observed row `t_l` against the rest of the target grid.
#[derive(Clone, Debug)]
pub struct GuidanceOperands {
    pub obs: LinearObservation,
    /// Target rows other than `obs.index`, in order.
    pub residual: Vec<usize>,
    /// GPR weights over `residual`.
    pub weights: Vec<f64>,
    pub variance: f64,
    /// `[w_1 A, …, w_{M−1} A]`.
    pub b: DMatrix<f64>,
    /// `ε² I + v A Aᵀ`.
    pub sigma_tilde: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

pub fn build_guidance_operands(
    obs: LinearObservation,
    target_times: &[f64],
    gamma: f64,
    eps: f64,
    jitter: f64,
) -> Result<GuidanceOperands> {
    ensure!(target_times.len() >= 2, "message passing needs at least two target times");
    ensure!(obs.index < target_times.len(), "observation row out of range");
    let l = obs.index;
    let residual: Vec<usize> = (0..target_times.len()).filter(|&m| m != l).collect();
    let rest: Vec<f64> = residual.iter().map(|&m| target_times[m]).collect();
    let cond = gpr_conditional(target_times[l], &rest, gamma, jitter)?;
    let (n, p) = (obs.a.nrows(), obs.a.ncols());
    let mut b = DMatrix::zeros(n, residual.len() * p);
    for (k, w) in cond.weights.iter().enumerate() {
        b.columns_mut(k * p, p).copy_from(&(&obs.a * *w));
    }
    let mut sigma_tilde = (&obs.a * obs.a.transpose()) * cond.variance;
    for i in 0..n {
        sigma_tilde[(i, i)] += eps_sq(eps);
    }
    let chol = Cholesky::new(sigma_tilde.clone()).ok_or_else(|| {
        Error::numerical(format!(
            "message covariance at row {l} is not positive definite; increase the observation noise or jitter"
        ))
    })?;
    Ok(GuidanceOperands {
        obs,
        residual,
        weights: cond.weights,
        variance: cond.variance,
        b,
        sigma_tilde,
        chol,
    })
}

/// Denoised cores of the residual rows, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisedStack {
    pub matrix: DMatrix<f64>,
}

impl DenoisedStack {
    pub fn from_sequence(denoised: &[f64], residual: &[usize], dim: usize) -> Result<Self> {
        ensure!(denoised.len() % dim == 0, "denoised buffer is not a whole number of cores");
        let len = denoised.len() / dim;
        ensure!(residual.iter().all(|&m| m < len), "residual row out of range");
        let matrix = DMatrix::from_fn(residual.len(), dim, |k, j| denoised[residual[k] * dim + j]);
        Ok(Self { matrix })
    }

    /// Row-stacked `T`.
    pub fn vec(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.matrix.len(),
            (0..self.matrix.nrows()).flat_map(|k| self.matrix.row(k).iter().copied().collect::<Vec<_>>()),
        )
    }
}

impl GuidanceOperands {
    pub fn index(&self) -> usize {
        self.obs.index
    }

    /// `y − B T`.
    pub fn residual_vector(&self, stack: &DenoisedStack) -> Result<DVector<f64>> {
        ensure!(
            stack.matrix.nrows() == self.residual.len() && stack.matrix.ncols() == self.obs.core_dim(),
            "denoised stack does not align with the residual rows"
        );
        let pred = stack.matrix.tr_mul(&DVector::from_column_slice(&self.weights));
        Ok(&self.obs.y - &self.obs.a * pred)
    }

    /// `−½ rᵀ Σ̃⁻¹ r`.
    pub fn log_likelihood(&self, stack: &DenoisedStack) -> Result<f64> {
        let r = self.residual_vector(stack)?;
        Ok(-0.5 * r.dot(&self.chol.solve(&r)))
    }

    /// Gradient of [`Self::log_likelihood`] with respect to each stacked core, laid
    /// out as a full sequence (`len x dim`) whose row `t_l` is zero.
    pub fn message_cotangent(&self, stack: &DenoisedStack, len: usize) -> Result<Vec<f64>> {
        let r = self.residual_vector(stack)?;
        let base = self.obs.a.tr_mul(&self.chol.solve(&r));
        let dim = self.obs.core_dim();
        let mut out = vec![0.0; len * dim];
        for (&m, &w) in self.residual.iter().zip(&self.weights) {
            for j in 0..dim {
                out[m * dim + j] = w * base[j];
            }
        }
        Ok(out)
    }
}

/// Message gradients `G_{t_l, t_m}` for every residual row, through the denoiser.
pub fn message_guidance<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    times: &[f64],
    ops: &GuidanceOperands,
    jacobian: JacobianMode,
) -> Result<Vec<f64>> {
    let dim = denoiser.core_dim();
    ensure!(ops.residual.len() + 1 == times.len(), "operands were built for a different target grid");
    let (den, _) = denoiser.vjp(x, sigma, times, &[])?;
    let stack = DenoisedStack::from_sequence(&den, &ops.residual, dim)?;
    let cot = ops.message_cotangent(&stack, times.len())?;
    let mut g = pull_back(denoiser, x, sigma, times, vec![cot], jacobian)?.pop().unwrap();
    zero_row(&mut g, ops.index(), dim);
    Ok(g)
}

fn pull_back<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    times: &[f64],
    cots: Vec<Vec<f64>>,
    jacobian: JacobianMode,
) -> Result<Vec<Vec<f64>>> {
    match jacobian {
        JacobianMode::Frozen => Ok(cots),
        JacobianMode::Exact => Ok(denoiser.vjp(x, sigma, times, &cots)?.1),
    }
}

fn keep_only_row(g: &mut [f64], n: usize, dim: usize) {
    for (m, row) in g.chunks_mut(dim).enumerate() {
        if m != n {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn zero_row(g: &mut [f64], n: usize, dim: usize) {
    g[n * dim..(n + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
}

/// Everything guidance needs for one sampling run, built once.
#[derive(Clone, Debug)]
pub struct GuidanceSet {
    pub target_times: Vec<f64>,
    pub observations: Vec<LinearObservation>,
    /// Message operands, sorted by observed row (empty unless mode is `mpdps`).
    pub operands: Vec<GuidanceOperands>,
    pub eps: f64,
    pub zeta: f64,
    pub mode: GuidanceMode,
    pub jacobian: JacobianMode,
}

/// Target row of each observed timestep; errors when one has no match.
pub fn match_timesteps(observed: &[f64], target_times: &[f64]) -> Result<Vec<usize>> {
    observed
        .iter()
        .map(|&t| {
            target_times
                .iter()
                .position(|&u| (u - t).abs() <= TIME_MATCH_TOL)
                .ok_or_else(|| Error::contract(format!("observed timestep {t} is not among the target times")))
        })
        .collect()
}

impl GuidanceSet {
    pub fn build<F: FeatureMap + ?Sized>(
        latents: &F,
        standardizer: &CoreStandardizer,
        obs: &ObservationSet,
        target_times: &[f64],
        config: &GuidanceConfig,
    ) -> Result<Self> {
        config.validate()?;
        obs.validate()?;
        ensure!(!target_times.is_empty(), "no target times");
        ensure!(
            target_times.windows(2).all(|w| w[0] < w[1]),
            "target times must be strictly increasing"
        );
        let observed = obs.observed_indices();
        let obs_times: Vec<f64> = observed.iter().map(|&m| obs.timesteps[m]).collect();
        let rows = match_timesteps(&obs_times, target_times)?;
        let eps = config.effective_noise_std(obs);
        let mut observations = Vec::with_capacity(rows.len());
        for (&m, &row) in observed.iter().zip(&rows) {
            observations.push(LinearObservation::from_coords(
                latents,
                standardizer,
                &obs.coords_at(m),
                &obs.values_at(m),
                row,
            )?);
        }
        observations.sort_by_key(|o| o.index);
        let operands = if config.mode == GuidanceMode::Mpdps && target_times.len() >= 2 {
            observations
                .iter()
                .map(|o| build_guidance_operands(o.clone(), target_times, config.gamma, eps, config.jitter))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            target_times: target_times.to_vec(),
            observations,
            operands,
            eps,
            zeta: config.zeta,
            mode: config.mode,
            jacobian: config.jacobian,
        })
    }
}

/// Total guidance for every core: the DPS term at observed rows plus all messages.
pub fn aggregate_guidance<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &[f64],
    sigma: f64,
    set: &GuidanceSet,
) -> Result<Vec<f64>> {
    let dim = denoiser.core_dim();
    let times = &set.target_times;
    if set.mode == GuidanceMode::None || set.observations.is_empty() {
        return Ok(vec![0.0; x.len()]);
    }
    let (den, _) = denoiser.vjp(x, sigma, times, &[])?;
    // (cotangent, row it targets, whether the pulled-back gradient keeps only that row)
    let mut cots = Vec::new();
    let mut masks = Vec::new();
    let mut ops = set.operands.iter().peekable();
    for o in &set.observations {
        let n = o.index;
        let mut cot = vec![0.0; x.len()];
        cot[n * dim..(n + 1) * dim].copy_from_slice(&dps_cotangent(o, &den[n * dim..(n + 1) * dim], set.eps));
        cots.push(cot);
        masks.push((n, true));
        if let Some(op) = ops.next_if(|op| op.index() == n) {
            let stack = DenoisedStack::from_sequence(&den, &op.residual, dim)?;
            cots.push(op.message_cotangent(&stack, times.len())?);
            masks.push((n, false));
        }
    }
    let pulled = pull_back(denoiser, x, sigma, times, cots, set.jacobian)?;
    let mut total = vec![0.0; x.len()];
    for (mut g, (n, only)) in pulled.into_iter().zip(masks) {
        if only {
            keep_only_row(&mut g, n, dim);
        } else {
            zero_row(&mut g, n, dim);
        }
        for (t, v) in total.iter_mut().zip(&g) {
            *t += v;
        }
    }
    Ok(total)
}

/// Guided Heun sampling. With mode `none` this is exactly the unconditional sampler.
pub fn mpdps_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    noise: &NoiseSource,
    set: &GuidanceSet,
    ranks: &[usize],
    seed: u64,
) -> Result<CoreSequence> {
    let dim: usize = ranks.iter().product();
    ensure!(dim == denoiser.core_dim(), "ranks do not match the denoiser core size");
    let times = &set.target_times;
    let sigmas = schedule.sigmas()?;
    let init = initial_noise(noise, times, dim, sigmas[0], seed)?;
    let out = if set.mode == GuidanceMode::None {
        heun_sample(denoiser, &sigmas, times, init, None, None)?
    } else {
        let zeta = set.zeta;
        ensure!(zeta > 0.0, "zeta must be > 0 when guidance is enabled");
        let mut hook = |_: usize, s: f64, x: &mut [f64]| -> Result<()> {
            let g = aggregate_guidance(denoiser, x, s, set)?;
            for (v, d) in x.iter_mut().zip(&g) {
                *v += zeta * d;
            }
            Ok(())
        };
        heun_sample(denoiser, &sigmas, times, init, Some(&mut hook), None)?
    };
    CoreSequence::from_flat(times.clone(), ranks, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpsd::IdentityDenoiser;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, p: usize, index: usize) -> LinearObservation {
        let a = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        LinearObservation::new(a, y, index).unwrap()
    }

    #[test]
    fn zero_residual_gives_zero_dps_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut o = random_obs(&mut rng, 3, 4, 0);
        let d = vec![0.2, -0.1, 0.5, 0.3];
        o.y = &o.a * DVector::from_column_slice(&d);
        assert!(dps_cotangent(&o, &d, 0.1).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dps_identity_single_observation_closed_form() {
        let a = DMatrix::from_row_slice(1, 3, &[0.5, -1.0, 2.0]);
        let y = DVector::from_vec(vec![1.5]);
        let o = LinearObservation::new(a, y, 1).unwrap();
        let x = vec![9.0, 9.0, 9.0, 0.1, 0.2, 0.3, 9.0, 9.0, 9.0];
        let eps = 0.2;
        let g = dps_guidance(&IdentityDenoiser { dim: 3 }, &x, 1.0, &[0.0, 0.5, 1.0], &o, eps, JacobianMode::Exact)
            .unwrap();
        let r = 1.5 - (0.5 * 0.1 - 0.2 + 2.0 * 0.3);
        let want = [0.5 * r, -r, 2.0 * r].map(|v| 2.0 / (eps * eps) * v);
        assert!(g[..3].iter().chain(&g[6..]).all(|&v| v == 0.0));
        for (a, b) in g[3..6].iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_conditional_gives_plain_noise_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = random_obs(&mut rng, 4, 3, 0);
        // the target coincides with a residual time, so the GPR variance is ~0
        let ops = build_guidance_operands(o, &[0.5, 0.5 + 1e-13], 50.0, 0.1, 1e-10).unwrap();
        assert!(ops.variance < 1e-8);
        let diff = &ops.sigma_tilde - DMatrix::identity(4, 4) * 0.01;
        assert!(diff.amax() < 1e-6);
    }

    #[test]
    fn isolated_observation_sends_no_messages() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let o = random_obs(&mut rng, 4, 3, 0);
        let times = [0.0, 5.0, 6.0];
        let ops = build_guidance_operands(o, &times, 50.0, 0.1, 1e-8).unwrap();
        assert!(ops.b.amax() < 1e-100);
        let x: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = message_guidance(&IdentityDenoiser { dim: 3 }, &x, 1.0, &times, &ops, JacobianMode::Exact).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn b_times_stack_is_gpr_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times = [0.0, 0.1, 0.25, 0.3, 0.5];
        let o = random_obs(&mut rng, 6, 4, 2);
        let ops = build_guidance_operands(o, &times, 50.0, 0.05, 1e-8).unwrap();
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stack = DenoisedStack::from_sequence(&d, &ops.residual, 4).unwrap();
        let bt = &ops.b * stack.vec();
        let mut pred = DVector::zeros(4);
        for (&m, &w) in ops.residual.iter().zip(&ops.weights) {
            pred += DVector::from_column_slice(&d[m * 4..(m + 1) * 4]) * w;
        }
        let via_a = &ops.obs.a * pred;
        assert!((bt - via_a).amax() < 1e-10);
    }

    #[test]
    fn message_single_residual_identity_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let times = [0.2, 0.3];
        let o = random_obs(&mut rng, 3, 2, 0);
        let ops = build_guidance_operands(o, &times, 50.0, 0.3, 1e-8).unwrap();
        let x = vec![0.7, -0.4, 0.1, 0.9];
        let g = message_guidance(&IdentityDenoiser { dim: 2 }, &x, 1.0, &times, &ops, JacobianMode::Exact).unwrap();
        let w = DVector::from_column_slice(&x[2..]);
        let r = &ops.obs.y - &ops.b * &w;
        let want = ops.b.transpose() * ops.sigma_tilde.clone().lu().solve(&r).unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!((DVector::from_column_slice(&g[2..]) - want).amax() < 1e-10);
    }

    #[test]
    fn timesteps_must_match_targets() {
        assert_eq!(match_timesteps(&[0.5, 1.0], &[0.0, 0.5, 1.0]).unwrap(), vec![1, 2]);
        assert!(match_timesteps(&[0.55], &[0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn empty_observation_set_gives_zero_guidance() {
        let set = GuidanceSet {
            target_times: vec![0.0, 1.0],
            observations: Vec::new(),
            operands: Vec::new(),
            eps: 0.1,
            zeta: 1.0,
            mode: GuidanceMode::Mpdps,
            jacobian: JacobianMode::Exact,
        };
        let g = aggregate_guidance(&IdentityDenoiser { dim: 2 }, &[1.0, 2.0, 3.0, 4.0], 1.0, &set).unwrap();
        assert_eq!(g, vec![0.0; 4]);
    }

    #[test]
    fn one_observed_of_two_enumerates_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let times = vec![0.0, 0.1];
        let o = random_obs(&mut rng, 3, 2, 0);
        let ops = build_guidance_operands(o.clone(), &times, 50.0, 0.2, 1e-8).unwrap();
        let set = GuidanceSet {
            target_times: times.clone(),
            observations: vec![o.clone()],
            operands: vec![ops.clone()],
            eps: 0.2,
            zeta: 1.0,
            mode: GuidanceMode::Mpdps,
            jacobian: JacobianMode::Exact,
        };
        let den = IdentityDenoiser { dim: 2 };
        let x = vec![0.3, -0.2, 0.6, 0.1];
        let total = aggregate_guidance(&den, &x, 1.0, &set).unwrap();
        let dps = dps_guidance(&den, &x, 1.0, &times, &o, 0.2, JacobianMode::Exact).unwrap();
        let msg = message_guidance(&den, &x, 1.0, &times, &ops, JacobianMode::Exact).unwrap();
        assert_eq!(&total[..2], &dps[..2]);
        assert_eq!(&total[2..], &msg[2..]);
        assert!(msg[2..].iter().any(|v| v.abs() > 0.0));
    }
}
