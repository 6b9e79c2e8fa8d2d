//! Preconditioned denoisers over core sequences.
//!
//! Sequences are passed as `len x core_dim` row-major buffers. Every denoiser also
//! exposes vector-Jacobian products so guidance can differentiate through it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{silu, silu_backward, Conv1d, Linear, ParamLayout};

/// EDM preconditioning coefficients for data standard deviation `sigma_data`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let sd2 = sigma_data * sigma_data;
        let s2 = sigma * sigma;
        Self {
            c_skip: sd2 / (s2 + sd2),
            c_out: sigma * sigma_data / (s2 + sd2).sqrt(),
            c_in: 1.0 / (s2 + sd2).sqrt(),
            c_noise: if sigma > 0.0 { sigma.ln() / 4.0 } else { f64::NEG_INFINITY },
        }
    }
}

/// A map `D(x; sigma, times)` from a noisy core sequence to a clean estimate.
pub trait Denoiser {
    fn core_dim(&self) -> usize;

    /// Denoises one sequence `x` (`times.len() x core_dim`).
    fn denoise(&self, x: &[f64], sigma: f64, times: &[f64]) -> Result<Vec<f64>>;

    /// Returns `D(x)` and `J_D(x)ᵀ g` for each cotangent in `cotangents`.
    fn vjp(&self, x: &[f64], sigma: f64, times: &[f64], cotangents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

pub(crate) fn check_shape(x: &[f64], times: &[f64], dim: usize) -> Result<()> {
    ensure!(!times.is_empty(), "denoiser input has no timesteps");
    ensure!(
        x.len() == times.len() * dim,
        "denoiser input has {} values, expected {} x {}",
        x.len(),
        times.len(),
        dim
    );
    Ok(())
}

/// `D(x) = x`.
#[derive(Clone, Debug)]
pub struct IdentityDenoiser {
    pub dim: usize,
}

impl Denoiser for IdentityDenoiser {
    fn core_dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], _sigma: f64, times: &[f64]) -> Result<Vec<f64>> {
        check_shape(x, times, self.dim)?;
        Ok(x.to_vec())
    }

    fn vjp(&self, x: &[f64], _sigma: f64, times: &[f64], cotangents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_shape(x, times, self.dim)?;
        Ok((x.to_vec(), cotangents.to_vec()))
    }
}

/// Always returns the same sequence (or the same core for every row).
#[derive(Clone, Debug)]
pub struct ConstantDenoiser {
    pub dim: usize,
    /// Either one core (broadcast over time) or a full `len x dim` sequence.
    pub target: Vec<f64>,
}

impl Denoiser for ConstantDenoiser {
    fn core_dim(&self) -> usize {
        self.dim
    }

    fn denoise(&self, x: &[f64], _sigma: f64, times: &[f64]) -> Result<Vec<f64>> {
        check_shape(x, times, self.dim)?;
        if self.target.len() == self.dim {
            Ok(self.target.repeat(times.len()))
        } else {
            ensure!(self.target.len() == x.len(), "constant target does not match input length");
            Ok(self.target.clone())
        }
    }

    fn vjp(&self, x: &[f64], sigma: f64, times: &[f64], cotangents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.denoise(x, sigma, times)?;
        Ok((d, cotangents.iter().map(|g| vec![0.0; g.len()]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub hidden: usize,
    pub blocks: usize,
    /// Sinusoid frequencies per conditioning input (noise level and time).
    pub embed_freqs: usize,
    pub kernel: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        Self {
            hidden: 64,
            blocks: 2,
            embed_freqs: 6,
            kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    conv: Conv1d,
    /// Scale and shift of the conv output from the embedding.
    film: Linear,
    lin: Linear,
}

/// Residual conv network wrapped in EDM preconditioning.
///
/// Per row: `h = W_in (c_in x) + e(σ, t)`, then blocks
/// `h += Lin(silu(Conv(silu(h)) ⊙ (1 + a_b(e)) + b_b(e)))` with the convolution
/// running along the sequence axis, and `D = c_skip x + c_out W_out silu(h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdmDenoiser {
    pub arch: DenoiserArch,
    pub core_dim: usize,
    pub sigma_data: f64,
    emb1: Linear,
    emb2: Linear,
    inp: Linear,
    blocks: Vec<Block>,
    out: Linear,
    pub(crate) params: Vec<f64>,
}

struct Tape {
    emb_in: Vec<f64>,
    e1: Vec<f64>,
    e1a: Vec<f64>,
    emb: Vec<f64>,
    xin: Vec<f64>,
    /// Per block: input `h`, `silu(h)`, conv output, scale/shift, modulated conv
    /// output, its activation.
    blocks: Vec<[Vec<f64>; 6]>,
    h: Vec<f64>,
    ho: Vec<f64>,
}

impl EdmDenoiser {
    pub fn new(core_dim: usize, arch: DenoiserArch, sigma_data: f64, seed: u64) -> Result<Self> {
        ensure!(core_dim >= 1, "core dimension must be >= 1");
        ensure!(arch.hidden >= 1 && arch.embed_freqs >= 1, "hidden width and embedding must be >= 1");
        ensure!(arch.kernel % 2 == 1, "convolution kernel width must be odd");
        ensure!(sigma_data > 0.0, "sigma_data must be > 0");
        let h = arch.hidden;
        let mut layout = ParamLayout::default();
        let emb1 = Linear::new(&mut layout, 4 * arch.embed_freqs + 2, h);
        let emb2 = Linear::new(&mut layout, h, h);
        let inp = Linear::new(&mut layout, core_dim, h);
        let blocks: Vec<Block> = (0..arch.blocks)
            .map(|_| Block {
                conv: Conv1d::new(&mut layout, h, arch.kernel),
                film: Linear::new(&mut layout, h, 2 * h),
                lin: Linear::new(&mut layout, h, h),
            })
            .collect();
        let out = Linear::new(&mut layout, h, core_dim);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        emb1.init_uniform(&mut params, &mut rng, fan(emb1.inp), fan(emb1.inp));
        emb2.init_uniform(&mut params, &mut rng, fan(h), fan(h));
        inp.init_uniform(&mut params, &mut rng, fan(core_dim), fan(core_dim));
        for b in &blocks {
            b.conv.init_uniform(&mut params, &mut rng, fan(h * arch.kernel));
            b.film.init_uniform(&mut params, &mut rng, 0.5 * fan(h), 0.0);
            b.lin.init_uniform(&mut params, &mut rng, 0.5 * fan(h), 0.0);
        }
        out.init_uniform(&mut params, &mut rng, 0.0, 0.0);
        Ok(Self {
            arch,
            core_dim,
            sigma_data,
            emb1,
            emb2,
            inp,
            blocks,
            out,
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        ensure!(p.len() == self.params.len(), "expected {} parameters, got {}", self.params.len(), p.len());
        self.params.copy_from_slice(p);
        Ok(())
    }

    fn embed_features(&self, sigma: f64, t: f64, out: &mut Vec<f64>) {
        let c = Precond::new(sigma, self.sigma_data).c_noise;
        // the noise embedding is unused at sigma = 0, where D is the identity
        let c = if c.is_finite() { c } else { 0.0 };
        for j in 0..self.arch.embed_freqs {
            let w = 2f64.powi(j as i32 - 1);
            out.push((w * c).sin());
            out.push((w * c).cos());
        }
        for j in 0..self.arch.embed_freqs {
            let w = std::f64::consts::PI * 2f64.powi(j as i32 - 1);
            out.push((w * t).sin());
            out.push((w * t).cos());
        }
        out.push(c);
        out.push(t);
    }

    /// Forward pass over `batch` sequences of length `len`, each with its own sigma.
    fn forward(&self, x: &[f64], sigmas: &[f64], times: &[f64], batch: usize, len: usize) -> (Vec<f64>, Tape) {
        let p = &self.params;
        let rows = batch * len;
        let dim = self.core_dim;
        let mut emb_in = Vec::with_capacity(rows * self.emb1.inp);
        for s in 0..batch {
            for m in 0..len {
                self.embed_features(sigmas[s], times[s * len + m], &mut emb_in);
            }
        }
        let e1 = self.emb1.forward(p, &emb_in, rows);
        let e1a = silu(&e1);
        let emb = self.emb2.forward(p, &e1a, rows);

        let mut xin = x.to_vec();
        for s in 0..batch {
            let c_in = Precond::new(sigmas[s], self.sigma_data).c_in;
            for v in &mut xin[s * len * dim..(s + 1) * len * dim] {
                *v *= c_in;
            }
        }
        let mut h = self.inp.forward(p, &xin, rows);
        add_assign(&mut h, &emb);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let a = silu(&h);
            let c = b.conv.forward(p, &a, batch, len);
            let ss = b.film.forward(p, &emb, rows);
            let hd = self.arch.hidden;
            let mut c2 = vec![0.0; c.len()];
            for r in 0..rows {
                for j in 0..hd {
                    c2[r * hd + j] = c[r * hd + j] * (1.0 + ss[r * 2 * hd + j]) + ss[r * 2 * hd + hd + j];
                }
            }
            let a2 = silu(&c2);
            let d = b.lin.forward(p, &a2, rows);
            let h_in = h.clone();
            add_assign(&mut h, &d);
            blocks.push([h_in, a, c, ss, c2, a2]);
        }
        let ho = silu(&h);
        let f = self.out.forward(p, &ho, rows);
        let mut out = vec![0.0; rows * dim];
        for s in 0..batch {
            let pc = Precond::new(sigmas[s], self.sigma_data);
            for i in s * len * dim..(s + 1) * len * dim {
                out[i] = pc.c_skip * x[i] + pc.c_out * f[i];
            }
        }
        let tape = Tape {
            emb_in,
            e1,
            e1a,
            emb,
            xin,
            blocks,
            h,
            ho,
        };
        (out, tape)
    }

    /// Backpropagates `g_out = dL/dD`; accumulates into `grads` when given and
    /// returns `dL/dx`.
    fn backward(
        &self,
        tape: &Tape,
        g_out: &[f64],
        sigmas: &[f64],
        batch: usize,
        len: usize,
        mut grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let p = &self.params;
        let rows = batch * len;
        let dim = self.core_dim;
        let mut gf = g_out.to_vec();
        for s in 0..batch {
            let c_out = Precond::new(sigmas[s], self.sigma_data).c_out;
            for v in &mut gf[s * len * dim..(s + 1) * len * dim] {
                *v *= c_out;
            }
        }
        let gho = self.out.backward(p, grads.as_deref_mut(), &tape.ho, &gf, rows);
        let mut gh = silu_backward(&tape.h, &gho);
        let mut gemb = vec![0.0; rows * self.arch.hidden];
        let hd = self.arch.hidden;
        for (b, [h_in, a, c, ss, c2, a2]) in self.blocks.iter().zip(&tape.blocks).rev() {
            let ga2 = b.lin.backward(p, grads.as_deref_mut(), a2, &gh, rows);
            let gc2 = silu_backward(c2, &ga2);
            let mut gc = vec![0.0; gc2.len()];
            for r in 0..rows {
                for j in 0..hd {
                    gc[r * hd + j] = gc2[r * hd + j] * (1.0 + ss[r * 2 * hd + j]);
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let mut gss = vec![0.0; ss.len()];
                for r in 0..rows {
                    for j in 0..hd {
                        gss[r * 2 * hd + j] = gc2[r * hd + j] * c[r * hd + j];
                        gss[r * 2 * hd + hd + j] = gc2[r * hd + j];
                    }
                }
                add_assign(&mut gemb, &b.film.backward(p, Some(g), &tape.emb, &gss, rows));
            }
            let ga = b.conv.backward(p, grads.as_deref_mut(), a, &gc, batch, len);
            add_assign(&mut gh, &silu_backward(h_in, &ga));
        }
        let gxin = self.inp.backward(p, grads.as_deref_mut(), &tape.xin, &gh, rows);
        if let Some(g) = grads {
            add_assign(&mut gemb, &gh);
            let ge1a = self.emb2.backward(p, Some(&mut *g), &tape.e1a, &gemb, rows);
            let ge1 = silu_backward(&tape.e1, &ge1a);
            self.emb1.backward(p, Some(g), &tape.emb_in, &ge1, rows);
        }
        let mut gx = vec![0.0; rows * dim];
        for s in 0..batch {
            let pc = Precond::new(sigmas[s], self.sigma_data);
            for i in s * len * dim..(s + 1) * len * dim {
                gx[i] = pc.c_skip * g_out[i] + pc.c_in * gxin[i];
            }
        }
        gx
    }

    /// Denoises a batch of equal-length sequences with per-sequence sigma.
    pub fn denoise_batch(&self, x: &[f64], sigmas: &[f64], times: &[f64], len: usize) -> Vec<f64> {
        self.forward(x, sigmas, times, sigmas.len(), len).0
    }

    /// Loss `Σ_b λ(σ_b) ‖D(x_b) − w_b‖² / (batch · len · dim)` and its parameter gradient.
    pub(crate) fn loss_and_grad(&self, x: &[f64], clean: &[f64], sigmas: &[f64], times: &[f64], len: usize) -> (f64, Vec<f64>) {
        let batch = sigmas.len();
        let dim = self.core_dim;
        let (d, tape) = self.forward(x, sigmas, times, batch, len);
        let n = (batch * len * dim) as f64;
        let mut loss = 0.0;
        let mut g = vec![0.0; d.len()];
        for s in 0..batch {
            let lam = edm_weight(sigmas[s], self.sigma_data);
            for i in s * len * dim..(s + 1) * len * dim {
                let r = d[i] - clean[i];
                loss += lam * r * r;
                g[i] = 2.0 * lam * r / n;
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        self.backward(&tape, &g, sigmas, batch, len, Some(&mut grads));
        (loss / n, grads)
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// `λ(σ) = (σ² + σ_data²) / (σ σ_data)²`.
pub fn edm_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

impl Denoiser for EdmDenoiser {
    fn core_dim(&self) -> usize {
        self.core_dim
    }

    fn denoise(&self, x: &[f64], sigma: f64, times: &[f64]) -> Result<Vec<f64>> {
        check_shape(x, times, self.core_dim)?;
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        Ok(self.forward(x, &[sigma], times, 1, times.len()).0)
    }

    fn vjp(&self, x: &[f64], sigma: f64, times: &[f64], cotangents: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        check_shape(x, times, self.core_dim)?;
        for g in cotangents {
            ensure!(g.len() == x.len(), "cotangent length does not match input");
        }
        if sigma == 0.0 {
            return Ok((x.to_vec(), cotangents.to_vec()));
        }
        let len = times.len();
        let k = cotangents.len().max(1);
        // replicate the point so all cotangents share one batched pass
        let xs = x.repeat(k);
        let ts = times.repeat(k);
        let sig = vec![sigma; k];
        let (d, tape) = self.forward(&xs, &sig, &ts, k, len);
        if cotangents.is_empty() {
            return Ok((d, Vec::new()));
        }
        let g: Vec<f64> = cotangents.concat();
        let gx = self.backward(&tape, &g, &sig, k, len, None);
        Ok((d[..x.len()].to_vec(), gx.chunks(x.len()).map(<[f64]>::to_vec).collect()))
    }
}
