//! Trainable per-mode coordinate functions `f^k: R -> R^{R_k}`.
//!
//! Each mode is a sine-activated MLP. Inputs are normalized coordinates in `[0, 1]`,
//! remapped to `[-1, 1]` before the first layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Linear, ParamLayout};
use crate::tucker::FeatureMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentArch {
    pub hidden_layers: usize,
    pub width: usize,
    /// Frequency multiplier of the first sine layer.
    pub first_omega: f64,
}

impl Default for LatentArch {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 128,
            first_omega: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineMlp {
    layers: Vec<Linear>,
    first_omega: f64,
    pub(crate) params: Vec<f64>,
}

/// Forward activations kept for the backward pass.
pub(crate) struct SineTape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl SineMlp {
    pub fn new<R: Rng>(arch: &LatentArch, out_dim: usize, rng: &mut R) -> Self {
        assert!(arch.hidden_layers >= 1 && arch.width >= 1 && out_dim >= 1);
        let mut layout = ParamLayout::default();
        let mut layers = Vec::new();
        let mut inp = 1;
        for _ in 0..arch.hidden_layers {
            layers.push(Linear::new(&mut layout, inp, arch.width));
            inp = arch.width;
        }
        layers.push(Linear::new(&mut layout, inp, out_dim));
        let mut params = vec![0.0; layout.len()];
        let n = layers.len();
        for (i, l) in layers.iter().enumerate() {
            let fan = l.inp as f64;
            let (wb, bb) = if i == 0 {
                (1.0 / fan, 1.0 / fan.sqrt())
            } else if i + 1 < n {
                ((6.0 / fan).sqrt(), 1.0 / fan.sqrt())
            } else {
                ((3.0 / fan).sqrt(), 0.0)
            };
            l.init_uniform(&mut params, rng, wb, bb);
        }
        Self {
            layers,
            first_omega: arch.first_omega,
            params,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn scale(&self, i: usize) -> f64 {
        if i == 0 {
            self.first_omega
        } else {
            1.0
        }
    }

    /// Evaluates the MLP at each coordinate in `xs`; returns `xs.len() x out_dim`.
    pub fn eval_batch(&self, xs: &[f64]) -> Vec<f64> {
        self.forward(xs).0
    }

    pub(crate) fn forward(&self, xs: &[f64]) -> (Vec<f64>, SineTape) {
        let rows = xs.len();
        let mut a: Vec<f64> = xs.iter().map(|&x| 2.0 * x - 1.0).collect();
        let mut tape = SineTape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(&self.params, &a, rows);
            tape.inputs.push(a);
            if i == last {
                tape.pre.push(Vec::new());
                return (z, tape);
            }
            let w = self.scale(i);
            a = z.iter().map(|v| (w * v).sin()).collect();
            tape.pre.push(z);
        }
        unreachable!()
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂output` for each row of the forward batch.
    pub(crate) fn backward(&self, tape: &SineTape, g_out: &[f64], grads: &mut [f64]) {
        let rows = tape.inputs[0].len();
        let mut g = g_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i + 1 < self.layers.len() {
                let w = self.scale(i);
                for (gv, z) in g.iter_mut().zip(&tape.pre[i]) {
                    *gv *= w * (w * z).cos();
                }
            }
            g = l.backward(&self.params, Some(grads), &tape.inputs[i], &g, rows);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFunctionSet {
    pub arch: LatentArch,
    ranks: Vec<usize>,
    functions: Vec<SineMlp>,
}

impl LatentFunctionSet {
    pub fn new(ranks: &[usize], arch: LatentArch, seed: u64) -> Result<Self> {
        ensure!(!ranks.is_empty(), "latent function set needs at least one mode");
        ensure!(ranks.iter().all(|&r| r >= 1), "ranks must be >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let functions = ranks.iter().map(|&r| SineMlp::new(&arch, r, &mut rng)).collect();
        Ok(Self {
            arch,
            ranks: ranks.to_vec(),
            functions,
        })
    }

    pub fn functions(&self) -> &[SineMlp] {
        &self.functions
    }

    pub fn num_params(&self) -> usize {
        self.functions.iter().map(SineMlp::num_params).sum()
    }

    /// All parameters, mode after mode.
    pub fn flat_params(&self) -> Vec<f64> {
        self.functions.iter().flat_map(|f| f.params.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        ensure!(
            flat.len() == self.num_params(),
            "expected {} parameters, got {}",
            self.num_params(),
            flat.len()
        );
        let mut off = 0;
        for f in &mut self.functions {
            let n = f.params.len();
            f.params.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

impl FeatureMap for LatentFunctionSet {
    fn ranks(&self) -> Vec<usize> {
        self.ranks.clone()
    }

    fn mode_features(&self, mode: usize, x: f64) -> Vec<f64> {
        self.functions[mode].eval_batch(&[x])
    }
}
