//! Minimal dense-network building blocks with hand-written backward passes.
//!
//! Parameters of a network live in one flat `Vec<f64>`; layers hold offsets into it.
//! Activations are row-major `rows x features` buffers.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Hands out contiguous ranges of a flat parameter vector.
#[derive(Default)]
pub(crate) struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

/// `y = x W + b` with `W` stored `inp x out` row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, inp: usize, out: usize) -> Self {
        let w = layout.alloc(inp * out);
        let b = layout.alloc(out);
        Self { inp, out, w, b }
    }

    pub fn init_uniform<R: Rng>(&self, params: &mut [f64], rng: &mut R, w_bound: f64, b_bound: f64) {
        for v in &mut params[self.w..self.w + self.inp * self.out] {
            *v = if w_bound > 0.0 { rng.random_range(-w_bound..w_bound) } else { 0.0 };
        }
        for v in &mut params[self.b..self.b + self.out] {
            *v = if b_bound > 0.0 { rng.random_range(-b_bound..b_bound) } else { 0.0 };
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.inp);
        let mut y = Vec::with_capacity(rows * self.out);
        let bias = &params[self.b..self.b + self.out];
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        gemm(
            rows,
            self.inp,
            self.out,
            x,
            (self.inp as isize, 1),
            &params[self.w..],
            (self.out as isize, 1),
            &mut y,
            1.0,
        );
        y
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &[f64],
        grads: Option<&mut [f64]>,
        x: &[f64],
        gy: &[f64],
        rows: usize,
    ) -> Vec<f64> {
        if let Some(g) = grads {
            // dW += xᵀ gy
            gemm(
                self.inp,
                rows,
                self.out,
                x,
                (1, self.inp as isize),
                gy,
                (self.out as isize, 1),
                &mut g[self.w..self.w + self.inp * self.out],
                1.0,
            );
            let gb = &mut g[self.b..self.b + self.out];
            for r in 0..rows {
                for (acc, v) in gb.iter_mut().zip(&gy[r * self.out..(r + 1) * self.out]) {
                    *acc += v;
                }
            }
        }
        let mut gx = vec![0.0; rows * self.inp];
        // gx = gy Wᵀ
        gemm(
            rows,
            self.out,
            self.inp,
            gy,
            (self.out as isize, 1),
            &params[self.w..],
            (1, self.out as isize),
            &mut gx,
            0.0,
        );
        gx
    }
}

/// Temporal convolution over the row axis of one sequence (`len x ch`), zero padded,
/// odd kernel width, output width equals input width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Conv1d {
    pub ch: usize,
    pub kernel: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv1d {
    pub fn new(layout: &mut ParamLayout, ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "conv kernel width must be odd");
        let w = layout.alloc(kernel * ch * ch);
        let b = layout.alloc(ch);
        Self { ch, kernel, w, b }
    }

    fn tap(&self, j: usize) -> usize {
        self.w + j * self.ch * self.ch
    }

    pub fn init_uniform<R: Rng>(&self, params: &mut [f64], rng: &mut R, bound: f64) {
        for v in &mut params[self.w..self.w + self.kernel * self.ch * self.ch] {
            *v = rng.random_range(-bound..bound);
        }
        for v in &mut params[self.b..self.b + self.ch] {
            *v = 0.0;
        }
    }

    /// `x` holds `batch` sequences of `len` rows each.
    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let ch = self.ch;
        let half = self.kernel / 2;
        let mut y = Vec::with_capacity(batch * len * ch);
        let bias = &params[self.b..self.b + ch];
        for _ in 0..batch * len {
            y.extend_from_slice(bias);
        }
        for s in 0..batch {
            let xs = &x[s * len * ch..(s + 1) * len * ch];
            let ys = &mut y[s * len * ch..(s + 1) * len * ch];
            for j in 0..self.kernel {
                // output row m reads input row m + j - half
                let (lo, hi) = shifted_range(len, j, half);
                if lo >= hi {
                    continue;
                }
                let src_lo = lo + j - half;
                gemm(
                    hi - lo,
                    ch,
                    ch,
                    &xs[src_lo * ch..],
                    (ch as isize, 1),
                    &params[self.tap(j)..],
                    (ch as isize, 1),
                    &mut ys[lo * ch..hi * ch],
                    1.0,
                );
            }
        }
        y
    }

    pub fn backward(
        &self,
        params: &[f64],
        mut grads: Option<&mut [f64]>,
        x: &[f64],
        gy: &[f64],
        batch: usize,
        len: usize,
    ) -> Vec<f64> {
        let ch = self.ch;
        let half = self.kernel / 2;
        let mut gx = vec![0.0; batch * len * ch];
        for s in 0..batch {
            let xs = &x[s * len * ch..(s + 1) * len * ch];
            let gys = &gy[s * len * ch..(s + 1) * len * ch];
            let gxs = &mut gx[s * len * ch..(s + 1) * len * ch];
            for j in 0..self.kernel {
                let (lo, hi) = shifted_range(len, j, half);
                if lo >= hi {
                    continue;
                }
                let src_lo = lo + j - half;
                if let Some(g) = grads.as_deref_mut() {
                    let tap = self.tap(j);
                    gemm(
                        ch,
                        hi - lo,
                        ch,
                        &xs[src_lo * ch..],
                        (1, ch as isize),
                        &gys[lo * ch..],
                        (ch as isize, 1),
                        &mut g[tap..tap + ch * ch],
                        1.0,
                    );
                }
                gemm(
                    hi - lo,
                    ch,
                    ch,
                    &gys[lo * ch..],
                    (ch as isize, 1),
                    &params[self.tap(j)..],
                    (1, ch as isize),
                    &mut gxs[src_lo * ch..(src_lo + hi - lo) * ch],
                    1.0,
                );
            }
            if let Some(g) = grads.as_deref_mut() {
                let gb = &mut g[self.b..self.b + ch];
                for r in 0..len {
                    for (acc, v) in gb.iter_mut().zip(&gys[r * ch..(r + 1) * ch]) {
                        *acc += v;
                    }
                }
            }
        }
        gx
    }
}

/// Output rows `[lo, hi)` whose input row `m + j - half` lies inside the sequence.
fn shifted_range(len: usize, j: usize, half: usize) -> (usize, usize) {
    let lo = half.saturating_sub(j);
    let hi = (len + half).saturating_sub(j).min(len);
    (lo, hi.max(lo))
}

/// `c = beta * c + a b` with explicit strides; `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    let a_need = (m as isize - 1) * rsa + (k as isize - 1) * csa + 1;
    let b_need = (k as isize - 1) * rsb + (n as isize - 1) * csb + 1;
    assert!(k == 0 || (a.len() as isize >= a_need && b.len() as isize >= b_need));
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
}

/// `dL/dx` for `y = silu(x)`.
pub(crate) fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = 1.0 / (1.0 + (-v).exp());
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}
