//! Multilinear algebra for Tucker and functional Tucker evaluation.
//!
//! Vectorization convention: the mode-1 index varies slowest. A core of ranks
//! `(R1, R2, R3)` stores entry `(r1, r2, r3)` at `(r1 * R2 + r2) * R3 + r3`, and
//! [`kron_feature`] emits the Kronecker product in the same order, so a decoded
//! entry is the plain dot product `vec(W) . (u1 ⊗ u2 ⊗ u3)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Dense K-mode core tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreTensor {
    ranks: Vec<usize>,
    data: Vec<f64>,
}

impl CoreTensor {
    pub fn new(ranks: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(!ranks.is_empty(), "core tensor needs at least one mode");
        ensure!(ranks.iter().all(|&r| r >= 1), "ranks must be >= 1, got {ranks:?}");
        let len: usize = ranks.iter().product();
        ensure!(
            data.len() == len,
            "core data has {} entries, ranks {:?} need {}",
            data.len(),
            ranks,
            len
        );
        ensure!(data.iter().all(|v| v.is_finite()), "core entries must be finite");
        Ok(Self { ranks, data })
    }

    pub fn zeros(ranks: &[usize]) -> Self {
        let len = ranks.iter().product();
        Self {
            ranks: ranks.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn order(&self) -> usize {
        self.ranks.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn squared_distance(&self, other: &CoreTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Spatial coordinates (normalized to `[0, 1]` per mode) plus a timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateTuple {
    pub spatial: Vec<f64>,
    pub time: f64,
}

impl CoordinateTuple {
    pub fn new(spatial: Vec<f64>, time: f64) -> Self {
        Self { spatial, time }
    }
}

/// `u1 ⊗ ... ⊗ uK` in mode-1-outermost order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Anything that maps a scalar coordinate on mode `k` to an `R_k`-dimensional feature.
///
/// The trained latent functions implement this, and so do closure-backed maps used
/// as fixtures and as exact bases for synthetic data.
pub trait FeatureMap {
    fn ranks(&self) -> Vec<usize>;

    fn mode_features(&self, mode: usize, x: f64) -> Vec<f64>;

    fn order(&self) -> usize {
        self.ranks().len()
    }
}

type ModeFn = Box<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// Feature map built from plain closures, one per mode.
pub struct FnFeatureMap {
    ranks: Vec<usize>,
    funcs: Vec<ModeFn>,
}

impl FnFeatureMap {
    pub fn new(ranks: Vec<usize>, funcs: Vec<ModeFn>) -> Result<Self> {
        ensure!(
            ranks.len() == funcs.len() && !ranks.is_empty(),
            "need one function per mode ({} ranks, {} functions)",
            ranks.len(),
            funcs.len()
        );
        Ok(Self { ranks, funcs })
    }

    /// Constant features per mode, regardless of the coordinate.
    pub fn constant(features: Vec<Vec<f64>>) -> Self {
        let ranks = features.iter().map(Vec::len).collect();
        let funcs = features
            .into_iter()
            .map(|f| Box::new(move |_x: f64| f.clone()) as ModeFn)
            .collect();
        Self { ranks, funcs }
    }
}

impl FeatureMap for FnFeatureMap {
    fn ranks(&self) -> Vec<usize> {
        self.ranks.clone()
    }

    fn mode_features(&self, mode: usize, x: f64) -> Vec<f64> {
        (self.funcs[mode])(x)
    }
}

/// Kronecker product of per-mode vectors, mode 1 outermost.
pub fn kron(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for u in factors {
        let mut next = Vec::with_capacity(out.len() * u.len());
        for &a in &out {
            next.extend(u.iter().map(|&b| a * b));
        }
        out = next;
    }
    out
}

pub fn kron_feature<F: FeatureMap + ?Sized>(
    latents: &F,
    coord: &CoordinateTuple,
) -> Result<FeatureVector> {
    let ranks = latents.ranks();
    ensure!(
        coord.spatial.len() == ranks.len(),
        "coordinate has {} spatial entries, latents have {} modes",
        coord.spatial.len(),
        ranks.len()
    );
    let feats = coord
        .spatial
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = latents.mode_features(k, x);
            if f.len() != ranks[k] {
                return Err(Error::contract(format!(
                    "mode {k} produced {} features, rank is {}",
                    f.len(),
                    ranks[k]
                )));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureVector(kron(&feats)))
}

pub fn decode_entry<F: FeatureMap + ?Sized>(
    core: &CoreTensor,
    latents: &F,
    coord: &CoordinateTuple,
) -> Result<f64> {
    ensure!(
        core.ranks() == latents.ranks().as_slice(),
        "core ranks {:?} do not match latent ranks {:?}",
        core.ranks(),
        latents.ranks()
    );
    let phi = kron_feature(latents, coord)?;
    Ok(dot(core.data(), phi.as_slice()))
}

/// Explicit nested sum `Σ_{r1..rK} w_{r1..rK} Π_k u^k_{rk}`.
///
/// Walks multi-indices with an odometer and never forms a Kronecker product, so it
/// stays an independent check on [`decode_entry`].
pub fn naive_tucker_eval(core: &CoreTensor, features: &[Vec<f64>]) -> Result<f64> {
    let ranks = core.ranks();
    ensure!(
        features.len() == ranks.len(),
        "got {} feature vectors for a {}-mode core",
        features.len(),
        ranks.len()
    );
    for (k, (f, &r)) in features.iter().zip(ranks).enumerate() {
        ensure!(f.len() == r, "feature {k} has length {}, rank is {r}", f.len());
    }

    let mut idx = vec![0usize; ranks.len()];
    let mut total = 0.0;
    loop {
        let mut offset = 0;
        let mut prod = 1.0;
        for k in 0..ranks.len() {
            offset = offset * ranks[k] + idx[k];
            prod *= features[k][idx[k]];
        }
        total += core.data()[offset] * prod;

        // odometer, last mode fastest
        let mut k = ranks.len();
        loop {
            if k == 0 {
                return Ok(total);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < ranks[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Rows are `kron_feature` of each coordinate.
pub fn design_matrix<F: FeatureMap + ?Sized>(
    latents: &F,
    coords: &[CoordinateTuple],
) -> Result<DMatrix<f64>> {
    ensure!(!coords.is_empty(), "design matrix needs at least one coordinate");
    let p: usize = latents.ranks().iter().product();
    let mut a = DMatrix::zeros(coords.len(), p);
    for (n, c) in coords.iter().enumerate() {
        let phi = kron_feature(latents, c)?;
        for (j, v) in phi.0.into_iter().enumerate() {
            a[(n, j)] = v;
        }
    }
    Ok(a)
}

/// Partial contraction: for mode `k`, `g_r = Σ_{idx: idx_k = r} w[idx] Π_{j≠k} u^j_{idx_j}`.
///
/// This is `∂(vec(W)·(u1 ⊗ … ⊗ uK)) / ∂u^k`.
pub fn mode_contractions(ranks: &[usize], core: &[f64], features: &[&[f64]]) -> Vec<Vec<f64>> {
    let order = ranks.len();
    let mut grads: Vec<Vec<f64>> = ranks.iter().map(|&r| vec![0.0; r]).collect();
    if order == 1 {
        grads[0].copy_from_slice(core);
        return grads;
    }
    if order == 2 {
        let (r1, r2) = (ranks[0], ranks[1]);
        let (u1, u2) = (features[0], features[1]);
        for a in 0..r1 {
            let row = &core[a * r2..(a + 1) * r2];
            grads[0][a] = dot(row, u2);
            for b in 0..r2 {
                grads[1][b] += row[b] * u1[a];
            }
        }
        return grads;
    }
    let mut idx = vec![0usize; order];
    for &w in core {
        if w != 0.0 {
            for k in 0..order {
                let mut prod = w;
                for j in 0..order {
                    if j != k {
                        prod *= features[j][idx[j]];
                    }
                }
                grads[k][idx[k]] += prod;
            }
        }
        for k in (0..order).rev() {
            idx[k] += 1;
            if idx[k] < ranks[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    grads
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kron_two_modes() {
        let lat = FnFeatureMap::constant(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let c = CoordinateTuple::new(vec![0.3, 0.7], 0.0);
        // nested loop: out[a*2+b] = u1[a]*u2[b]
        let u1 = [1.0, 2.0];
        let u2 = [3.0, 4.0];
        let mut expected = Vec::new();
        for a in u1 {
            for b in u2 {
                expected.push(a * b);
            }
        }
        assert_eq!(expected, vec![3.0, 4.0, 6.0, 8.0]);
        assert_eq!(kron_feature(&lat, &c).unwrap().0, expected);
    }

    #[test]
    fn kron_rank_one_identity_and_zero() {
        let lat = FnFeatureMap::constant(vec![vec![1.0], vec![1.0]]);
        let c = CoordinateTuple::new(vec![0.1, 0.9], 0.0);
        assert_eq!(kron_feature(&lat, &c).unwrap().0, vec![1.0]);

        let lat = FnFeatureMap::constant(vec![vec![0.0; 2], vec![0.0; 3], vec![0.0; 2]]);
        let c = CoordinateTuple::new(vec![0.1, 0.2, 0.3], 0.0);
        assert_eq!(kron_feature(&lat, &c).unwrap().0, vec![0.0; 12]);
    }

    #[test]
    fn kron_dimension_mismatch() {
        let lat = FnFeatureMap::constant(vec![vec![1.0], vec![1.0]]);
        let c = CoordinateTuple::new(vec![0.1], 0.0);
        assert!(matches!(kron_feature(&lat, &c), Err(Error::Contract(_))));
    }

    #[test]
    fn decode_single_spike() {
        let (a, b, c, d) = (0.7, -1.3, 2.1, 0.4);
        let lat = FnFeatureMap::constant(vec![vec![a, b], vec![c, d]]);
        let core = CoreTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let coord = CoordinateTuple::new(vec![0.5, 0.5], 0.0);
        assert_eq!(decode_entry(&core, &lat, &coord).unwrap(), a * c);

        let zero = CoreTensor::zeros(&[2, 2]);
        assert_eq!(decode_entry(&zero, &lat, &coord).unwrap(), 0.0);
    }

    #[test]
    fn decode_rank_mismatch() {
        let lat = FnFeatureMap::constant(vec![vec![1.0, 1.0], vec![1.0]]);
        let core = CoreTensor::zeros(&[2, 2]);
        let coord = CoordinateTuple::new(vec![0.5, 0.5], 0.0);
        assert!(decode_entry(&core, &lat, &coord).is_err());
    }

    #[test]
    fn naive_hand_sums() {
        let core = CoreTensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        assert_eq!(naive_tucker_eval(&core, &[vec![1.0, 1.0]]).unwrap(), 5.0);

        let mut diag = CoreTensor::zeros(&[3, 3]);
        for i in 0..3 {
            diag.data_mut()[i * 3 + i] = 1.0;
        }
        let onehot = vec![0.0, 1.0, 0.0];
        assert_eq!(
            naive_tucker_eval(&diag, &[onehot.clone(), onehot]).unwrap(),
            1.0
        );
        assert!(naive_tucker_eval(&diag, &[vec![1.0; 3]]).is_err());
        assert!(naive_tucker_eval(&diag, &[vec![1.0; 3], vec![1.0; 2]]).is_err());
    }

    #[test]
    fn decode_matches_naive_rank_2_3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let core = CoreTensor::new(vec![2, 3], data).unwrap();
        let f1: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lat = FnFeatureMap::constant(vec![f1.clone(), f2.clone()]);
        let coord = CoordinateTuple::new(vec![0.0, 0.0], 0.0);
        let fast = decode_entry(&core, &lat, &coord).unwrap();
        let slow = naive_tucker_eval(&core, &[f1, f2]).unwrap();
        assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1e-300));
    }

    #[test]
    fn design_matrix_rows() {
        let lat = FnFeatureMap::new(
            vec![2, 2],
            vec![
                Box::new(|x: f64| vec![1.0, x]),
                Box::new(|x: f64| vec![x.sin(), x.cos()]),
            ],
        )
        .unwrap();
        let c = CoordinateTuple::new(vec![0.25, 0.5], 0.0);
        let a = design_matrix(&lat, &[c.clone()]).unwrap();
        assert_eq!(a.nrows(), 1);
        let phi = kron_feature(&lat, &c).unwrap();
        assert_eq!(a.row(0).iter().copied().collect::<Vec<_>>(), phi.0);

        let a = design_matrix(&lat, &[c.clone(), c]).unwrap();
        assert_eq!(a.row(0), a.row(1));
        assert!(design_matrix(&lat, &[]).is_err());
    }

    #[test]
    fn mode_contractions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for ranks in [vec![3], vec![2, 3], vec![2, 3, 2]] {
            let p: usize = ranks.iter().product();
            let core: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let feats: Vec<Vec<f64>> = ranks
                .iter()
                .map(|&r| (0..r).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
            let grads = mode_contractions(&ranks, &core, &refs);
            let f = |fs: &[Vec<f64>]| dot(&core, &kron(fs));
            for k in 0..ranks.len() {
                for r in 0..ranks[k] {
                    let h = 1e-6;
                    let mut up = feats.clone();
                    up[k][r] += h;
                    let mut dn = feats.clone();
                    dn[k][r] -= h;
                    let fd = (f(&up) - f(&dn)) / (2.0 * h);
                    assert!((fd - grads[k][r]).abs() < 1e-8, "{ranks:?} {k} {r}");
                }
            }
        }
    }
}
