use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sdift_core::gp::{gpr_conditional, rbf_kernel, KernelMatrix, NoiseSource, RbfKernelConfig};

fn sorted_times() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..=12).prop_map(|mut v| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // keep the grid irregular but never coincident
        for i in 1..v.len() {
            if v[i] - v[i - 1] < 0.02 {
                v[i] = v[i - 1] + 0.02;
            }
        }
        v
    })
}

/// Dense LU solve of `(K + jitter I) w = k`, built entry by entry.
fn dense_gpr(target: f64, rest: &[f64], gamma: f64, jitter: f64) -> (Vec<f64>, f64) {
    let n = rest.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        (-gamma * (rest[i] - rest[j]).powi(2)).exp() + if i == j { jitter } else { 0.0 }
    });
    let kv = DVector::from_fn(n, |i, _| (-gamma * (target - rest[i]).powi(2)).exp());
    let w = k.lu().solve(&kv).unwrap();
    let var = 1.0 - kv.dot(&w);
    (w.iter().copied().collect(), var)
}

proptest! {
    #[test]
    fn gpr_matches_dense_solve(times in sorted_times(), pick in 0usize..12, gamma in 1.0f64..30.0) {
        let l = pick % times.len();
        let rest: Vec<f64> = times.iter().enumerate().filter(|&(i, _)| i != l).map(|(_, &t)| t).collect();
        let jitter = 1e-6;
        let got = gpr_conditional(times[l], &rest, gamma, jitter).unwrap();
        let (w, v) = dense_gpr(times[l], &rest, gamma, jitter);
        for (a, b) in got.weights.iter().zip(&w) {
            prop_assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
        prop_assert!((got.variance - v.max(0.0)).abs() <= 1e-8);
    }

    #[test]
    fn gpr_mirrors_under_time_reversal(times in sorted_times(), pick in 0usize..12) {
        let l = pick % times.len();
        let rest: Vec<f64> = times.iter().enumerate().filter(|&(i, _)| i != l).map(|(_, &t)| t).collect();
        let mirrored: Vec<f64> = rest.iter().rev().map(|t| 1.0 - t).collect();
        let a = gpr_conditional(times[l], &rest, 20.0, 1e-6).unwrap();
        let b = gpr_conditional(1.0 - times[l], &mirrored, 20.0, 1e-6).unwrap();
        let scale = a.weights.iter().fold(1.0f64, |m, w| m.max(w.abs()));
        for (x, y) in a.weights.iter().zip(b.weights.iter().rev()) {
            prop_assert!((x - y).abs() <= 1e-8 * scale);
        }
        prop_assert!((a.variance - b.variance).abs() <= 1e-9);
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal(times in sorted_times(), gamma in 0.1f64..200.0) {
        let k = KernelMatrix::new(&times, RbfKernelConfig::new(gamma, 0.0).unwrap()).unwrap();
        for i in 0..times.len() {
            prop_assert_eq!(k.matrix[(i, i)], 1.0);
            for j in 0..times.len() {
                prop_assert_eq!(k.matrix[(i, j)], k.matrix[(j, i)]);
                prop_assert!(k.matrix[(i, j)] > 0.0 && k.matrix[(i, j)] <= 1.0);
            }
        }
    }
}

#[test]
fn far_target_gets_prior_variance() {
    let c = gpr_conditional(10.0, &[0.0, 0.1, 0.2], 50.0, 1e-8).unwrap();
    assert!(c.weights.iter().all(|w| w.abs() < 1e-12));
    assert!((c.variance - 1.0).abs() < 1e-12);
}

#[test]
fn noise_is_reproducible_and_iid_factor_is_identity() {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    let times = [0.0, 0.25, 0.5, 1.0];
    let src = NoiseSource::Gp { gamma: 50.0 };
    let draw = |seed| src.sample(&times, 3, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
    let l = NoiseSource::Iid.factor(&times).unwrap();
    assert_eq!(l, DMatrix::identity(4, 4));
    assert!(rbf_kernel(0.0, 1.0, -1.0).is_err());
}
