use proptest::prelude::*;
use sdift_core::tucker::{
    decode_entry, design_matrix, kron, naive_tucker_eval, CoordinateTuple, CoreTensor, FnFeatureMap,
};

fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<Vec<f64>>)> {
    prop::collection::vec(1usize..=4, 2..=3).prop_flat_map(|ranks| {
        let p: usize = ranks.iter().product();
        let feats: Vec<_> = ranks
            .iter()
            .map(|&r| prop::collection::vec(-2.0f64..2.0, r))
            .collect();
        (Just(ranks), prop::collection::vec(-2.0f64..2.0, p), feats)
    })
}

fn coord(order: usize) -> CoordinateTuple {
    CoordinateTuple::new(vec![0.5; order], 0.0)
}

proptest! {
    #[test]
    fn decode_matches_nested_sum((ranks, core, feats) in instance()) {
        let w = CoreTensor::new(ranks.clone(), core).unwrap();
        let lat = FnFeatureMap::constant(feats.clone());
        let fast = decode_entry(&w, &lat, &coord(ranks.len())).unwrap();
        let slow = naive_tucker_eval(&w, &feats).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0));
    }

    #[test]
    fn decode_is_linear_in_the_core(
        (ranks, a, feats) in instance(),
        s in -3.0f64..3.0,
        t in -3.0f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().rev().map(|v| v * 0.7 - 0.1).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + t * y).collect();
        let lat = FnFeatureMap::constant(feats);
        let c = coord(ranks.len());
        let f = |d: Vec<f64>| decode_entry(&CoreTensor::new(ranks.clone(), d).unwrap(), &lat, &c).unwrap();
        let lhs = f(mix);
        let rhs = s * f(a) + t * f(b);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn decode_is_linear_in_each_mode((ranks, core, feats) in instance(), k in 0usize..3, s in -3.0f64..3.0) {
        let k = k % ranks.len();
        let w = CoreTensor::new(ranks.clone(), core).unwrap();
        let mut scaled = feats.clone();
        scaled[k].iter_mut().for_each(|v| *v *= s);
        let c = coord(ranks.len());
        let base = decode_entry(&w, &FnFeatureMap::constant(feats), &c).unwrap();
        let got = decode_entry(&w, &FnFeatureMap::constant(scaled), &c).unwrap();
        prop_assert!((got - s * base).abs() <= 1e-10 * got.abs().max(1.0));
    }
}

#[test]
fn kron_puts_the_first_mode_outermost() {
    // unit vectors pick out one core entry, at the row-major offset of (i, j, k)
    let ranks = [2usize, 3, 4];
    for i in 0..2 {
        for j in 0..3 {
            for k in 0..4 {
                let e = |r: usize, at: usize| (0..r).map(|x| if x == at { 1.0 } else { 0.0 }).collect::<Vec<_>>();
                let v = kron(&[e(ranks[0], i), e(ranks[1], j), e(ranks[2], k)]);
                let hot: Vec<usize> = (0..v.len()).filter(|&n| v[n] == 1.0).collect();
                assert_eq!(hot, vec![(i * 3 + j) * 4 + k]);
            }
        }
    }
}

#[test]
fn design_rows_decode_each_coordinate() {
    let lat = FnFeatureMap::new(
        vec![2, 3],
        vec![
            Box::new(|x: f64| vec![x.cos(), x.sin()]),
            Box::new(|y: f64| vec![1.0, y, y * y]),
        ],
    )
    .unwrap();
    let w = CoreTensor::new(vec![2, 3], vec![0.4, -1.0, 0.3, 2.0, 0.5, -0.7]).unwrap();
    let coords: Vec<CoordinateTuple> = (0..7)
        .map(|n| CoordinateTuple::new(vec![n as f64 * 0.13, 1.0 - n as f64 * 0.11], 0.0))
        .collect();
    let a = design_matrix(&lat, &coords).unwrap();
    for (n, c) in coords.iter().enumerate() {
        let row: f64 = (0..6).map(|j| a[(n, j)] * w.data()[j]).sum();
        assert!((row - decode_entry(&w, &lat, c).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let w = CoreTensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
    let lat = FnFeatureMap::constant(vec![vec![1.0, 2.0], vec![1.0, 2.0, 3.0]]);
    assert!(decode_entry(&w, &lat, &coord(2)).is_err());
    assert!(naive_tucker_eval(&w, &[vec![1.0, 2.0]]).is_err());
    assert!(CoreTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
}
