use proptest::prelude::*;
use sdift_core::data::{
    add_noise, bootstrap_confidence, make_synthetic_dataset, mask_observations, vrmse, DatasetFile, FieldKind,
    MaskConfig, NoiseKind, ObservationSetting, SyntheticFieldSpec,
};

fn spec(kind: FieldKind) -> SyntheticFieldSpec {
    SyntheticFieldSpec {
        kind,
        grid: vec![12, 10],
        frames: 6,
        seed: 4,
        ..SyntheticFieldSpec::default()
    }
}

proptest! {
    #[test]
    fn vrmse_is_affine_invariant(
        truth in prop::collection::vec(-5.0f64..5.0, 3..40),
        noise in prop::collection::vec(-1.0f64..1.0, 40),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -100.0f64..100.0,
    ) {
        prop_assume!(truth.iter().any(|v| (v - truth[0]).abs() > 1e-3));
        let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, e)| t + e).collect();
        let base = vrmse(&pred, &truth).unwrap();
        let map = |v: &Vec<f64>| v.iter().map(|x| a * x + b).collect::<Vec<_>>();
        let moved = vrmse(&map(&pred), &map(&truth)).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn masks_are_deterministic_and_seed_dependent(seed in 0u64..1000, rho in 0.02f64..0.5) {
        let ds = make_synthetic_dataset(&spec(FieldKind::AdvectingMixture), 1).unwrap();
        let r = &ds.records[0];
        let mask = MaskConfig { rho, setting: ObservationSetting::All, resample_per_frame: true };
        let times = ds.timesteps();
        let a = mask_observations(&r.frames, &ds.spec.grid, &times, &mask, seed).unwrap();
        let b = mask_observations(&r.frames, &ds.spec.grid, &times, &mask, seed).unwrap();
        let c = mask_observations(&r.frames, &ds.spec.grid, &times, &mask, seed + 1).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a, &c);
        let n = mask.points_per_frame(120);
        for frame in &a.records {
            prop_assert_eq!(frame.len(), n);
            let mut pts: Vec<Vec<u64>> = frame.iter().map(|o| o.spatial.iter().map(|x| x.to_bits()).collect()).collect();
            pts.sort();
            pts.dedup();
            prop_assert_eq!(pts.len(), n);
        }
    }
}

#[test]
fn alternate_setting_observes_half_the_frames_ending_with_the_last() {
    let mask = MaskConfig {
        setting: ObservationSetting::Alternate,
        ..MaskConfig::default()
    };
    let seen = mask.observed_frames(16);
    assert_eq!(seen.len(), 8);
    assert_eq!(*seen.last().unwrap(), 15);
    // 1-based frames 3, 9 and 15 are the 0-based rows 2, 8 and 14
    for unobserved in [2, 8, 14] {
        assert!(!seen.contains(&unobserved));
    }
    assert_eq!(mask.observed_frames(5), vec![0, 2, 4]);
}

#[test]
fn noise_kinds_are_centered_with_requested_scale() {
    let ds = make_synthetic_dataset(&spec(FieldKind::TravelingPulse), 1).unwrap();
    let r = &ds.records[0];
    let mask = MaskConfig {
        rho: 1.0,
        ..MaskConfig::default()
    };
    let clean = mask_observations(&r.frames, &ds.spec.grid, &ds.timesteps(), &mask, 0).unwrap();
    for kind in [NoiseKind::Gaussian, NoiseKind::Laplacian, NoiseKind::Poisson] {
        let mut diffs = Vec::new();
        for seed in 0..20 {
            let mut noisy = clean.clone();
            add_noise(&mut noisy, kind, 0.3, 2.0, seed).unwrap();
            assert!((noisy.noise_std - 0.6).abs() < 1e-12);
            for (f, g) in noisy.records.iter().zip(&clean.records) {
                diffs.extend(f.iter().zip(g).map(|(a, b)| a.value - b.value));
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02, "{kind:?} mean {mean}");
        assert!((std - 0.6).abs() < 0.02, "{kind:?} std {std}");
    }
}

#[test]
fn bootstrap_confidence_tracks_the_sign() {
    assert_eq!(bootstrap_confidence(&[1.0, 2.0, 0.5], 500, 1), 1.0);
    assert_eq!(bootstrap_confidence(&[-1.0, -2.0], 500, 1), 0.0);
    let mixed = bootstrap_confidence(&[1.0, -1.0, 0.9, -1.1], 2000, 2);
    assert!(mixed > 0.1 && mixed < 0.9);
}

#[test]
fn dataset_file_round_trips() {
    let ds = make_synthetic_dataset(&spec(FieldKind::SeparableLowrank), 3).unwrap();
    let mask = MaskConfig::default();
    let obs: Vec<_> = ds
        .records
        .iter()
        .enumerate()
        .map(|(b, r)| Some(mask_observations(&r.frames, &ds.spec.grid, &ds.timesteps(), &mask, b as u64).unwrap()))
        .collect();
    let file = DatasetFile::new(ds, obs, "cfg").unwrap();
    let mut buf = Vec::new();
    file.write(&mut buf).unwrap();
    let back = DatasetFile::read(buf.as_slice()).unwrap();
    assert_eq!(back, file);
    buf[0] = b'X';
    assert!(DatasetFile::read(buf.as_slice()).is_err());
}

#[test]
fn records_are_independent_of_corpus_size() {
    let s = spec(FieldKind::TravelingPulse);
    let small = make_synthetic_dataset(&s, 2).unwrap();
    let large = make_synthetic_dataset(&s, 5).unwrap();
    assert_eq!(small.records[1].frames, large.records[1].frames);
}
