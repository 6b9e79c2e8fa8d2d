use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sdift_core::ftm::{CoreStandardizer, Observation, ObservationSet};
use sdift_core::gp::NoiseSource;
use sdift_core::gpsd::{unconditional_sample, Denoiser, DenoiserArch, EdmDenoiser, NoiseSchedule};
use sdift_core::mpdps::{mpdps_sample, GuidanceConfig, GuidanceMode, GuidanceSet};
use sdift_core::tucker::FnFeatureMap;

fn net(dim: usize, seed: u64) -> EdmDenoiser {
    let arch = DenoiserArch {
        hidden: 16,
        blocks: 2,
        embed_freqs: 4,
        kernel: 3,
    };
    let mut d = EdmDenoiser::new(dim, arch, 1.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let p: Vec<f64> = (0..d.num_params()).map(|_| rng.random_range(-0.3..0.3)).collect();
    d.set_params(&p).unwrap();
    d
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule {
        num_steps: 12,
        ..NoiseSchedule::default()
    }
}

/// Textbook EDM: Karras levels, `x = σ_max z`, Heun with Euler on the last step.
fn reference_edm<D: Denoiser>(d: &D, steps: usize, dim: usize, seed: u64) -> Vec<f64> {
    let (smax, smin, rho) = (80.0f64, 0.002f64, 7.0f64);
    let mut s: Vec<f64> = (0..steps)
        .map(|i| {
            let a = smax.powf(1.0 / rho);
            let b = smin.powf(1.0 / rho);
            (a + i as f64 / (steps - 1) as f64 * (b - a)).powf(rho)
        })
        .collect();
    s.push(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..dim).map(|_| smax * rng.sample::<f64, _>(StandardNormal)).collect();
    let t = [0.0];
    for i in 0..steps {
        let den = d.denoise(&x, s[i], &t).unwrap();
        let slope: Vec<f64> = x.iter().zip(&den).map(|(a, b)| (a - b) / s[i]).collect();
        let euler: Vec<f64> = x.iter().zip(&slope).map(|(a, g)| a + (s[i + 1] - s[i]) * g).collect();
        if s[i + 1] == 0.0 {
            x = euler;
        } else {
            let den2 = d.denoise(&euler, s[i + 1], &t).unwrap();
            for j in 0..dim {
                let g2 = (euler[j] - den2[j]) / s[i + 1];
                x[j] += (s[i + 1] - s[i]) * 0.5 * (slope[j] + g2);
            }
        }
    }
    x
}

#[test]
fn single_frame_reduces_to_standard_edm() {
    for seed in 0..4 {
        let d = net(6, seed);
        let got = unconditional_sample(&d, &schedule(), &[0.0], &[2, 3], &NoiseSource::Gp { gamma: 50.0 }, seed)
            .unwrap()
            .flat();
        let want = reference_edm(&d, 12, 6, seed);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let d = net(4, 7);
    let times = [0.0, 0.3, 0.6, 1.0];
    let draw = |seed| {
        unconditional_sample(&d, &schedule(), &times, &[2, 2], &NoiseSource::Gp { gamma: 50.0 }, seed).unwrap()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}

#[test]
fn unguided_mode_is_bitwise_unconditional() {
    let d = net(4, 2);
    let times = vec![0.0, 0.5, 1.0];
    let lat = FnFeatureMap::constant(vec![vec![1.0, 0.5], vec![0.3, -1.0]]);
    let obs = ObservationSet::new(
        times.clone(),
        vec![vec![Observation::new(vec![0.2, 0.4], 1.0)], vec![], vec![]],
        0.0,
    )
    .unwrap();
    let cfg = GuidanceConfig {
        mode: GuidanceMode::None,
        ..GuidanceConfig::default()
    };
    let noise = NoiseSource::Gp { gamma: 50.0 };
    let set = GuidanceSet::build(&lat, &CoreStandardizer::identity(4), &obs, &times, &cfg).unwrap();
    let guided = mpdps_sample(&d, &schedule(), &noise, &set, &[2, 2], 9).unwrap();
    let plain = unconditional_sample(&d, &schedule(), &times, &[2, 2], &noise, 9).unwrap();
    for (a, b) in guided.flat().iter().zip(plain.flat()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn guidance_pulls_samples_towards_observations() {
    let d = net(4, 5);
    let times = vec![0.0, 0.5, 1.0];
    let lat = FnFeatureMap::new(
        vec![2, 2],
        vec![Box::new(|x: f64| vec![1.0, x]), Box::new(|y: f64| vec![1.0, y])],
    )
    .unwrap();
    let pts = [[0.1, 0.2], [0.9, 0.3], [0.4, 0.8], [0.7, 0.6], [0.2, 0.9]];
    let target = |x: f64, y: f64| 0.5 + x - y;
    let frame: Vec<Observation> = pts.iter().map(|p| Observation::new(p.to_vec(), target(p[0], p[1]))).collect();
    let obs = ObservationSet::new(times.clone(), vec![frame.clone(), vec![], frame], 0.0).unwrap();
    let st = CoreStandardizer::identity(4);
    let err = |mode| {
        let cfg = GuidanceConfig {
            mode,
            zeta: 1e-3,
            obs_noise_std: Some(0.1),
            ..GuidanceConfig::default()
        };
        let set = GuidanceSet::build(&lat, &st, &obs, &times, &cfg).unwrap();
        let s = mpdps_sample(&d, &schedule(), &NoiseSource::Gp { gamma: 50.0 }, &set, &[2, 2], 1).unwrap();
        let mut e = 0.0;
        for m in [0, 2] {
            let w = s.cores[m].data();
            for p in &pts {
                let pred = w[0] + w[1] * p[1] + w[2] * p[0] + w[3] * p[0] * p[1];
                e += (pred - target(p[0], p[1])).powi(2);
            }
        }
        e
    };
    let none = err(GuidanceMode::None);
    assert!(err(GuidanceMode::Dps) < none);
    assert!(err(GuidanceMode::Mpdps) < none);
}
