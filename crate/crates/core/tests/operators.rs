//! Operator-level properties of the projector and beamformers at full size.

use pat_core::acoustic::{add_noise, apply_bandpass};
use pat_core::beamform::{das_unnormalized, ubp_unnormalized};
use pat_core::{
    adjoint_project, das_reconstruct, forward_project, ubp_reconstruct, ImagingGeometry, PressureImage, Sinogram,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(g: &ImagingGeometry, r: &mut ChaCha8Rng) -> PressureImage {
    let n = g.grid_ny * g.grid_nx;
    PressureImage::from_vec(g.grid_ny, g.grid_nx, (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
}

fn random_record(g: &ImagingGeometry, r: &mut ChaCha8Rng) -> Sinogram {
    let n = g.sample_count * g.sensor_count;
    Sinogram::from_vec(g.sample_count, g.sensor_count, (0..n).map(|_| r.random::<f64>() - 0.5).collect()).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn point(g: &ImagingGeometry, row: usize, col: usize) -> Sinogram {
    let mut p = PressureImage::for_geometry(g);
    p.set(row, col, 1.0);
    forward_project(&p, g).unwrap()
}

fn cheb(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn projector_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = ImagingGeometry::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_image(&g, &mut r), random_image(&g, &mut r));
        let combo = PressureImage::from_vec(
            g.grid_ny,
            g.grid_nx,
            x.values.iter().zip(&y.values).map(|(p, q)| a * p + b * q).collect(),
        ).unwrap();
        let (fx, fy) = (forward_project(&x, &g).unwrap(), forward_project(&y, &g).unwrap());
        let fc = forward_project(&combo, &g).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for ((c, p), q) in fc.values.iter().zip(&fx.values).zip(&fy.values) {
            let e = a * p + b * q;
            num += (c - e).powi(2);
            den += e * e;
        }
        prop_assert!((num / den).sqrt() < 1e-10);
    }

    #[test]
    fn adjoint_identity(seed in any::<u64>()) {
        let g = ImagingGeometry::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let f = random_image(&g, &mut r);
        let b = random_record(&g, &mut r);
        let lhs = dot(&forward_project(&f, &g).unwrap().values, &b.values);
        let rhs = dot(&f.values, &adjoint_project(&b, &g).unwrap().values);
        prop_assert!(rel(lhs, rhs) < 1e-10, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn beamformers_are_linear_before_normalization(seed in any::<u64>()) {
        let g = ImagingGeometry::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_record(&g, &mut r), random_record(&g, &mut r));
        let sum = Sinogram::from_vec(
            g.sample_count,
            g.sensor_count,
            x.values.iter().zip(&y.values).map(|(p, q)| 2.0 * p - q).collect(),
        ).unwrap();
        for op in [das_unnormalized, ubp_unnormalized] {
            let (ix, iy, is) = (op(&x, &g).unwrap(), op(&y, &g).unwrap(), op(&sum, &g).unwrap());
            let scale = is.max_abs();
            for ((s, p), q) in is.values.iter().zip(&ix.values).zip(&iy.values) {
                prop_assert!((s - (2.0 * p - q)).abs() <= 1e-12 * scale);
            }
        }
    }
}

#[test]
fn point_sources_are_localized_at_random_positions() {
    let g = ImagingGeometry::default();
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10 {
        // inside the aperture laterally, anywhere in depth away from the array
        let (row, col) = (r.random_range(8..120), r.random_range(8..120));
        let s = point(&g, row, col);
        let das = das_reconstruct(&s, &g).unwrap();
        let ubp = ubp_reconstruct(&s, &g).unwrap();
        assert!(cheb(das.argmax_abs(), (row, col)) <= 1, "das ({row},{col}) -> {:?}", das.argmax_abs());
        assert!(cheb(ubp.argmax_abs(), (row, col)) <= 1, "ubp ({row},{col}) -> {:?}", ubp.argmax_abs());
    }
}

#[test]
fn arrival_sample_follows_time_of_flight() {
    let g = ImagingGeometry::default();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let (row, col, sensor) = (r.random_range(0..128), r.random_range(0..128), r.random_range(0..128));
        let ch = point(&g, row, col).channel(sensor);
        let support: Vec<usize> = (0..ch.len()).filter(|&t| ch[t] != 0.0).collect();
        let center = (support[0] + support[support.len() - 1]) as f64 / 2.0;
        let [px, pz] = g.pixel_position(row, col);
        let [sx, sz] = g.sensor_position(sensor);
        let tof = (px - sx).hypot(pz - sz) / g.sound_speed * g.sample_rate;
        assert!((center - tof).abs() <= 1.0, "({row},{col}) sensor {sensor}: {center} vs {tof}");
    }
}

#[test]
fn dataset_chain_is_deterministic_and_hits_the_noise_target() {
    let g = ImagingGeometry::default();
    let mut p = PressureImage::for_geometry(&g);
    for (row, col) in [(30, 40), (70, 90), (100, 64)] {
        p.set(row, col, 1.0);
    }
    let clean = apply_bandpass(&forward_project(&p, &g).unwrap(), &g).unwrap();
    let a = add_noise(&clean, 60.0, 5).unwrap();
    let b = add_noise(&clean, 60.0, 5).unwrap();
    assert_eq!(a.values, b.values);
    let noise: f64 = a.values.iter().zip(&clean.values).map(|(x, y)| (x - y).powi(2)).sum();
    let snr = 10.0 * (clean.power() * clean.values.len() as f64 / noise).log10();
    assert!((snr - 60.0).abs() < 0.5, "{snr}");
    let img = das_reconstruct(&a, &g).unwrap();
    assert!(img.is_finite() && (img.max_abs() - 1.0).abs() < 1e-12);
}
