use mflq_core::kernel::{compensated_increment, empirical_mean};
use mflq_core::{build_grid, generate_noise, JumpMeasure, TimeHorizon};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn grid(steps: usize) -> mflq_core::TimeGrid {
    build_grid(&TimeHorizon::new(0.0, 1.0).unwrap(), steps).unwrap()
}

#[test]
fn poisson_rate_matches_intensity() {
    // ν = 2 on a step of 0.01.
    let g = grid(100);
    let n = 100_000;
    let noise = generate_noise(&g, n, &JumpMeasure::with_weights(vec![2.0]).unwrap(), 9).unwrap();
    let mean = noise.counts(0).iter().map(|&c| c as f64).sum::<f64>() / n as f64;
    assert!((mean - 0.02).abs() <= 4.0 * (0.02f64 / n as f64).sqrt(), "{mean}");
}

#[test]
fn increment_moments() {
    let g = grid(50);
    let h = g.step();
    let n = 20_000;
    let jumps = JumpMeasure::with_weights(vec![1.0, 4.0]).unwrap();
    let noise = generate_noise(&g, n, &jumps, 3).unwrap();
    for i in [0, 17, 49] {
        let dw = noise.dw(i);
        let var = dw.iter().map(|x| x * x).sum::<f64>() / n as f64;
        // Var of x² for a centered normal is 2h².
        let se = (2.0 * h * h / n as f64).sqrt();
        assert!((var - h).abs() <= 5.0 * se, "node {i}: {var}");
        for (k, nu) in [1.0, 4.0].iter().enumerate() {
            let rate = (0..n).map(|p| noise.counts(i)[p * 2 + k] as f64).sum::<f64>() / n as f64;
            let se = (nu * h / n as f64).sqrt();
            assert!((rate - nu * h).abs() <= 5.0 * se, "node {i} mark {k}: {rate}");
        }
    }
}

#[test]
fn full_path_sums_are_centered() {
    let g = grid(25);
    let n = 100_000;
    let jumps = JumpMeasure::with_weights(vec![0.5, 2.0]).unwrap();
    let noise = generate_noise(&g, n, &jumps, 21).unwrap();
    let z = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
        m.abs() / (v / n as f64).sqrt()
    };
    let w: Vec<f64> = (0..n).map(|p| (0..25).map(|i| noise.dw(i)[p]).sum()).collect();
    assert!(z(w) <= 4.0);
    for k in 0..2 {
        let s: Vec<f64> = (0..n)
            .map(|p| (0..25).map(|i| noise.compensated(i, p, k)).sum())
            .collect();
        assert!(z(s) <= 4.0);
    }
}

#[test]
fn paths_accumulate_increments() {
    let g = grid(10);
    let jumps = JumpMeasure::with_weights(vec![1.5]).unwrap();
    let noise = generate_noise(&g, 50, &jumps, 0).unwrap();
    for p in 0..50 {
        let w: f64 = (0..10).map(|i| noise.dw(i)[p]).sum();
        let nt: f64 = (0..10).map(|i| noise.compensated(i, p, 0)).sum();
        assert!((noise.brownian(10)[p] - w).abs() < 1e-12);
        assert!((noise.compensated_path(10)[p] - nt).abs() < 1e-12);
    }
}

#[test]
fn empirical_mean_of_normals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
    let m = empirical_mean(&xs, 1).unwrap()[0];
    assert!(m.abs() <= 4.0 / 100.0);
}

#[test]
fn scheduling_does_not_change_draws() {
    let g = grid(30);
    let jumps = JumpMeasure::with_weights(vec![1.0, 2.0]).unwrap();
    let draw = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_noise(&g, 777, &jumps, 5).unwrap())
    };
    let (a, b) = (draw(1), draw(3));
    for i in 0..30 {
        assert_eq!(a.dw(i), b.dw(i));
        assert_eq!(a.counts(i), b.counts(i));
    }
}

proptest! {
    #[test]
    fn compensation_is_count_minus_intensity(count in 0u32..20, nu in 0.01..10.0f64, h in 0.001..0.5f64) {
        let jumps = JumpMeasure::with_weights(vec![nu]).unwrap();
        let v = compensated_increment(&[count], &jumps, h).unwrap();
        prop_assert!((v[0] - (count as f64 - nu * h)).abs() < 1e-12);
    }

    #[test]
    fn mean_of_constant_rows_is_exact(v in -1e6..1e6f64, n in 1usize..200) {
        let xs = vec![v; n];
        prop_assert_eq!(empirical_mean(&xs, 1).unwrap()[0], v);
    }
}
