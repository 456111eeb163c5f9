mod common;

use common::{deterministic, fixture, grid, rk4, scalar};
use mflq_core::bsde::{
    realize_terminal, solve_adjoint, solve_hamilton_picard, solve_hamilton_picard_from, solve_phi, solve_state_bsde,
    solve_state_bsde_with, StateProcesses,
};
use mflq_core::{
    brute_force_lq_oracle, generate_noise, solve_decoupled, solve_riccati, AdjointConvention, BsdeOptions,
    ControlProcess, DecoupledOptions, PathEnsemble, PicardOptions, ProblemSpec,
};

fn zero_everywhere(x: &PathEnsemble) -> bool {
    (0..x.nodes()).all(|i| x.values(i).iter().all(|v| *v == 0.0))
}

fn state(spec: &ProblemSpec, steps: usize, particles: usize, u: Option<ControlProcess>) -> StateProcesses {
    let g = grid(spec, steps);
    let noise = generate_noise(&g, particles, &spec.jumps, 1).unwrap();
    let u = u.unwrap_or_else(|| ControlProcess::zero(&g, spec.m));
    solve_state_bsde(spec, &u, &noise).unwrap()
}

#[test]
fn zero_data_gives_zero_solution() {
    let spec = fixture("zero_terminal");
    let x = state(&spec, 20, 50, None);
    assert!(zero_everywhere(&x.y) && zero_everywhere(&x.z));
    assert!(x.r.iter().all(zero_everywhere));
}

#[test]
fn constant_terminal_without_coefficients() {
    let spec = scalar("{}", &[1.0], &deterministic(2.5));
    let x = state(&spec, 10, 20, None);
    for i in 0..=10 {
        assert!(x.y.values(i).iter().all(|v| *v == 2.5));
    }
    assert!(zero_everywhere(&x.z) && x.r.iter().all(zero_everywhere));
}

/// `dY = a Y ds`, `Y(1) = c` has `Y(0) = c e^{-a}`.
#[test]
fn exponential_state_converges_at_first_order() {
    let (a, c) = (0.8f64, 1.5);
    let spec = scalar(&format!(r#"{{"A": {a}}}"#), &[], &deterministic(c));
    let y0 = |m: usize| state(&spec, m, 1, None).y.values(0)[0];
    let exact = c * (-a).exp();
    let (coarse, fine) = (y0(2000), y0(4000));
    let ratio = (coarse - exact) / (fine - exact);
    assert!((ratio - 2.0).abs() < 0.01, "{ratio}");
    assert!((2.0 * fine - coarse - exact).abs() <= 1e-6);
}

#[test]
fn brownian_terminal_is_its_own_martingale() {
    let spec = scalar(
        "{}",
        &[],
        r#"{"kind": "affine-in-terminal-noise", "payload": {"constant": [0.0], "brownian": [1.0]}}"#,
    );
    let g = grid(&spec, 16);
    let noise = generate_noise(&g, 400, &spec.jumps, 2).unwrap();
    let x = solve_state_bsde(&spec, &ControlProcess::zero(&g, 1), &noise).unwrap();
    for i in 0..16 {
        for p in 0..400 {
            assert!((x.y.values(i)[p] - noise.brownian(i)[p]).abs() < 1e-10);
            assert!((x.z.values(i)[p] - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn jump_terminal_is_its_own_martingale() {
    let spec = scalar(
        "{}",
        &[0.7, 2.0],
        r#"{"kind": "affine-in-terminal-noise",
            "payload": {"constant": [0.0], "brownian": [0.0], "jumps": [[0.0], [1.0]]}}"#,
    );
    let g = grid(&spec, 16);
    let noise = generate_noise(&g, 400, &spec.jumps, 3).unwrap();
    let x = solve_state_bsde(&spec, &ControlProcess::zero(&g, 1), &noise).unwrap();
    for i in 0..16 {
        for p in 0..400 {
            assert!((x.y.values(i)[p] - noise.compensated_path(i)[p * 2 + 1]).abs() < 1e-10);
            assert!(x.r[0].values(i)[p].abs() < 1e-10);
            assert!((x.r[1].values(i)[p] - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn superposition_on_common_noise() {
    let spec = fixture("jump_scalar");
    let g = grid(&spec, 25);
    let noise = generate_noise(&g, 600, &spec.jumps, 4).unwrap();
    let u1 = ControlProcess::from_fn(&g, |s| vec![(3.0 * s).cos()]).unwrap();
    let u2 = ControlProcess::from_fn(&g, |s| vec![s * s - 0.5]).unwrap();
    let xi1 = realize_terminal(&spec.terminal, &noise);
    let xi2: Vec<f64> = (0..600).map(|p| 0.3 - 0.7 * noise.brownian(25)[p]).collect();
    let opts = BsdeOptions::default();
    let both = solve_state_bsde_with(
        &spec,
        &u1.combine(1.0, &u2, 1.0).unwrap(),
        &noise,
        &xi1.iter().zip(&xi2).map(|(a, b)| a + b).collect::<Vec<_>>(),
        None,
        &opts,
    )
    .unwrap();
    let a = solve_state_bsde_with(&spec, &u1, &noise, &xi1, None, &opts).unwrap();
    let b = solve_state_bsde_with(&spec, &u2, &noise, &xi2, None, &opts).unwrap();
    for i in 0..=25 {
        for p in 0..600 {
            assert!((both.y.values(i)[p] - a.y.values(i)[p] - b.y.values(i)[p]).abs() < 1e-10);
            assert!((both.z.values(i)[p] - a.z.values(i)[p] - b.z.values(i)[p]).abs() < 1e-10);
        }
    }
}

#[test]
fn deterministic_data_give_deterministic_state() {
    let spec = fixture("det_scalar");
    let g = grid(&spec, 30);
    let u = ControlProcess::from_fn(&g, |s| vec![1.0 - s]).unwrap();
    let x = state(&spec, 30, 40, Some(u));
    assert!(zero_everywhere(&x.z));
    assert!(x.y.is_particle_independent());
}

/// `dk = -a k ds` from `k(0) = -y0`: `k(s) = -y0 e^{-a s}`.
#[test]
fn adjoint_of_a_constant_state() {
    let (a, y0) = (0.6f64, 1.3);
    let spec = scalar(&format!(r#"{{"A": {a}, "G": 1.0}}"#), &[], &deterministic(0.0));
    let run = |m: usize| {
        let g = grid(&spec, m);
        let noise = generate_noise(&g, 1, &spec.jumps, 0).unwrap();
        let x = StateProcesses {
            y: PathEnsemble::from_rows(&g, 1, 1, vec![vec![y0]; m + 1]).unwrap(),
            z: PathEnsemble::zeros(&g, 1, 1),
            r: Vec::new(),
            basis_degraded: false,
        };
        let k = solve_adjoint(&spec, &x, &noise, AdjointConvention::Standard).unwrap();
        k.k.values(m)[0]
    };
    let exact = -y0 * (-a).exp();
    let (coarse, fine) = (run(2000), run(4000));
    assert!((2.0 * fine - coarse - exact).abs() <= 1e-6);
    assert!(((coarse - exact) / (fine - exact) - 2.0).abs() < 0.01);
}

#[test]
fn adjoint_means_follow_the_expectation_equation() {
    let spec = fixture("jump_scalar");
    let m = 50;
    let n = 4000;
    let g = grid(&spec, m);
    let noise = generate_noise(&g, n, &spec.jumps, 8).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    let (x, _) = sol.simulated.as_ref().unwrap();
    let k = solve_adjoint(&spec, x, &noise, AdjointConvention::Standard).unwrap().k;
    let c = spec.coefficients_at(0.0).unwrap();
    let (a, ab, q, qb) = (c.a[(0, 0)], c.a_bar[(0, 0)], c.q[(0, 0)], c.q_bar[(0, 0)]);
    let h = g.step();
    // Per-particle martingale part: k(T) - k(0) + Σ h (a k + ā E k + q Y + q̄ E Y).
    let d: Vec<f64> = (0..n)
        .map(|p| {
            let drift: f64 = (0..m)
                .map(|i| h * (a * k.values(i)[p] + ab * k.mean(i)[0] + q * x.y.values(i)[p] + qb * x.y.mean(i)[0]))
                .sum();
            k.values(m)[p] - k.values(0)[p] + drift
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    assert!(mean.abs() <= 4.0 * sd / (n as f64).sqrt(), "{mean} {sd}");
}

#[test]
fn phi_vanishes_for_zero_terminal() {
    let spec = fixture("zero_terminal");
    let g = grid(&spec, 20);
    let noise = generate_noise(&g, 100, &spec.jumps, 0).unwrap();
    let r = solve_riccati(&spec, &g).unwrap();
    let phi = solve_phi(&spec, &r, &noise, &BsdeOptions::default()).unwrap();
    assert!(zero_everywhere(&phi.phi) && zero_everywhere(&phi.beta));
    assert!(phi.big_phi.iter().all(zero_everywhere));
}

#[test]
fn phi_is_constant_without_coefficients() {
    let spec = scalar(r#"{"N3": 1.0}"#, &[], &deterministic(-0.4));
    let g = grid(&spec, 10);
    let noise = generate_noise(&g, 5, &spec.jumps, 0).unwrap();
    let r = solve_riccati(&spec, &g).unwrap();
    let phi = solve_phi(&spec, &r, &noise, &BsdeOptions::default()).unwrap();
    for i in 0..=10 {
        assert!(phi.phi.values(i).iter().all(|v| *v == -0.4));
    }
}

/// With deterministic ξ, `φ' = (A + Ā + Π (Q + Q̄)) φ` along the mean
/// Riccati solution. Reference: joint fine RK4 of `(P, Π, φ)` backward.
#[test]
fn phi_matches_ode_reference() {
    let spec = fixture("det_scalar");
    let c = spec.coefficients_at(0.0).unwrap();
    let a = c.a[(0, 0)] + c.a_bar[(0, 0)];
    let q = c.q[(0, 0)] + c.q_bar[(0, 0)];
    let b = c.b[(0, 0)] + c.b_bar[(0, 0)];
    let n3 = c.n3[(0, 0)] + c.n3_bar[(0, 0)];
    let xi = 1.0;
    let path = rk4(
        |_, x| {
            let (pi, phi) = (x[0], x[1]);
            let dpi = 2.0 * a * pi + q * pi * pi - b * b / n3;
            vec![-dpi, -(a + pi * q) * phi]
        },
        &[0.0, xi],
        0.0,
        1.0,
        20_000,
    );
    let exact = path.last().unwrap()[1];
    let run = |m: usize| {
        let g = grid(&spec, m);
        let noise = generate_noise(&g, 1, &spec.jumps, 0).unwrap();
        let r = solve_riccati(&spec, &g).unwrap();
        solve_phi(&spec, &r, &noise, &BsdeOptions::default())
            .unwrap()
            .phi
            .values(0)[0]
    };
    let (coarse, fine) = (run(4000), run(8000));
    assert!((2.0 * fine - coarse - exact).abs() <= 1e-6, "{coarse} {fine} {exact}");
}

#[test]
fn picard_stops_at_once_for_zero_data() {
    let spec = fixture("zero_terminal");
    let g = grid(&spec, 20);
    let noise = generate_noise(&g, 100, &spec.jumps, 0).unwrap();
    let pic = solve_hamilton_picard(&spec, &noise, &PicardOptions::default()).unwrap();
    assert_eq!(pic.iterations, 1);
    assert!(zero_everywhere(&pic.state.y) && zero_everywhere(&pic.k.k));
}

#[test]
fn pipeline_solution_is_nearly_a_picard_fixed_point() {
    let spec = fixture("jump_scalar");
    let g = grid(&spec, 50);
    let noise = generate_noise(&g, 3000, &spec.jumps, 6).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    let options = PicardOptions {
        max_iter: 1,
        tol: f64::INFINITY,
        ..PicardOptions::default()
    };
    let pic = solve_hamilton_picard_from(&spec, &noise, &sol.k.k, &options).unwrap();
    assert!(pic.history[0] <= 2e-2, "{:?}", pic.history);
}

#[test]
fn picard_matches_deterministic_oracle() {
    let spec = fixture("det_scalar");
    let g = grid(&spec, 50);
    let oracle = brute_force_lq_oracle(&spec, &g).unwrap();
    let noise = generate_noise(&g, 20, &spec.jumps, 0).unwrap();
    let pic = solve_hamilton_picard(&spec, &noise, &PicardOptions::default()).unwrap();
    let d = pic.u.l2_distance(&oracle.u).unwrap();
    assert!(d <= 2e-2 * (1.0 + oracle.u.l2_norm()), "{d}");
    assert!(pic.monotone, "{:?}", pic.history);
}
