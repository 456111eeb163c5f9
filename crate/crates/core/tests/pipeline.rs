mod common;

use common::{deterministic, fixture, grid, rk4, scalar, FIXTURES};
use mflq_core::bsde::{solve_phi, AdjointProcess};
use mflq_core::pipeline::{reconstruct_optimal, solve_k_forward};
use mflq_core::verify::{gateaux_derivative, hamilton_residual, stationarity_residual, DerivativeMethod};
use mflq_core::{
    brute_force_lq_oracle, generate_noise, solve_decoupled, solve_riccati, verify_optimality, AdjointConvention,
    BsdeOptions, ControlProcess, DecoupledOptions, PathEnsemble, VerifyOptions,
};

fn solve(
    name: &str,
    steps: usize,
    particles: usize,
    seed: u64,
) -> (
    mflq_core::ProblemSpec,
    mflq_core::NoiseIncrements,
    mflq_core::DecoupledSolution,
) {
    let spec = fixture(name);
    let g = grid(&spec, steps);
    let noise = generate_noise(&g, particles, &spec.jumps, seed).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    (spec, noise, sol)
}

/// Shooting on the mean system
/// `y' = a y + b u`, `k' = -(a k + q y)`, `u = -b k / n3`, `k(0) = -g y(0)`,
/// `y(1) = ξ`, with all coefficients the plain-plus-barred sums.
#[test]
fn mean_adjoint_matches_shooting_reference() {
    let spec = fixture("det_scalar");
    let c = spec.coefficients_at(0.0).unwrap();
    let sum = |a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>| a[(0, 0)] + b[(0, 0)];
    let (a, b, q) = (sum(&c.a, &c.a_bar), sum(&c.b, &c.b_bar), sum(&c.q, &c.q_bar));
    let n3 = sum(&c.n3, &c.n3_bar);
    let g = spec.coeffs.g[(0, 0)] + spec.coeffs.g_bar[(0, 0)];
    let xi = 1.0;
    let steps = 8000;
    let shoot = |y0: f64| {
        rk4(
            |_, x| {
                let (y, k) = (x[0], x[1]);
                vec![a * y - b * b * k / n3, -(a * k + q * y)]
            },
            &[y0, -g * y0],
            0.0,
            1.0,
            steps,
        )
    };
    // The terminal value is affine in y0.
    let (f0, f1) = (shoot(0.0).last().unwrap()[0], shoot(1.0).last().unwrap()[0]);
    let y0 = (xi - f0) / (f1 - f0);
    let reference = shoot(y0);

    let g = grid(&spec, steps);
    let noise = generate_noise(&g, 1, &spec.jumps, 0).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    let err = (0..=steps)
        .map(|i| (sol.k.k.mean(i)[0] - reference[i][1]).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn zero_terminal_gives_the_zero_solution() {
    let (_, _, sol) = solve("zero_terminal", 20, 200, 0);
    let zero = |x: &PathEnsemble| (0..x.nodes()).all(|i| x.values(i).iter().all(|v| *v == 0.0));
    assert!(zero(&sol.k.k) && zero(&sol.state.y) && zero(&sol.state.z));
    assert!((0..=20).all(|i| sol.u.mean(i).iter().all(|v| *v == 0.0)));
    assert_eq!(sol.cost.total, 0.0);
}

#[test]
fn k_starts_at_zero_without_initial_weights() {
    let spec = scalar(
        r#"{"A": 0.3, "B": 1.0, "N3": 1.0, "C": 0.2}"#,
        &[],
        r#"{"kind": "affine-in-terminal-noise", "payload": {"constant": [1.0], "brownian": [0.4]}}"#,
    );
    let g = grid(&spec, 20);
    let noise = generate_noise(&g, 100, &spec.jumps, 0).unwrap();
    let r = solve_riccati(&spec, &g).unwrap();
    let phi = solve_phi(&spec, &r, &noise, &BsdeOptions::default()).unwrap();
    let k = solve_k_forward(&spec, &r, &phi, &noise).unwrap();
    assert!(k.k.values(0).iter().all(|v| *v == 0.0));
    // No running cost on Y and no N1 Z loading: no source either.
    assert!((0..=20).all(|i| k.k.values(i).iter().all(|v| v.abs() < 1e-14)));
}

#[test]
fn unbarred_control_formula() {
    let spec = scalar(
        r#"{"A": 0.3, "B": 1.4, "N3": 0.7, "Q": 1.0, "G": 0.5, "Q_bar": 0.2, "C": 0.2, "N1": 0.3}"#,
        &[],
        r#"{"kind": "affine-in-terminal-noise", "payload": {"constant": [1.0], "brownian": [0.4]}}"#,
    );
    let g = grid(&spec, 20);
    let noise = generate_noise(&g, 300, &spec.jumps, 0).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    for i in 0..20 {
        for p in 0..300 {
            let expected = -1.4 / 0.7 * sol.k.k.values(i)[p];
            assert!((sol.u.value(i, p)[0] - expected).abs() < 1e-13);
        }
    }
}

#[test]
fn reconstruction_of_zero_inputs() {
    let spec = fixture("jump_scalar");
    let g = grid(&spec, 10);
    let noise = generate_noise(&g, 30, &spec.jumps, 0).unwrap();
    let spec0 = spec.with_terminal(mflq_core::TerminalCondition::zero(1)).unwrap();
    let r = solve_riccati(&spec0, &g).unwrap();
    let phi = solve_phi(&spec0, &r, &noise, &BsdeOptions::default()).unwrap();
    let k = AdjointProcess {
        k: PathEnsemble::zeros(&g, 30, 1),
    };
    let (u, x) = reconstruct_optimal(&spec0, &r, &phi, &k).unwrap();
    assert_eq!(u.l2_norm(), 0.0);
    assert_eq!(x.y.sup_rms(), 0.0);
    assert_eq!(x.z.sup_rms(), 0.0);
    assert!(x.r.iter().all(|r| r.sup_rms() == 0.0));
}

#[test]
fn diagnostics_hold_on_every_fixture() {
    for name in FIXTURES {
        let (_, _, sol) = solve(name, 40, 400, 3);
        let d = &sol.diagnostics;
        assert!(d.stationarity_residual <= 1e-12, "{name}: {d:?}");
        assert!(d.decoupling_error <= 1e-12, "{name}: {d:?}");
        assert!(d.terminal_error <= 1e-12, "{name}: {d:?}");
        assert!(sol.cost.form_gap() <= 1e-10, "{name}");
        assert!((sol.cost.total - sol.cost.terms.sum()).abs() <= 1e-15 * (1.0 + sol.cost.total.abs()));
    }
}

#[test]
fn stationarity_residual_of_the_zero_control() {
    let (spec, _, sol) = solve("jump_scalar", 20, 300, 1);
    let g = sol.k.k.grid().clone();
    let u = ControlProcess::zero(&g, 1);
    let c = spec.coefficients_at(0.0).unwrap();
    let (b, bb) = (c.b[(0, 0)], c.b_bar[(0, 0)]);
    let h = g.step();
    let mut expected = 0.0;
    for i in 0..20 {
        let ek = sol.k.k.mean(i)[0];
        expected += h * sol.k.k.values(i).iter().map(|k| (b * k + bb * ek).powi(2)).sum::<f64>() / 300.0;
    }
    let r = stationarity_residual(&spec, &u, &sol.k).unwrap();
    assert!(
        (r - expected.sqrt()).abs() < 1e-12 * (1.0 + r),
        "{r} {}",
        expected.sqrt()
    );
}

#[test]
fn gateaux_trivial_cases() {
    let (spec, noise, sol) = solve("jump_scalar", 20, 300, 2);
    let g = noise.grid().clone();
    let v0 = ControlProcess::zero(&g, 1);
    let opts = BsdeOptions::default();
    for via in [DerivativeMethod::AdjointRepresentation, DerivativeMethod::Direct] {
        let d = gateaux_derivative(&spec, &sol.u, &v0, &noise, via, &opts).unwrap();
        assert_eq!(d.value, 0.0);
    }
    let spec0 = fixture("zero_terminal");
    let v = ControlProcess::from_fn(&g, |s| vec![s.sin() + 0.3]).unwrap();
    let d = gateaux_derivative(&spec0, &v0, &v, &noise, DerivativeMethod::AdjointRepresentation, &opts).unwrap();
    assert_eq!(d.value, 0.0);
}

/// The pipeline control is stationary for the continuous problem; against
/// the discrete cost its derivative is first order in the step.
#[test]
fn gateaux_vanishes_at_the_deterministic_optimum() {
    let derivatives = |m: usize| {
        let (spec, noise, sol) = solve("det_scalar", m, 1, 0);
        let g = noise.grid().clone();
        let opts = BsdeOptions::default();
        let v = ControlProcess::from_fn(&g, |s| vec![1.0 - 2.0 * s]).unwrap();
        let get = |via| gateaux_derivative(&spec, &sol.u, &v, &noise, via, &opts).unwrap().value;
        let (adj, direct, fd) = (
            get(DerivativeMethod::AdjointRepresentation),
            get(DerivativeMethod::Direct),
            get(DerivativeMethod::FiniteDifference),
        );
        assert!((direct - fd).abs() <= 1e-10, "{direct} {fd}");
        (adj, direct)
    };
    let (a1, d1) = derivatives(100);
    let (a2, d2) = derivatives(400);
    assert!(a1.abs() <= 5e-2 && d1.abs() <= 5e-2, "{a1} {d1}");
    assert!(
        a2.abs() <= a1.abs() / 3.0 && d2.abs() <= d1.abs() / 3.0,
        "{a1} {a2} {d1} {d2}"
    );
}

#[test]
fn hamilton_residual_of_the_zero_solution() {
    let (spec, noise, sol) = solve("zero_terminal", 20, 200, 0);
    let r = hamilton_residual(&spec, &sol, &noise, AdjointConvention::Standard).unwrap();
    assert_eq!(r.max(), 0.0);
}

#[test]
fn hamilton_residual_converges_in_the_step() {
    let r = |m: usize| {
        let (spec, noise, sol) = solve("det_scalar", m, 1, 0);
        hamilton_residual(&spec, &sol, &noise, AdjointConvention::Standard)
            .unwrap()
            .max()
    };
    let (r1, r2, r3) = (r(50), r(100), r(200));
    assert!(r1 >= 2.0 * r2 && r2 >= 2.0 * r3, "{r1:e} {r2:e} {r3:e}");
}

#[test]
fn doubled_weights_are_detected() {
    let (spec, noise, sol) = solve("jump_scalar", 50, 2000, 4);
    assert!(spec.coefficients_at(0.0).unwrap().c[(0, 0)] != 0.0);
    let standard = hamilton_residual(&spec, &sol, &noise, AdjointConvention::Standard).unwrap();
    let doubled = hamilton_residual(&spec, &sol, &noise, AdjointConvention::DoubledWeights).unwrap();
    assert!(doubled.adjoint > standard.adjoint, "{standard:?} {doubled:?}");
}

#[test]
fn oracle_sandwich_with_cancelling_diffusion() {
    // C + C̄ = 0 keeps the optimum deterministic.
    let spec = scalar(
        r#"{"A": 0.4, "A_bar": -0.1, "B": 1.0, "B_bar": 0.2, "C": 0.3, "C_bar": -0.3,
            "Q": 1.0, "Q_bar": 0.2, "N1": 0.5, "N3": 1.0, "N3_bar": 0.2, "G": 0.7}"#,
        &[],
        &deterministic(0.8),
    );
    let g = grid(&spec, 40);
    let oracle = brute_force_lq_oracle(&spec, &g).unwrap();
    let noise = generate_noise(&g, 10, &spec.jumps, 0).unwrap();
    let sol = solve_decoupled(&spec, &noise, &DecoupledOptions::default()).unwrap();
    let j = sol.simulated.as_ref().unwrap().1.total;
    assert!(oracle.cost <= j + 1e-12, "{} {j}", oracle.cost);
    assert!(
        j - oracle.cost <= 1e-3 * (1.0 + oracle.cost.abs()),
        "{} {j}",
        oracle.cost
    );
    assert!(sol.u.l2_distance(&oracle.u).unwrap() <= 2e-2 * (1.0 + oracle.u.l2_norm()));
}

#[test]
fn verification_of_the_zero_terminal_instance() {
    let (spec, noise, sol) = solve("zero_terminal", 20, 500, 5);
    let options = VerifyOptions {
        probes: 6,
        coercivity_samples: 6,
        ..VerifyOptions::default()
    };
    let report = verify_optimality(&spec, &sol, &noise, &options).unwrap();
    assert!(report.passed, "{report:#?}");
    assert_eq!(report.optimal_cost, 0.0);
    for p in &report.probes {
        // J(εv) = ε² J(0; v).
        for c in &p.perturbed {
            let expected = c.epsilon * c.epsilon * p.zero_terminal_cost;
            assert!((c.cost - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn verification_of_the_deterministic_instance() {
    let (spec, noise, sol) = solve("det_scalar", 50, 1, 0);
    let options = VerifyOptions {
        parabola_delta: DerivativeMethod::Direct,
        ..VerifyOptions::default()
    };
    let report = verify_optimality(&spec, &sol, &noise, &options).unwrap();
    assert_eq!(report.mc_standard_error, 0.0);
    assert!(report.passed, "{report:#?}");
    let vertex = report.vertex.unwrap();
    assert!(vertex.curvature_relative_error <= 1e-8, "{vertex:?}");
}

#[test]
fn verification_report_is_reproducible() {
    let (spec, noise, sol) = solve("jump_scalar", 10, 200, 6);
    let options = VerifyOptions {
        probes: 4,
        coercivity_samples: 4,
        seed: 99,
        ..VerifyOptions::default()
    };
    let a = verify_optimality(&spec, &sol, &noise, &options).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| verify_optimality(&spec, &sol, &noise, &options).unwrap());
    assert_eq!(a, b);
}
