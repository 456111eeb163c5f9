#![allow(dead_code)]

use std::path::Path;

use mflq_core::{build_grid, parse_spec, parse_spec_str, ProblemSpec, TimeGrid};

pub fn fixture(name: &str) -> ProblemSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"));
    parse_spec(path).unwrap()
}

pub const FIXTURES: &[&str] = &[
    "analytic_riccati",
    "det_scalar",
    "jump_scalar",
    "scalar_generic",
    "two_dim",
    "zero",
    "zero_terminal",
];

/// Scalar spec on `[0, 1]` from a coefficient object, jump weights and a
/// terminal object.
pub fn scalar(coefficients: &str, weights: &[f64], terminal: &str) -> ProblemSpec {
    let jumps = if weights.is_empty() {
        String::new()
    } else {
        format!(r#""jumps": {{"weights": {weights:?}}},"#)
    };
    let text = format!(
        r#"{{"n": 1, "m": 1, "horizon": {{"t": 0.0, "T": 1.0}}, {jumps}
            "coefficients": {coefficients}, "terminal": {terminal}}}"#
    );
    parse_spec_str(&text).unwrap()
}

pub fn deterministic(v: f64) -> String {
    format!(r#"{{"kind": "deterministic-vector", "payload": {{"value": [{v}]}}}}"#)
}

pub fn grid(spec: &ProblemSpec, steps: usize) -> TimeGrid {
    build_grid(&spec.horizon, steps).unwrap()
}

/// Classical RK4 for `x' = f(s, x)` from `s0` to `s1` in `steps` steps.
pub fn rk4(f: impl Fn(f64, &[f64]) -> Vec<f64>, x0: &[f64], s0: f64, s1: f64, steps: usize) -> Vec<Vec<f64>> {
    let h = (s1 - s0) / steps as f64;
    let mut out = vec![x0.to_vec()];
    let mut x = x0.to_vec();
    let axpy = |x: &[f64], a: f64, k: &[f64]| x.iter().zip(k).map(|(x, k)| x + a * k).collect::<Vec<_>>();
    for i in 0..steps {
        let s = s0 + i as f64 * h;
        let k1 = f(s, &x);
        let k2 = f(s + h / 2.0, &axpy(&x, h / 2.0, &k1));
        let k3 = f(s + h / 2.0, &axpy(&x, h / 2.0, &k2));
        let k4 = f(s + h, &axpy(&x, h, &k3));
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        out.push(x.clone());
    }
    out
}
