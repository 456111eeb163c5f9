use nalgebra::DMatrix;
use serde::Serialize;

use super::grid::TimeGrid;
use super::spec::{Coefficients, ProblemSpec};
use crate::error::Result;
use crate::linalg::{all_finite, frobenius, is_symmetric, min_eigenvalue};

const SYMMETRY_TOL: f64 = 1e-12;
const EIGEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// One of `bounded`, `symmetric`, `nonnegative`, `nonnegative-centered`,
    /// `uniformly-positive`.
    pub assumption: String,
    pub time: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub passed: bool,
    /// Largest δ with `N3 ⪰ δI` and `N3 + N̄3 ⪰ δI` at every checked time.
    pub delta: f64,
    pub violations: Vec<Violation>,
}

/// Checks boundedness, symmetry, nonnegativity and uniform positivity of the
/// weights at every grid node and at every coefficient breakpoint.
///
/// Only dimension errors are hard errors; everything else is reported.
pub fn validate_assumptions(spec: &ProblemSpec, grid: &TimeGrid) -> Result<AssumptionReport> {
    spec.check_dimensions()?;
    let mut times: Vec<f64> = grid.nodes().to_vec();
    times.extend(spec.piece_times());
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut violations: Vec<Violation> = Vec::new();
    let mut push = |assumption: &str, time: f64, description: String| {
        // First offending time per (check, matrix) is enough.
        if !violations
            .iter()
            .any(|v| v.assumption == assumption && v.description == description)
        {
            violations.push(Violation {
                assumption: assumption.into(),
                time,
                description,
            });
        }
    };

    let mut delta = f64::INFINITY;
    for &s in &times {
        let c = spec.coeffs.at(s);
        for (name, m) in named(&c) {
            if !all_finite(&m) {
                push("bounded", s, format!("{name} has non-finite entries"));
            }
        }
        for (name, m) in weights(&c) {
            if !is_symmetric(&m, SYMMETRY_TOL) {
                push("symmetric", s, format!("{name} not symmetric"));
            }
        }
        for (name, m) in nonnegative(&c) {
            if min_eigenvalue(&m) < -EIGEN_TOL * (1.0 + frobenius(&m)) {
                push("nonnegative", s, format!("{name} not nonnegative"));
            }
        }
        for (k, n2) in c.n2.iter().enumerate() {
            if min_eigenvalue(n2) < -EIGEN_TOL * (1.0 + frobenius(n2)) {
                push("nonnegative-centered", s, format!("N2[{k}] not nonnegative"));
            }
        }
        let n3_sum = &c.n3 + &c.n3_bar;
        for (name, m) in [("N3", &c.n3), ("N3+N3_bar", &n3_sum)] {
            let lam = min_eigenvalue(m);
            delta = delta.min(lam);
            if lam.is_nan() || lam <= 0.0 {
                push("uniformly-positive", s, format!("{name} not uniformly positive"));
            }
        }
    }
    Ok(AssumptionReport {
        passed: violations.is_empty(),
        delta,
        violations,
    })
}

fn named(c: &Coefficients) -> Vec<(String, DMatrix<f64>)> {
    let mut out = vec![
        ("A".to_string(), c.a.clone()),
        ("A_bar".into(), c.a_bar.clone()),
        ("B".into(), c.b.clone()),
        ("B_bar".into(), c.b_bar.clone()),
        ("C".into(), c.c.clone()),
        ("C_bar".into(), c.c_bar.clone()),
        ("Q".into(), c.q.clone()),
        ("Q_bar".into(), c.q_bar.clone()),
        ("N1".into(), c.n1.clone()),
        ("N1_bar".into(), c.n1_bar.clone()),
        ("N3".into(), c.n3.clone()),
        ("N3_bar".into(), c.n3_bar.clone()),
        ("G".into(), c.g.clone()),
        ("G_bar".into(), c.g_bar.clone()),
    ];
    for k in 0..c.d.len() {
        out.push((format!("D[{k}]"), c.d[k].clone()));
        out.push((format!("D_bar[{k}]"), c.d_bar[k].clone()));
        out.push((format!("N2[{k}]"), c.n2[k].clone()));
        out.push((format!("N2_bar[{k}]"), c.n2_bar[k].clone()));
    }
    out
}

fn weights(c: &Coefficients) -> Vec<(String, DMatrix<f64>)> {
    let mut out = nonnegative(c);
    out.push(("N3".into(), c.n3.clone()));
    out.push(("N3+N3_bar".into(), &c.n3 + &c.n3_bar));
    for (k, n2) in c.n2.iter().enumerate() {
        out.push((format!("N2[{k}]"), n2.clone()));
    }
    out
}

fn nonnegative(c: &Coefficients) -> Vec<(String, DMatrix<f64>)> {
    let mut out = vec![
        ("Q".to_string(), c.q.clone()),
        ("Q+Q_bar".into(), &c.q + &c.q_bar),
        ("N1".into(), c.n1.clone()),
        ("N1+N1_bar".into(), &c.n1 + &c.n1_bar),
        ("G".into(), c.g.clone()),
        ("G+G_bar".into(), &c.g + &c.g_bar),
    ];
    for k in 0..c.n2.len() {
        out.push((format!("N2+N2_bar[{k}]"), &c.n2[k] + &c.n2_bar[k]));
    }
    out
}
