//! Brute-force reference for problems whose optimum is deterministic.
//!
//! With a deterministic terminal value and `C + C̄ = 0`, `D_k + D̄_k = 0`,
//! the optimal control, state and adjoint carry no randomness, so `Z` and
//! `R` vanish and every expectation is the value itself. The discrete state
//! is then affine in the stacked control values and the discrete cost is a
//! convex quadratic, minimized here by solving the normal equations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::control::ControlProcess;
use crate::error::{Error, Result};
use crate::problem::{ProblemSpec, TerminalCondition, TimeGrid};

/// Largest decision dimension `M * m` the oracle accepts.
pub const MAX_DECISION_DIM: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleSolution {
    #[serde(skip)]
    pub u: ControlProcess,
    pub cost: f64,
    /// Deterministic state at the nodes.
    pub y: Vec<Vec<f64>>,
    pub decision_dim: usize,
}

/// `Y_i = c_i + L_i u` for the backward Euler recursion
/// `Y_i = Y_{i+1} - h ((A+Ā)_i Y_{i+1} + (B+B̄)_i u_i)`.
struct AffineState {
    offsets: Vec<DVector<f64>>,
    maps: Vec<DMatrix<f64>>,
}

fn affine_state(spec: &ProblemSpec, grid: &TimeGrid, xi: &[f64]) -> Result<AffineState> {
    let (n, m) = (spec.n, spec.m);
    let steps = grid.steps();
    let dim = steps * m;
    let h = grid.step();
    let mut offsets = vec![DVector::zeros(n); steps + 1];
    let mut maps = vec![DMatrix::zeros(n, dim); steps + 1];
    offsets[steps] = DVector::from_column_slice(xi);
    for i in (0..steps).rev() {
        let c = spec.coefficients_at(grid.node(i))?;
        let phi = DMatrix::identity(n, n) - (&c.a + &c.a_bar) * h;
        offsets[i] = &phi * &offsets[i + 1];
        let mut map = &phi * &maps[i + 1];
        let bs = (&c.b + &c.b_bar) * h;
        map.view_mut((0, i * m), (n, m)).copy_from(&(-bs));
        maps[i] = map;
    }
    Ok(AffineState { offsets, maps })
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Minimizes the discretized cost over deterministic controls on `grid`.
///
/// Refuses problems whose optimum may be random and grids with more than
/// [`MAX_DECISION_DIM`] decision variables.
pub fn brute_force_lq_oracle(spec: &ProblemSpec, grid: &TimeGrid) -> Result<OracleSolution> {
    spec.check_dimensions()?;
    if !spec.is_reducible() {
        return Err(Error::OracleRefused(
            "the terminal value must be deterministic and C + C_bar, D + D_bar must vanish".into(),
        ));
    }
    let m = spec.m;
    let steps = grid.steps();
    let dim = steps * m;
    if dim > MAX_DECISION_DIM {
        return Err(Error::OracleRefused(format!(
            "decision dimension {dim} exceeds {MAX_DECISION_DIM}"
        )));
    }
    let xi = match &spec.terminal {
        TerminalCondition::Deterministic(v) => v.clone(),
        _ => unreachable!("reducible specs have a deterministic terminal value"),
    };
    let state = affine_state(spec, grid, &xi)?;
    let w = grid.node_weights();
    let h = grid.step();

    let mut hess = DMatrix::<f64>::zeros(dim, dim);
    let mut grad = DVector::<f64>::zeros(dim);
    let mut add = |weight: &DMatrix<f64>, i: usize| {
        let (l, c) = (&state.maps[i], &state.offsets[i]);
        let wl = weight * l;
        hess += l.transpose() * &wl;
        grad += wl.transpose() * c;
    };
    for (i, &s) in grid.nodes().iter().enumerate() {
        let c = spec.coefficients_at(s)?;
        add(&(sym(&(&c.q + &c.q_bar)) * w[i]), i);
    }
    add(&sym(&(&spec.coeffs.g + &spec.coeffs.g_bar)), 0);
    for i in 0..steps {
        let c = spec.coefficients_at(grid.node(i))?;
        let r = sym(&(&c.n3 + &c.n3_bar)) * h;
        let mut block = hess.view_mut((i * m, i * m), (m, m));
        block += r;
    }

    let chol = hess.clone().cholesky().ok_or_else(|| Error::Singular {
        factor: "oracle normal matrix".into(),
        s: grid.t_start(),
        sigma: 0.0,
    })?;
    let u = -chol.solve(&grad);

    let y: Vec<Vec<f64>> = (0..=steps)
        .map(|i| (&state.offsets[i] + &state.maps[i] * &u).iter().copied().collect())
        .collect();
    let cost = discrete_cost(spec, grid, &y, &u)?;

    let mut values: Vec<Vec<f64>> = (0..steps).map(|i| u.rows(i * m, m).iter().copied().collect()).collect();
    values.push(values[steps - 1].clone());
    Ok(OracleSolution {
        u: ControlProcess::deterministic(grid, values)?,
        cost,
        y,
        decision_dim: dim,
    })
}

fn discrete_cost(spec: &ProblemSpec, grid: &TimeGrid, y: &[Vec<f64>], u: &DVector<f64>) -> Result<f64> {
    let m = spec.m;
    let w = grid.node_weights();
    let h = grid.step();
    let quad = |a: &DMatrix<f64>, x: &[f64]| {
        let v = DVector::from_column_slice(x);
        v.dot(&(a * &v))
    };
    let mut total = quad(&(&spec.coeffs.g + &spec.coeffs.g_bar), &y[0]);
    for (i, &s) in grid.nodes().iter().enumerate() {
        let c = spec.coefficients_at(s)?;
        total += w[i] * quad(&(&c.q + &c.q_bar), &y[i]);
        if i < grid.steps() {
            let ui: Vec<f64> = u.rows(i * m, m).iter().copied().collect();
            total += h * quad(&(&c.n3 + &c.n3_bar), &ui);
        }
    }
    Ok(total)
}
