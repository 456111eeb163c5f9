//! Backward RK4 integration of the two Riccati equations of the decoupling
//! and their residual certification.
//!
//! `P` solves
//! `P' = P Aᵀ + A P + P Q P - B N3⁻¹ Bᵀ - C (P N1 + I)⁻¹ P Cᵀ - Σ_k ν_k D_k (P N2_k + I)⁻¹ P D_kᵀ`
//! and `Π` the same equation with every coefficient replaced by its sum with
//! the barred coefficient, except that the `C`/`D` terms keep `P` as the
//! sandwiched factor. Both vanish at the terminal time.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, checked_inverse, frobenius, min_singular_value, symmetrize};
use crate::problem::{Coefficients, ProblemSpec, TimeGrid};

/// One matrix per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixTrajectory {
    grid: TimeGrid,
    values: Vec<DMatrix<f64>>,
}

impl MatrixTrajectory {
    pub fn new(grid: TimeGrid, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::Dimension(format!(
                "{} matrices for {} nodes",
                values.len(),
                grid.steps() + 1
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn at(&self, i: usize) -> &DMatrix<f64> {
        &self.values[i]
    }

    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiPair {
    pub p: MatrixTrajectory,
    pub pi: MatrixTrajectory,
    pub max_residual_p: f64,
    pub max_residual_pi: f64,
    /// Smallest singular value over the grid of every factor inverted by the
    /// decoupling.
    pub min_inv_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiccatiResidual {
    pub p: f64,
    pub pi: f64,
    pub min_inv_margin: f64,
}

/// Coefficients of one Riccati equation. For `Π` these are the sums of plain
/// and barred coefficients.
struct Reduced<'a> {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    b: DMatrix<f64>,
    n3: DMatrix<f64>,
    c: DMatrix<f64>,
    n1: DMatrix<f64>,
    d: Vec<DMatrix<f64>>,
    n2: Vec<DMatrix<f64>>,
    nu: &'a [f64],
    n3_name: &'static str,
    n1_name: &'static str,
    n2_name: &'static str,
}

fn centered<'a>(c: &Coefficients, nu: &'a [f64]) -> Reduced<'a> {
    Reduced {
        a: c.a.clone(),
        q: c.q.clone(),
        b: c.b.clone(),
        n3: c.n3.clone(),
        c: c.c.clone(),
        n1: c.n1.clone(),
        d: c.d.clone(),
        n2: c.n2.clone(),
        nu,
        n3_name: "N3",
        n1_name: "P*N1+I",
        n2_name: "P*N2+I",
    }
}

fn summed<'a>(c: &Coefficients, nu: &'a [f64]) -> Reduced<'a> {
    Reduced {
        a: &c.a + &c.a_bar,
        q: &c.q + &c.q_bar,
        b: &c.b + &c.b_bar,
        n3: &c.n3 + &c.n3_bar,
        c: &c.c + &c.c_bar,
        n1: &c.n1 + &c.n1_bar,
        d: c.d.iter().zip(&c.d_bar).map(|(a, b)| a + b).collect(),
        n2: c.n2.iter().zip(&c.n2_bar).map(|(a, b)| a + b).collect(),
        nu,
        n3_name: "N3+N3_bar",
        n1_name: "P*(N1+N1_bar)+I",
        n2_name: "P*(N2+N2_bar)+I",
    }
}

/// `X Aᵀ + A X + X Q X - B N3⁻¹ Bᵀ - C (P N1 + I)⁻¹ P Cᵀ - Σ ν D (P N2 + I)⁻¹ P Dᵀ`
fn rhs(x: &DMatrix<f64>, p: &DMatrix<f64>, r: &Reduced, s: f64) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut out = x * r.a.transpose() + &r.a * x + x * &r.q * x;
    let n3_inv = checked_inverse(&r.n3, r.n3_name, s)?;
    out -= &r.b * n3_inv * r.b.transpose();
    let f1 = checked_inverse(&(p * &r.n1 + &id), r.n1_name, s)?;
    out -= &r.c * f1 * p * r.c.transpose();
    for k in 0..r.d.len() {
        let name = format!("{}[{k}]", r.n2_name);
        let f2 = checked_inverse(&(p * &r.n2[k] + &id), &name, s)?;
        out -= (&r.d[k] * f2 * p * r.d[k].transpose()) * r.nu[k];
    }
    Ok(out)
}

/// Right-hand side `dP/ds` with coefficients sampled at `s`.
pub fn rhs_p(p: &DMatrix<f64>, s: f64, spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    let c = spec.coefficients_at(s)?;
    rhs(p, p, &centered(&c, spec.jumps.weights()), s)
}

/// Right-hand side `dΠ/ds` with coefficients sampled at `s`.
pub fn rhs_pi(pi: &DMatrix<f64>, p: &DMatrix<f64>, s: f64, spec: &ProblemSpec) -> Result<DMatrix<f64>> {
    let c = spec.coefficients_at(s)?;
    rhs(pi, p, &summed(&c, spec.jumps.weights()), s)
}

fn check_finite(m: &DMatrix<f64>, what: &str, s: f64) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::Divergence { what: what.into(), s })
    }
}

/// The four RK4 stage values of `P` on the interval ending at `p_next`, with
/// coefficients frozen at the interval midpoint.
fn p_stages(p_next: &DMatrix<f64>, r: &Reduced, h: f64, s: f64) -> Result<[(DMatrix<f64>, DMatrix<f64>); 4]> {
    let k1 = rhs(p_next, p_next, r, s)?;
    let x2 = p_next - &k1 * (0.5 * h);
    let k2 = rhs(&x2, &x2, r, s)?;
    let x3 = p_next - &k2 * (0.5 * h);
    let k3 = rhs(&x3, &x3, r, s)?;
    let x4 = p_next - &k3 * h;
    let k4 = rhs(&x4, &x4, r, s)?;
    Ok([(p_next.clone(), k1), (x2, k2), (x3, k3), (x4, k4)])
}

fn rk4_combine(next: &DMatrix<f64>, k: [&DMatrix<f64>; 4], h: f64) -> DMatrix<f64> {
    symmetrize(&(next - (k[0] + k[1] * 2.0 + k[2] * 2.0 + k[3]) * (h / 6.0)))
}

/// Integrates `P` backward from `P(T) = 0` with classical RK4.
pub fn solve_p(spec: &ProblemSpec, grid: &TimeGrid) -> Result<MatrixTrajectory> {
    spec.check_dimensions()?;
    let n = spec.n;
    let h = grid.step();
    let steps = grid.steps();
    let mut values = vec![DMatrix::zeros(n, n); steps + 1];
    for i in (0..steps).rev() {
        let s = grid.midpoint(i);
        let c = spec.coeffs.at(s);
        let r = centered(&c, spec.jumps.weights());
        let st = p_stages(&values[i + 1], &r, h, s).map_err(|e| at_node(e, grid.node(i)))?;
        let next = rk4_combine(&values[i + 1], [&st[0].1, &st[1].1, &st[2].1, &st[3].1], h);
        check_finite(&next, "P", grid.node(i))?;
        values[i] = next;
    }
    MatrixTrajectory::new(grid.clone(), values)
}

/// Integrates `Π` backward from `Π(T) = 0`.
///
/// `P` at the internal RK4 stages is regenerated from the stored node value
/// with the same stages `solve_p` used, so the pair is integrated exactly as
/// one coupled system. With all barred coefficients zero both equations and
/// all stage values coincide, and `Π` reproduces `P` bit for bit.
pub fn solve_pi(spec: &ProblemSpec, grid: &TimeGrid, p: &MatrixTrajectory) -> Result<MatrixTrajectory> {
    spec.check_dimensions()?;
    if p.grid() != grid {
        return Err(Error::Dimension("P was solved on a different grid".into()));
    }
    let n = spec.n;
    let h = grid.step();
    let steps = grid.steps();
    let nu = spec.jumps.weights();
    let mut values = vec![DMatrix::zeros(n, n); steps + 1];
    for i in (0..steps).rev() {
        let s = grid.midpoint(i);
        let c = spec.coeffs.at(s);
        let st = p_stages(p.at(i + 1), &centered(&c, nu), h, s).map_err(|e| at_node(e, grid.node(i)))?;
        let r = summed(&c, nu);
        let next = &values[i + 1];
        let step = || -> Result<DMatrix<f64>> {
            let k1 = rhs(next, &st[0].0, &r, s)?;
            let k2 = rhs(&(next - &k1 * (0.5 * h)), &st[1].0, &r, s)?;
            let k3 = rhs(&(next - &k2 * (0.5 * h)), &st[2].0, &r, s)?;
            let k4 = rhs(&(next - &k3 * h), &st[3].0, &r, s)?;
            Ok(rk4_combine(next, [&k1, &k2, &k3, &k4], h))
        };
        let out = step().map_err(|e| at_node(e, grid.node(i)))?;
        check_finite(&out, "Pi", grid.node(i))?;
        values[i] = out;
    }
    MatrixTrajectory::new(grid.clone(), values)
}

fn at_node(e: Error, s: f64) -> Error {
    match e {
        Error::Singular { factor, sigma, .. } => Error::Singular { factor, s, sigma },
        other => other,
    }
}

/// Smallest singular value over the grid of `P N1 + I`, `P (N1+N̄1) + I`,
/// `P N2_k + I`, `P (N2_k+N̄2_k) + I`, `I + G P` and `I + (G+Ḡ) Π`.
pub fn inverse_margin(spec: &ProblemSpec, p: &MatrixTrajectory, pi: &MatrixTrajectory) -> f64 {
    let n = spec.n;
    let id = DMatrix::<f64>::identity(n, n);
    let grid = p.grid();
    let g_sum = &spec.coeffs.g + &spec.coeffs.g_bar;
    let mut margin = f64::INFINITY;
    for (i, &s) in grid.nodes().iter().enumerate() {
        let c = spec.coeffs.at(s);
        let pm = p.at(i);
        let mut factors = vec![
            pm * &c.n1 + &id,
            pm * (&c.n1 + &c.n1_bar) + &id,
            &id + &spec.coeffs.g * pm,
            &id + &g_sum * pi.at(i),
        ];
        for k in 0..c.n2.len() {
            factors.push(pm * &c.n2[k] + &id);
            factors.push(pm * (&c.n2[k] + &c.n2_bar[k]) + &id);
        }
        for f in &factors {
            margin = margin.min(min_singular_value(f));
        }
    }
    margin
}

/// Max Frobenius defect of both equations at interior nodes, with the
/// derivative approximated by central differences. Stencils that contain a
/// coefficient breakpoint are skipped: the derivative jumps there.
pub fn riccati_residual(pair: &RiccatiPair, spec: &ProblemSpec) -> RiccatiResidual {
    let grid = pair.p.grid();
    let h = grid.step();
    let nu = spec.jumps.weights();
    let breaks = spec.piece_times();
    let mut res_p: f64 = 0.0;
    let mut res_pi: f64 = 0.0;
    for i in 1..grid.steps() {
        let (lo, hi) = (grid.node(i - 1), grid.node(i + 1));
        if breaks.iter().any(|&b| b > lo && b < hi) {
            continue;
        }
        let s = grid.node(i);
        let c = spec.coeffs.at(s);
        let p = pair.p.at(i);
        let dp = (pair.p.at(i + 1) - pair.p.at(i - 1)) / (2.0 * h);
        let dpi = (pair.pi.at(i + 1) - pair.pi.at(i - 1)) / (2.0 * h);
        match rhs(p, p, &centered(&c, nu), s) {
            Ok(f) => res_p = res_p.max(frobenius(&(dp - f))),
            Err(_) => res_p = f64::INFINITY,
        }
        match rhs(pair.pi.at(i), p, &summed(&c, nu), s) {
            Ok(f) => res_pi = res_pi.max(frobenius(&(dpi - f))),
            Err(_) => res_pi = f64::INFINITY,
        }
    }
    RiccatiResidual {
        p: res_p,
        pi: res_pi,
        min_inv_margin: inverse_margin(spec, &pair.p, &pair.pi),
    }
}

/// Solves both equations and certifies the result. Fails with a singularity
/// error when some required inverse does not exist on the grid.
pub fn solve_riccati(spec: &ProblemSpec, grid: &TimeGrid) -> Result<RiccatiPair> {
    let p = solve_p(spec, grid)?;
    let pi = solve_pi(spec, grid, &p)?;
    let mut pair = RiccatiPair {
        p,
        pi,
        max_residual_p: 0.0,
        max_residual_pi: 0.0,
        min_inv_margin: 0.0,
    };
    let r = riccati_residual(&pair, spec);
    pair.max_residual_p = r.p;
    pair.max_residual_pi = r.pi;
    pair.min_inv_margin = r.min_inv_margin;
    let scale = 1.0 + frobenius(&(&spec.coeffs.g + &spec.coeffs.g_bar));
    if pair.min_inv_margin.is_nan() || pair.min_inv_margin < crate::linalg::SINGULARITY_TOL * scale {
        return Err(Error::Singular {
            factor: "decoupling inverse".into(),
            s: grid.t_start(),
            sigma: pair.min_inv_margin,
        });
    }
    Ok(pair)
}

/// Writes `s,row,col,P_value,Pi_value`, one line per node and entry, after
/// an optional `#` header line.
pub fn write_riccati_csv(pair: &RiccatiPair, header: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(h);
        out.push('\n');
    }
    out.push_str("s,row,col,P_value,Pi_value\n");
    for (i, &s) in pair.p.grid().nodes().iter().enumerate() {
        let (p, pi) = (pair.p.at(i), pair.pi.at(i));
        for r in 0..p.nrows() {
            for c in 0..p.ncols() {
                out.push_str(&format!("{s},{r},{c},{},{}\n", p[(r, c)], pi[(r, c)]));
            }
        }
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_grid, CoefficientSet, CoefficientTable, JumpMeasure, TerminalCondition, TimeHorizon};

    fn scalar(v: f64) -> CoefficientTable {
        CoefficientTable::Constant(DMatrix::from_element(1, 1, v))
    }

    fn spec(f: impl FnOnce(&mut CoefficientSet)) -> ProblemSpec {
        let mut c = CoefficientSet::zeros(1, 1, 0);
        c.n3 = scalar(1.0);
        f(&mut c);
        ProblemSpec::new(
            1,
            1,
            TimeHorizon::new(0.0, 1.0).unwrap(),
            JumpMeasure::none(),
            c,
            TerminalCondition::zero(1),
        )
        .unwrap()
    }

    fn m(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn rhs_examples() {
        let only_b = spec(|c| c.b = scalar(1.0));
        assert_eq!(rhs_p(&m(0.7), 0.3, &only_b).unwrap()[(0, 0)], -1.0);

        let zero = spec(|_| {});
        assert_eq!(rhs_p(&m(5.0), 0.3, &zero).unwrap()[(0, 0)], 0.0);

        let aq = spec(|c| {
            c.a = scalar(1.0);
            c.q = scalar(2.0);
        });
        assert_eq!(rhs_p(&m(3.0), 0.5, &aq).unwrap()[(0, 0)], 24.0);
    }

    #[test]
    fn rhs_pi_examples() {
        let s = spec(|c| {
            c.a_bar = scalar(1.0);
            c.b = scalar(0.6);
            c.b_bar = scalar(0.4);
            c.n3 = scalar(0.7);
            c.n3_bar = scalar(0.3);
        });
        assert!((rhs_pi(&m(2.0), &m(-4.0), 0.1, &s).unwrap()[(0, 0)] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn singular_factor_is_reported() {
        let s = spec(|c| c.c = scalar(1.0));
        let mut s = s;
        s.coeffs.n1 = scalar(1.0);
        match rhs_p(&m(-1.0), 0.25, &s) {
            Err(Error::Singular { s, .. }) => assert_eq!(s, 0.25),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_solution_is_exact() {
        let s = spec(|c| c.b = scalar(1.0));
        let grid = build_grid(&s.horizon, 1000).unwrap();
        let p = solve_p(&s, &grid).unwrap();
        for (i, &t) in grid.nodes().iter().enumerate() {
            assert!((p.at(i)[(0, 0)] - (1.0 - t)).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_problem() {
        let s = spec(|_| {});
        let grid = build_grid(&s.horizon, 10).unwrap();
        let pair = solve_riccati(&s, &grid).unwrap();
        assert!(pair.p.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert!(pair.pi.values().iter().all(|v| v[(0, 0)] == 0.0));
        assert_eq!(pair.max_residual_p, 0.0);
        assert_eq!(pair.max_residual_pi, 0.0);
    }
}
