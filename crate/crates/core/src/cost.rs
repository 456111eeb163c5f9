//! Quadratic cost on a grid and ensemble.
//!
//! `Y` terms use trapezoid weights over the nodes, `Z`, `R` and `u` terms
//! left-point weights over the intervals, and the `G` terms sit at the start
//! time. Every expectation is the empirical mean. The standard error is the
//! sample deviation of the per-particle influence (including the linearized
//! contribution of the mean-square terms) over `sqrt(N)`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bsde::StateProcesses;
use crate::control::ControlProcess;
use crate::error::{Error, Result};
use crate::kernel::empirical_mean;
use crate::linalg::quad_form;
use crate::problem::ProblemSpec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CostTerms {
    pub q: f64,
    pub q_bar: f64,
    pub n1: f64,
    pub n1_bar: f64,
    pub n2: f64,
    pub n2_bar: f64,
    pub n3: f64,
    pub n3_bar: f64,
    pub g: f64,
    pub g_bar: f64,
}

impl CostTerms {
    pub fn sum(&self) -> f64 {
        self.q
            + self.q_bar
            + self.n1
            + self.n1_bar
            + self.n2
            + self.n2_bar
            + self.n3
            + self.n3_bar
            + self.g
            + self.g_bar
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostValue {
    /// Sum of `terms`.
    pub total: f64,
    pub terms: CostTerms,
    /// The same cost assembled from centered processes and means.
    pub centered_total: f64,
    pub mc_standard_error: f64,
}

impl CostValue {
    /// Relative disagreement between the raw and the centered assembly.
    pub fn form_gap(&self) -> f64 {
        let d = (self.total - self.centered_total).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.total.abs().max(self.centered_total.abs())
        }
    }
}

/// One side of the bilinear form: a state and the control that produced it.
#[derive(Clone, Copy)]
pub struct Trajectory<'a> {
    pub state: &'a StateProcesses,
    pub u: &'a ControlProcess,
}

/// Accumulates `w ⟨M x_p, y_p⟩` and `w ⟨M̄ E x, E y⟩` with their centered
/// counterparts and per-particle influences.
struct Acc {
    particles: usize,
    influence: Vec<f64>,
    centered: f64,
}

impl Acc {
    /// `xs`, `ys` hold all particles (`p * d + j`). Returns the plain and
    /// barred contributions.
    #[allow(clippy::too_many_arguments)]
    fn pair(
        &mut self,
        w: f64,
        m: &DMatrix<f64>,
        m_bar: &DMatrix<f64>,
        xs: &[f64],
        ys: &[f64],
        ex: &[f64],
        ey: &[f64],
    ) -> (f64, f64) {
        if w == 0.0 {
            return (0.0, 0.0);
        }
        let np = self.particles;
        let d = ex.len();
        let mut plain = 0.0;
        let mut centered = 0.0;
        let mut cx = vec![0.0; d];
        let mut cy = vec![0.0; d];
        for p in 0..np {
            let (xp, yp) = (&xs[p * d..(p + 1) * d], &ys[p * d..(p + 1) * d]);
            let v = quad_form(m, xp, yp);
            plain += v;
            for j in 0..d {
                cx[j] = xp[j] - ex[j];
                cy[j] = yp[j] - ey[j];
            }
            centered += quad_form(m, &cx, &cy);
            self.influence[p] += w * (v + quad_form(m_bar, xp, ey) + quad_form(m_bar, ex, yp));
        }
        let plain = w * plain / np as f64;
        let barred = w * quad_form(m_bar, ex, ey);
        self.centered += w * centered / np as f64 + w * quad_form(&(m + m_bar), ex, ey);
        (plain, barred)
    }
}

fn check_layout(spec: &ProblemSpec, t: &Trajectory) -> Result<()> {
    let y = &t.state.y;
    if y.dim() != spec.n || t.u.dim() != spec.m || t.state.r.len() != spec.marks() {
        return Err(Error::Dimension("state or control has the wrong dimension".into()));
    }
    if t.u.grid() != y.grid() {
        return Err(Error::Dimension("state and control live on different grids".into()));
    }
    if t.u.particles().is_some_and(|p| p != y.particles()) {
        return Err(Error::Dimension("state and control ensembles differ in size".into()));
    }
    Ok(())
}

/// Symmetric bilinear form whose diagonal is the cost: `J(x) = B(x, x)`.
pub fn cost_bilinear(spec: &ProblemSpec, a: Trajectory, b: Trajectory) -> Result<CostValue> {
    check_layout(spec, &a)?;
    check_layout(spec, &b)?;
    let grid = a.state.y.grid().clone();
    if b.state.y.grid() != &grid || a.state.y.particles() != b.state.y.particles() {
        return Err(Error::Dimension("trajectories do not share a grid and ensemble".into()));
    }
    let np = a.state.y.particles();
    let node_w = grid.node_weights();
    let int_w = grid.interval_weights();
    let mut acc = Acc {
        particles: np,
        influence: vec![0.0; np],
        centered: 0.0,
    };
    let mut t = CostTerms::default();
    let nu = spec.jumps.weights();

    for (i, &s) in grid.nodes().iter().enumerate() {
        let c = spec.coefficients_at(s)?;
        let (ya, yb) = (&a.state.y, &b.state.y);
        let (q, qb) = acc.pair(
            node_w[i],
            &c.q,
            &c.q_bar,
            ya.values(i),
            yb.values(i),
            ya.mean(i),
            yb.mean(i),
        );
        t.q += q;
        t.q_bar += qb;

        let (za, zb) = (&a.state.z, &b.state.z);
        let (v, vb) = acc.pair(
            int_w[i],
            &c.n1,
            &c.n1_bar,
            za.values(i),
            zb.values(i),
            za.mean(i),
            zb.mean(i),
        );
        t.n1 += v;
        t.n1_bar += vb;

        for (k, &nuk) in nu.iter().enumerate() {
            let (ra, rb) = (&a.state.r[k], &b.state.r[k]);
            let (v, vb) = acc.pair(
                int_w[i] * nuk,
                &c.n2[k],
                &c.n2_bar[k],
                ra.values(i),
                rb.values(i),
                ra.mean(i),
                rb.mean(i),
            );
            t.n2 += v;
            t.n2_bar += vb;
        }

        if int_w[i] > 0.0 {
            let (ua, ub) = (a.u.row(i, np), b.u.row(i, np));
            let (v, vb) = acc.pair(int_w[i], &c.n3, &c.n3_bar, &ua, &ub, a.u.mean(i), b.u.mean(i));
            t.n3 += v;
            t.n3_bar += vb;
        }
    }
    let (ya, yb) = (&a.state.y, &b.state.y);
    let (g, gb) = acc.pair(
        1.0,
        &spec.coeffs.g,
        &spec.coeffs.g_bar,
        ya.values(0),
        yb.values(0),
        ya.mean(0),
        yb.mean(0),
    );
    t.g += g;
    t.g_bar += gb;

    let se = if np > 1 {
        let mean = empirical_mean(&acc.influence, 1)?[0];
        let var = acc.influence.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (np - 1) as f64;
        (var / np as f64).sqrt()
    } else {
        0.0
    };
    Ok(CostValue {
        total: t.sum(),
        terms: t,
        centered_total: acc.centered,
        mc_standard_error: se,
    })
}

/// Cost of a state/control pair.
pub fn evaluate_cost(spec: &ProblemSpec, state: &StateProcesses, u: &ControlProcess) -> Result<CostValue> {
    let t = Trajectory { state, u };
    cost_bilinear(spec, t, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(total: f64, centered_total: f64) -> CostValue {
        CostValue {
            total,
            terms: CostTerms::default(),
            centered_total,
            mc_standard_error: 0.0,
        }
    }

    #[test]
    fn form_gap_is_relative() {
        assert_eq!(value(0.0, 0.0).form_gap(), 0.0);
        assert_eq!(value(2.0, 2.0).form_gap(), 0.0);
        assert!((value(4.0, 3.0).form_gap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pair_splits_plain_and_barred_parts() {
        let m = DMatrix::from_element(1, 1, 2.0);
        let m_bar = DMatrix::from_element(1, 1, 1.0);
        let xs = [1.0, 3.0];
        let mut acc = Acc {
            particles: 2,
            influence: vec![0.0; 2],
            centered: 0.0,
        };
        let (plain, barred) = acc.pair(0.5, &m, &m_bar, &xs, &xs, &[2.0], &[2.0]);
        // 0.5 * 2 * (1 + 9) / 2 and 0.5 * 1 * 4.
        assert_eq!(plain, 5.0);
        assert_eq!(barred, 2.0);
        // Centered: 0.5 * 2 * (1 + 1) / 2 + 0.5 * 3 * 4.
        assert_eq!(acc.centered, 7.0);
        assert_eq!(acc.pair(0.0, &m, &m_bar, &xs, &xs, &[2.0], &[2.0]), (0.0, 0.0));
    }
}
