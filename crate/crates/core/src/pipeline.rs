//! The decoupled solution: Riccati pair, auxiliary equation, forward
//! adjoint and reconstruction of the optimal control and state.
//!
//! Along the optimum the state is tied to the adjoint through
//! `Y = P (k - E[k]) + Π E[k] + φ`. The martingale parts follow from the
//! same relation; for `Z`
//!
//! `Z = (I + P N1)⁻¹ (β - E[β] - P Cᵀ (k - E[k]))
//!    + (I + P (N1 + N̄1))⁻¹ (E[β] - P (C + C̄)ᵀ E[k])`
//!
//! and `R_k` is analogous with `Φ_k`, `D_k`, `N2_k`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{
    euler_adjoint, realize_terminal, solve_phi, solve_state_bsde_with, AdjointConvention, AdjointProcess, AdjointStep,
    BsdeOptions, PhiSolution, StateProcesses,
};
use crate::control::ControlProcess;
use crate::cost::{evaluate_cost, CostValue};
use crate::error::{Error, Result};
use crate::kernel::{empirical_mean, NoiseIncrements, PathEnsemble};
use crate::linalg::{checked_inverse, matvec, matvec_acc};
use crate::problem::{Coefficients, ProblemSpec};
use crate::riccati::{solve_riccati, RiccatiPair};
use crate::verify::{hamilton_defect, stationarity_residual, HamiltonResidual};

/// Node-frozen operators of the reconstruction.
struct NodeOps {
    coeffs: Coefficients,
    p: DMatrix<f64>,
    pi: DMatrix<f64>,
    f1: DMatrix<f64>,
    f1s: DMatrix<f64>,
    f2: Vec<DMatrix<f64>>,
    f2s: Vec<DMatrix<f64>>,
    pct: DMatrix<f64>,
    pcst: DMatrix<f64>,
    pdt: Vec<DMatrix<f64>>,
    pdst: Vec<DMatrix<f64>>,
    u_centered: DMatrix<f64>,
    u_mean: DMatrix<f64>,
}

impl NodeOps {
    fn new(spec: &ProblemSpec, riccati: &RiccatiPair, i: usize) -> Result<Self> {
        let grid = riccati.p.grid();
        let s = grid.node(i);
        let c = spec.coefficients_at(s)?;
        let n = spec.n;
        let id = DMatrix::<f64>::identity(n, n);
        let p = riccati.p.at(i).clone();
        let pi = riccati.pi.at(i).clone();
        let f1 = checked_inverse(&(&id + &p * &c.n1), "P*N1+I", s)?;
        let f1s = checked_inverse(&(&id + &p * (&c.n1 + &c.n1_bar)), "P*(N1+N1_bar)+I", s)?;
        let mut f2 = Vec::new();
        let mut f2s = Vec::new();
        let mut pdt = Vec::new();
        let mut pdst = Vec::new();
        for k in 0..spec.marks() {
            f2.push(checked_inverse(&(&id + &p * &c.n2[k]), &format!("P*N2[{k}]+I"), s)?);
            f2s.push(checked_inverse(
                &(&id + &p * (&c.n2[k] + &c.n2_bar[k])),
                &format!("P*(N2+N2_bar)[{k}]+I"),
                s,
            )?);
            pdt.push(&p * c.d[k].transpose());
            pdst.push(&p * (&c.d[k] + &c.d_bar[k]).transpose());
        }
        let u_centered = -checked_inverse(&c.n3, "N3", s)? * c.b.transpose();
        let u_mean = -checked_inverse(&(&c.n3 + &c.n3_bar), "N3+N3_bar", s)? * (&c.b + &c.b_bar).transpose();
        Ok(Self {
            pct: &p * c.c.transpose(),
            pcst: &p * (&c.c + &c.c_bar).transpose(),
            coeffs: c,
            p,
            pi,
            f1,
            f1s,
            f2,
            f2s,
            pdt,
            pdst,
            u_centered,
            u_mean,
        })
    }
}

/// Reconstructed values for one particle at one node.
struct Point {
    y: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
}

/// Reconstruction at node `i` for every particle, laid out per process.
struct Slice {
    y: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
}

fn reconstruct_node(ops: &NodeOps, phi: &PhiSolution, k: &[f64], ek: &[f64], i: usize, m: usize) -> Slice {
    let n = ek.len();
    let kk = ops.f2.len();
    let np = k.len() / n;
    let ebeta = phi.beta.mean(i);
    let ephi: Vec<&[f64]> = phi.big_phi.iter().map(|e| e.mean(i)).collect();

    // Mean parts are shared by all particles.
    let mut z_mean = ebeta.to_vec();
    matvec_acc(&ops.pcst, ek, -1.0, &mut z_mean);
    let mut tmp = vec![0.0; n];
    matvec(&ops.f1s, &z_mean, &mut tmp);
    let z_mean = tmp.clone();
    let mut r_mean = vec![0.0; kk * n];
    for m_ in 0..kk {
        let mut v = ephi[m_].to_vec();
        matvec_acc(&ops.pdst[m_], ek, -1.0, &mut v);
        matvec(&ops.f2s[m_], &v, &mut r_mean[m_ * n..(m_ + 1) * n]);
    }
    let mut y_mean = vec![0.0; n];
    matvec(&ops.pi, ek, &mut y_mean);
    let mut u_mean = vec![0.0; m];
    matvec(&ops.u_mean, ek, &mut u_mean);

    let points: Vec<Point> = (0..np)
        .into_par_iter()
        .map(|p| {
            let kt: Vec<f64> = (0..n).map(|j| k[p * n + j] - ek[j]).collect();
            let mut y = y_mean.clone();
            matvec_acc(&ops.p, &kt, 1.0, &mut y);
            for (j, v) in y.iter_mut().enumerate() {
                *v += phi.phi.particle(i, p)[j];
            }
            let bp = phi.beta.particle(i, p);
            let mut v: Vec<f64> = (0..n).map(|j| bp[j] - ebeta[j]).collect();
            matvec_acc(&ops.pct, &kt, -1.0, &mut v);
            let mut z = z_mean.clone();
            matvec_acc(&ops.f1, &v, 1.0, &mut z);
            let mut r = r_mean.clone();
            for m_ in 0..kk {
                let fp = phi.big_phi[m_].particle(i, p);
                let mut v: Vec<f64> = (0..n).map(|j| fp[j] - ephi[m_][j]).collect();
                matvec_acc(&ops.pdt[m_], &kt, -1.0, &mut v);
                matvec_acc(&ops.f2[m_], &v, 1.0, &mut r[m_ * n..(m_ + 1) * n]);
            }
            let mut u = u_mean.clone();
            matvec_acc(&ops.u_centered, &kt, 1.0, &mut u);
            Point { y, z, r, u }
        })
        .collect();
    let mut out = Slice {
        y: Vec::with_capacity(np * n),
        z: Vec::with_capacity(np * n),
        r: Vec::with_capacity(np * n * kk),
        u: Vec::with_capacity(np * m),
    };
    for pt in points {
        out.y.extend(pt.y);
        out.z.extend(pt.z);
        out.r.extend(pt.r);
        out.u.extend(pt.u);
    }
    out
}

fn initial_adjoint(spec: &ProblemSpec, riccati: &RiccatiPair, phi: &PhiSolution) -> Result<Vec<f64>> {
    let n = spec.n;
    let s = riccati.p.grid().t_start();
    let id = DMatrix::<f64>::identity(n, n);
    let g = &spec.coeffs.g;
    let gs = g + &spec.coeffs.g_bar;
    let centered_gain = -checked_inverse(&(&id + g * riccati.p.at(0)), "I+G*P", s)? * g;
    let mean_gain = -checked_inverse(&(&id + &gs * riccati.pi.at(0)), "I+(G+G_bar)*Pi", s)? * &gs;
    let ephi = phi.phi.mean(0);
    let mut mean = vec![0.0; n];
    matvec(&mean_gain, ephi, &mut mean);
    let eta = phi.eta(0);
    let np = phi.phi.particles();
    let mut row = vec![0.0; np * n];
    for (p, out) in row.chunks_mut(n).enumerate() {
        out.copy_from_slice(&mean);
        matvec_acc(&centered_gain, &eta[p * n..(p + 1) * n], 1.0, out);
    }
    Ok(row)
}

/// Forward solve of the adjoint along the decoupled optimum.
///
/// The start value comes from `k(t) = -G Y(t) - Ḡ E[Y(t)]` with the
/// decoupling relation substituted. Each Euler step evaluates the adjoint
/// loadings at the reconstructed `(Y, Z, R)`.
pub fn solve_k_forward(
    spec: &ProblemSpec,
    riccati: &RiccatiPair,
    phi: &PhiSolution,
    noise: &NoiseIncrements,
) -> Result<AdjointProcess> {
    let grid = noise.grid();
    if riccati.p.grid() != grid || phi.phi.grid() != grid {
        return Err(Error::Dimension("inputs live on different grids".into()));
    }
    let (n, m, kk) = (spec.n, spec.m, spec.marks());
    let np = noise.particles();
    let h = grid.step();
    let mut k = PathEnsemble::zeros(grid, np, n);
    k.set_row(0, initial_adjoint(spec, riccati, phi)?)?;
    for i in 0..grid.steps() {
        let ops = NodeOps::new(spec, riccati, i)?;
        let ek = k.mean(i).to_vec();
        let sl = reconstruct_node(&ops, phi, k.values(i), &ek, i, m);
        let ey = empirical_mean(&sl.y, n)?;
        let ez = empirical_mean(&sl.z, n)?;
        let er = empirical_mean(&sl.r, n * kk)?;
        let step = AdjointStep::new(&ops.coeffs, AdjointConvention::Standard);
        let dw = noise.dw(i);
        let kv = k.values(i);
        let mut next = vec![0.0; np * n];
        next.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
            let kp = &kv[p * n..(p + 1) * n];
            let l = step.loadings(
                kp,
                &ek,
                &sl.y[p * n..(p + 1) * n],
                &ey,
                &sl.z[p * n..(p + 1) * n],
                &ez,
                &sl.r[p * n * kk..(p + 1) * n * kk],
                &er,
            );
            let dn: Vec<f64> = (0..kk).map(|q| noise.compensated(i, p, q)).collect();
            euler_adjoint(kp, &l, h, dw[p], &dn, out);
        });
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                what: "adjoint".into(),
                s: grid.node(i + 1),
            });
        }
        k.set_row(i + 1, next)?;
    }
    Ok(AdjointProcess { k })
}

/// Optimal control (as feedback on `k`) and state from the decoupling
/// relations.
pub fn reconstruct_optimal(
    spec: &ProblemSpec,
    riccati: &RiccatiPair,
    phi: &PhiSolution,
    k: &AdjointProcess,
) -> Result<(ControlProcess, StateProcesses)> {
    let grid = k.k.grid();
    let (n, m, kk) = (spec.n, spec.m, spec.marks());
    let np = k.k.particles();
    let mut y = PathEnsemble::zeros(grid, np, n);
    let mut z = PathEnsemble::zeros(grid, np, n);
    let mut r: Vec<PathEnsemble> = (0..kk).map(|_| PathEnsemble::zeros(grid, np, n)).collect();
    let mut u = PathEnsemble::zeros(grid, np, m);
    for i in 0..=grid.steps() {
        let ops = NodeOps::new(spec, riccati, i)?;
        let sl = reconstruct_node(&ops, phi, k.k.values(i), k.k.mean(i), i, m);
        y.set_row(i, sl.y)?;
        z.set_row(i, sl.z)?;
        for (q, rq) in r.iter_mut().enumerate() {
            let row = (0..np)
                .flat_map(|p| sl.r[p * n * kk + q * n..p * n * kk + (q + 1) * n].iter().copied())
                .collect();
            rq.set_row(i, row)?;
        }
        u.set_row(i, sl.u)?;
    }
    Ok((
        ControlProcess::Feedback {
            values: u,
            state: k.k.clone(),
        },
        StateProcesses {
            y,
            z,
            r,
            basis_degraded: phi.basis_degraded,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Relative stationarity defect of the reconstructed control against its
    /// own adjoint.
    pub stationarity_residual: f64,
    pub hamilton_residual: HamiltonResidual,
    /// `max_p |Y_p(T) - ξ_p|`.
    pub terminal_error: f64,
    /// `max |Y - P (k - E[k]) - Π E[k] - φ|` over nodes and particles.
    pub decoupling_error: f64,
    pub basis_degraded: bool,
}

#[derive(Debug, Clone)]
pub struct DecoupledSolution {
    pub riccati: RiccatiPair,
    pub phi: PhiSolution,
    pub k: AdjointProcess,
    pub u: ControlProcess,
    /// Reconstructed state.
    pub state: StateProcesses,
    /// Cost of the reconstructed state and control.
    pub cost: CostValue,
    /// State re-solved from the control with the backward solver, and its
    /// cost. Present when requested in the options.
    pub simulated: Option<(StateProcesses, CostValue)>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoupledOptions {
    pub bsde: BsdeOptions,
    /// Re-solve the state equation under the reconstructed control.
    pub simulate_state: bool,
}

impl Default for DecoupledOptions {
    fn default() -> Self {
        Self {
            bsde: BsdeOptions::default(),
            simulate_state: true,
        }
    }
}

/// Runs the whole pipeline on one noise realization.
pub fn solve_decoupled(
    spec: &ProblemSpec,
    noise: &NoiseIncrements,
    options: &DecoupledOptions,
) -> Result<DecoupledSolution> {
    spec.check_dimensions()?;
    let grid = noise.grid();
    let riccati = solve_riccati(spec, grid)?;
    let phi = solve_phi(spec, &riccati, noise, &options.bsde)?;
    let k = solve_k_forward(spec, &riccati, &phi, noise)?;
    let (u, state) = reconstruct_optimal(spec, &riccati, &phi, &k)?;
    let cost = evaluate_cost(spec, &state, &u)?;

    let xi = realize_terminal(&spec.terminal, noise);
    let last = grid.steps();
    let terminal_error = state
        .y
        .values(last)
        .iter()
        .zip(&xi)
        .fold(0.0f64, |a, (y, x)| a.max((y - x).abs()));
    let mut decoupling_error = 0.0f64;
    for i in 0..=last {
        let ek = k.k.mean(i);
        for p in 0..noise.particles() {
            let kt: Vec<f64> = k.k.particle(i, p).iter().zip(ek).map(|(a, b)| a - b).collect();
            let mut y = phi.phi.particle(i, p).to_vec();
            matvec_acc(riccati.p.at(i), &kt, 1.0, &mut y);
            matvec_acc(riccati.pi.at(i), ek, 1.0, &mut y);
            for (a, b) in y.iter().zip(state.y.particle(i, p)) {
                decoupling_error = decoupling_error.max((a - b).abs());
            }
        }
    }
    let stationarity = stationarity_residual(spec, &u, &k)?;
    let hamilton = hamilton_defect(spec, &state, &u, &k, noise, AdjointConvention::Standard)?;
    let simulated = if options.simulate_state {
        let sim = solve_state_bsde_with(spec, &u, noise, &xi, u.regressors(), &options.bsde)?;
        let c = evaluate_cost(spec, &sim, &u)?;
        Some((sim, c))
    } else {
        None
    };
    let basis_degraded = phi.basis_degraded;
    Ok(DecoupledSolution {
        riccati,
        phi,
        k,
        u,
        state,
        cost,
        simulated,
        diagnostics: Diagnostics {
            stationarity_residual: stationarity,
            hamilton_residual: hamilton,
            terminal_error,
            decoupling_error,
            basis_degraded,
        },
    })
}
