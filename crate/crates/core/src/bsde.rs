//! Solvers for linear mean-field BSDEs with jumps, the forward adjoint
//! equation, and a Picard iteration for the coupled optimality system.
//!
//! Every backward equation here has the form
//!
//! `dX = [F X + F̄ E[X] + H Z + H̄ E[Z] + Σ_k ν_k (K_k R_k + K̄_k E[R_k]) + g] ds
//!       + Z dW + Σ_k R_k dÑ_k,   X(T) = ξ`
//!
//! and is stepped backward explicitly. One least-squares fit of `X_{i+1}`
//! on `b(x_i) ⊗ [1, ΔW_i, ΔÑ_1,i, .., ΔÑ_K,i]`, with `b` a polynomial basis
//! of the noise state at `s_i`, yields `X̂ = E[X_{i+1} | F_i]` from the first
//! block and `Z_i`, `R_k,i` as the loadings on the increments. Then
//! `X_i = X̂ - h · drift(X̂, Z_i, R_i)` with coefficients frozen at `s_i`.
//!
//! Fitting the loadings jointly keeps the residual at the size of the
//! discretization error. Regressing `(X_{i+1} - X̂) ΔÑ_k / (ν_k h)` alone
//! would carry a variance of order `1 / (ν_k h)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlProcess;
use crate::error::{Error, Result};
use crate::kernel::{empirical_mean, NoiseIncrements, PathEnsemble};
use crate::linalg::{checked_inverse, matvec_acc};
use crate::problem::{Coefficients, ProblemSpec, TerminalCondition, TimeGrid};
use crate::regression::Projector;
use crate::riccati::RiccatiPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsdeOptions {
    /// Total degree of the regression basis.
    pub basis_degree: usize,
}

impl Default for BsdeOptions {
    fn default() -> Self {
        Self { basis_degree: 2 }
    }
}

/// Coefficients of one backward step.
#[derive(Debug, Clone)]
pub(crate) struct Driver {
    pub f: DMatrix<f64>,
    pub f_bar: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_bar: DMatrix<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub k_bar: Vec<DMatrix<f64>>,
}

impl Driver {
    fn state(c: &Coefficients) -> Self {
        Self {
            f: c.a.clone(),
            f_bar: c.a_bar.clone(),
            h: c.c.clone(),
            h_bar: c.c_bar.clone(),
            k: c.d.clone(),
            k_bar: c.d_bar.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearSolution {
    pub x: PathEnsemble,
    pub z: PathEnsemble,
    pub r: Vec<PathEnsemble>,
    pub drift: PathEnsemble,
    pub basis_degraded: bool,
}

#[allow(clippy::too_many_arguments)]
fn drift(
    d: &Driver,
    nu: &[f64],
    x: &[f64],
    ex: &[f64],
    z: &[f64],
    ez: &[f64],
    r: &[f64],
    er: &[f64],
    g: &[f64],
    out: &mut [f64],
) {
    let n = out.len();
    out.copy_from_slice(g);
    matvec_acc(&d.f, x, 1.0, out);
    matvec_acc(&d.f_bar, ex, 1.0, out);
    matvec_acc(&d.h, z, 1.0, out);
    matvec_acc(&d.h_bar, ez, 1.0, out);
    for k in 0..nu.len() {
        matvec_acc(&d.k[k], &r[k * n..(k + 1) * n], nu[k], out);
        matvec_acc(&d.k_bar[k], &er[k * n..(k + 1) * n], nu[k], out);
    }
}

fn identical_rows(row: &[f64], dim: usize) -> bool {
    let first = &row[..dim];
    row.chunks(dim).all(|c| c == first)
}

/// `[W(s_i), Ñ(s_i), regressors(s_i)]` per particle.
fn features(noise: &NoiseIncrements, i: usize, regressors: Option<&PathEnsemble>) -> (Vec<f64>, usize) {
    let k = noise.marks();
    let d = regressors.map_or(0, |r| r.dim());
    let nv = 1 + k + d;
    let np = noise.particles();
    let w = noise.brownian(i);
    let nt = noise.compensated_path(i);
    let mut raw = vec![0.0; np * nv];
    for p in 0..np {
        let row = &mut raw[p * nv..(p + 1) * nv];
        row[0] = w[p];
        row[1..1 + k].copy_from_slice(&nt[p * k..(p + 1) * k]);
        if let Some(reg) = regressors {
            row[1 + k..].copy_from_slice(reg.particle(i, p));
        }
    }
    (raw, nv)
}

fn finite(row: &[f64], what: &str, s: f64) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { what: what.into(), s })
    }
}

/// Backward solve of a linear mean-field BSDE.
///
/// `forcing[i]` (for `i < M`) holds `g` per particle. When the terminal value
/// and the forcing are the same for every particle the solution is
/// deterministic: the mean recursion is run once with `Z = R = 0`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_linear(
    grid: &TimeGrid,
    drivers: &[Driver],
    nu: &[f64],
    terminal: Vec<f64>,
    forcing: Option<&[Vec<f64>]>,
    noise: &NoiseIncrements,
    regressors: Option<&PathEnsemble>,
    options: &BsdeOptions,
) -> Result<LinearSolution> {
    let steps = grid.steps();
    let np = noise.particles();
    let n = terminal.len() / np;
    let kk = nu.len();
    let h = grid.step();
    if noise.grid() != grid {
        return Err(Error::Dimension("noise lives on a different grid".into()));
    }
    if let Some(r) = regressors {
        if r.grid() != grid || r.particles() != np {
            return Err(Error::Dimension("regressors do not match the ensemble".into()));
        }
    }
    finite(&terminal, "terminal value", grid.t_end())?;

    let zero_n = vec![0.0; n];
    let deterministic =
        identical_rows(&terminal, n) && forcing.is_none_or(|f| f.iter().all(|row| identical_rows(row, n)));

    let mut x = PathEnsemble::zeros(grid, np, n);
    let mut z = PathEnsemble::zeros(grid, np, n);
    let mut r: Vec<PathEnsemble> = (0..kk).map(|_| PathEnsemble::zeros(grid, np, n)).collect();
    let mut dr = PathEnsemble::zeros(grid, np, n);
    let mut degraded = false;

    if deterministic {
        let mut cur = terminal[..n].to_vec();
        x.set_row(steps, terminal)?;
        let zeros_r = vec![0.0; n * kk];
        for i in (0..steps).rev() {
            let g = forcing.map_or(&zero_n[..], |f| &f[i][..n]);
            let mut a = vec![0.0; n];
            drift(
                &drivers[i],
                nu,
                &cur,
                &cur,
                &zero_n,
                &zero_n,
                &zeros_r,
                &zeros_r,
                g,
                &mut a,
            );
            for j in 0..n {
                cur[j] -= h * a[j];
            }
            finite(&cur, "backward solution", grid.node(i))?;
            x.set_row(i, cur.repeat(np))?;
            dr.set_row(i, a.repeat(np))?;
        }
        let last = dr.values(steps - 1).to_vec();
        dr.set_row(steps, last)?;
        return Ok(LinearSolution {
            x,
            z,
            r,
            drift: dr,
            basis_degraded: false,
        });
    }

    x.set_row(steps, terminal)?;
    for i in (0..steps).rev() {
        let (raw, nv) = features(noise, i, regressors);
        let tail = regressors.map_or(0, |r| r.dim());
        let dw = noise.dw(i);
        let mut incs = vec![0.0; np * (1 + kk)];
        for (p, row) in incs.chunks_mut(1 + kk).enumerate() {
            row[0] = dw[p];
            for k in 0..kk {
                row[1 + k] = noise.compensated(i, p, k);
            }
        }
        let proj = Projector::with_multipliers(&raw, nv, tail, np, options.basis_degree, &incs, 1 + kk)?;
        degraded |= proj.degraded();
        let mut blocks = proj.project_blocks(x.values(i + 1), n, 2 + kk).into_iter();
        let xhat = blocks.next().expect("value block");
        let zi = blocks.next().expect("Brownian block");
        let mut ri = vec![0.0; np * n * kk];
        for (k, rk) in blocks.enumerate() {
            for p in 0..np {
                ri[p * n * kk + k * n..p * n * kk + (k + 1) * n].copy_from_slice(&rk[p * n..(p + 1) * n]);
            }
        }
        let ex = empirical_mean(&xhat, n)?;
        let ez = empirical_mean(&zi, n)?;
        let er = empirical_mean(&ri, n * kk)?;

        let mut xi = vec![0.0; np * n];
        let mut di = vec![0.0; np * n];
        let d = &drivers[i];
        xi.par_chunks_mut(n)
            .zip(di.par_chunks_mut(n))
            .enumerate()
            .for_each(|(p, (xo, dout))| {
                let g = forcing.map_or(&zero_n[..], |f| &f[i][p * n..(p + 1) * n]);
                drift(
                    d,
                    nu,
                    &xhat[p * n..(p + 1) * n],
                    &ex,
                    &zi[p * n..(p + 1) * n],
                    &ez,
                    &ri[p * n * kk..(p + 1) * n * kk],
                    &er,
                    g,
                    dout,
                );
                for j in 0..n {
                    xo[j] = xhat[p * n + j] - h * dout[j];
                }
            });
        finite(&xi, "backward solution", grid.node(i))?;
        x.set_row(i, xi)?;
        dr.set_row(i, di)?;
        z.set_row(i, zi)?;
        for k in 0..kk {
            let row = (0..np)
                .flat_map(|p| ri[p * n * kk + k * n..p * n * kk + (k + 1) * n].iter().copied())
                .collect();
            r[k].set_row(i, row)?;
        }
    }
    // Interval quantities: pad the terminal slot with the last interval.
    let last = z.values(steps - 1).to_vec();
    z.set_row(steps, last)?;
    for rk in &mut r {
        let last = rk.values(steps - 1).to_vec();
        rk.set_row(steps, last)?;
    }
    let last = dr.values(steps - 1).to_vec();
    dr.set_row(steps, last)?;
    Ok(LinearSolution {
        x,
        z,
        r,
        drift: dr,
        basis_degraded: degraded,
    })
}

/// Realized terminal value per particle (`p * n + j`).
pub fn realize_terminal(terminal: &TerminalCondition, noise: &NoiseIncrements) -> Vec<f64> {
    let n = terminal.dim();
    let k = noise.marks();
    let steps = noise.grid().steps();
    let w = noise.brownian(steps);
    let nt = noise.compensated_path(steps);
    let mut out = vec![0.0; noise.particles() * n];
    for (p, o) in out.chunks_mut(n).enumerate() {
        terminal.evaluate(w[p], &nt[p * k..(p + 1) * k], o);
    }
    out
}

/// Solution `(Y, Z, R)` of the controlled state equation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateProcesses {
    pub y: PathEnsemble,
    /// Interval values; the terminal slot repeats the last interval.
    pub z: PathEnsemble,
    /// One ensemble per mark, interval-valued like `z`.
    pub r: Vec<PathEnsemble>,
    pub basis_degraded: bool,
}

/// Solves the state equation under control `u` with the problem's terminal
/// value, regressing on the control's Markov state when it has one.
pub fn solve_state_bsde(spec: &ProblemSpec, u: &ControlProcess, noise: &NoiseIncrements) -> Result<StateProcesses> {
    let xi = realize_terminal(&spec.terminal, noise);
    solve_state_bsde_with(spec, u, noise, &xi, u.regressors(), &BsdeOptions::default())
}

/// [`solve_state_bsde`] with an explicit terminal value, regression state and
/// options.
pub fn solve_state_bsde_with(
    spec: &ProblemSpec,
    u: &ControlProcess,
    noise: &NoiseIncrements,
    terminal: &[f64],
    regressors: Option<&PathEnsemble>,
    options: &BsdeOptions,
) -> Result<StateProcesses> {
    spec.check_dimensions()?;
    let grid = noise.grid();
    let np = noise.particles();
    let (n, m) = (spec.n, spec.m);
    if u.grid() != grid || u.dim() != m {
        return Err(Error::Dimension("control does not match the grid or m".into()));
    }
    if u.particles().is_some_and(|p| p != np) {
        return Err(Error::Dimension("control ensemble size differs from the noise".into()));
    }
    if terminal.len() != np * n {
        return Err(Error::Dimension("terminal value has the wrong length".into()));
    }
    if noise.marks() != spec.marks() {
        return Err(Error::Dimension("noise mark count differs from the problem".into()));
    }
    let mut drivers = Vec::with_capacity(grid.steps());
    let mut forcing = Vec::with_capacity(grid.steps());
    for i in 0..grid.steps() {
        let c = spec.coefficients_at(grid.node(i))?;
        let eu = u.mean(i);
        let mut mean_part = vec![0.0; n];
        matvec_acc(&c.b_bar, eu, 1.0, &mut mean_part);
        let mut row = vec![0.0; np * n];
        for (p, out) in row.chunks_mut(n).enumerate() {
            out.copy_from_slice(&mean_part);
            matvec_acc(&c.b, u.value(i, p), 1.0, out);
        }
        forcing.push(row);
        drivers.push(Driver::state(&c));
    }
    let sol = solve_linear(
        grid,
        &drivers,
        spec.jumps.weights(),
        terminal.to_vec(),
        Some(&forcing),
        noise,
        regressors,
        options,
    )?;
    Ok(StateProcesses {
        y: sol.x,
        z: sol.z,
        r: sol.r,
        basis_degraded: sol.basis_degraded,
    })
}

/// Which weights load the martingale parts of the adjoint equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointConvention {
    /// `N1 Z` and `N2 R` in the diffusion and jump loadings.
    #[default]
    Standard,
    /// `2 N1 Z` and `2 N2 R` instead, kept for side-by-side comparison.
    DoubledWeights,
}

impl AdjointConvention {
    fn factor(self) -> f64 {
        match self {
            AdjointConvention::Standard => 1.0,
            AdjointConvention::DoubledWeights => 2.0,
        }
    }
}

/// Node-frozen, pre-transposed coefficients of the adjoint equation.
pub(crate) struct AdjointStep {
    at: DMatrix<f64>,
    abt: DMatrix<f64>,
    ct: DMatrix<f64>,
    cbt: DMatrix<f64>,
    dt: Vec<DMatrix<f64>>,
    dbt: Vec<DMatrix<f64>>,
    q: DMatrix<f64>,
    qb: DMatrix<f64>,
    n1: DMatrix<f64>,
    n1b: DMatrix<f64>,
    n2: Vec<DMatrix<f64>>,
    n2b: Vec<DMatrix<f64>>,
}

/// Martingale and drift loadings of `dk` at one node, for one particle.
pub(crate) struct AdjointLoadings {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub jumps: Vec<f64>,
}

impl AdjointStep {
    pub fn new(c: &Coefficients, convention: AdjointConvention) -> Self {
        let f = convention.factor();
        Self {
            at: c.a.transpose(),
            abt: c.a_bar.transpose(),
            ct: c.c.transpose(),
            cbt: c.c_bar.transpose(),
            dt: c.d.iter().map(|d| d.transpose()).collect(),
            dbt: c.d_bar.iter().map(|d| d.transpose()).collect(),
            q: c.q.clone(),
            qb: c.q_bar.clone(),
            n1: &c.n1 * f,
            n1b: c.n1_bar.clone(),
            n2: c.n2.iter().map(|m| m * f).collect(),
            n2b: c.n2_bar.clone(),
        }
    }

    /// `dk = -drift ds - diffusion dW - Σ_k jumps_k dÑ_k`.
    #[allow(clippy::too_many_arguments)]
    pub fn loadings(
        &self,
        k: &[f64],
        ek: &[f64],
        y: &[f64],
        ey: &[f64],
        z: &[f64],
        ez: &[f64],
        r: &[f64],
        er: &[f64],
    ) -> AdjointLoadings {
        let n = k.len();
        let kk = self.dt.len();
        let mut drift = vec![0.0; n];
        matvec_acc(&self.at, k, 1.0, &mut drift);
        matvec_acc(&self.abt, ek, 1.0, &mut drift);
        matvec_acc(&self.q, y, 1.0, &mut drift);
        matvec_acc(&self.qb, ey, 1.0, &mut drift);
        let mut diffusion = vec![0.0; n];
        matvec_acc(&self.ct, k, 1.0, &mut diffusion);
        matvec_acc(&self.cbt, ek, 1.0, &mut diffusion);
        matvec_acc(&self.n1, z, 1.0, &mut diffusion);
        matvec_acc(&self.n1b, ez, 1.0, &mut diffusion);
        let mut jumps = vec![0.0; n * kk];
        for m in 0..kk {
            let out = &mut jumps[m * n..(m + 1) * n];
            matvec_acc(&self.dt[m], k, 1.0, out);
            matvec_acc(&self.dbt[m], ek, 1.0, out);
            matvec_acc(&self.n2[m], &r[m * n..(m + 1) * n], 1.0, out);
            matvec_acc(&self.n2b[m], &er[m * n..(m + 1) * n], 1.0, out);
        }
        AdjointLoadings {
            drift,
            diffusion,
            jumps,
        }
    }
}

/// One Euler-Maruyama step of the adjoint.
pub(crate) fn euler_adjoint(k: &[f64], l: &AdjointLoadings, h: f64, dw: f64, dn: &[f64], out: &mut [f64]) {
    let n = k.len();
    for j in 0..n {
        let mut v = k[j] - h * l.drift[j] - l.diffusion[j] * dw;
        for (m, d) in dn.iter().enumerate() {
            v -= l.jumps[m * n + j] * d;
        }
        out[j] = v;
    }
}

/// Gathers the per-mark rows of particle `p` into `p`-major layout.
pub(crate) fn marks_of(r: &[PathEnsemble], i: usize, p: usize, out: &mut [f64]) {
    for (m, rk) in r.iter().enumerate() {
        let n = rk.dim();
        out[m * n..(m + 1) * n].copy_from_slice(rk.particle(i, p));
    }
}

pub(crate) fn mark_means(r: &[PathEnsemble], i: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; r.len() * n];
    for (m, rk) in r.iter().enumerate() {
        out[m * n..(m + 1) * n].copy_from_slice(rk.mean(i));
    }
    out
}

/// The adjoint process of the stochastic maximum principle.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointProcess {
    pub k: PathEnsemble,
}

impl AdjointProcess {
    /// The adjoint value entering the interval `[s_i, s_{i+1})`, i.e. the
    /// node value at `s_i`, which is known at the start of the interval.
    pub fn k_left(&self, i: usize) -> &[f64] {
        self.k.values(i)
    }

    pub fn mean_left(&self, i: usize) -> &[f64] {
        self.k.mean(i)
    }
}

/// Forward Euler-Maruyama solve of the adjoint equation from
/// `k(t) = -G Y(t) - Ḡ E[Y(t)]`.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    state: &StateProcesses,
    noise: &NoiseIncrements,
    convention: AdjointConvention,
) -> Result<AdjointProcess> {
    let grid = noise.grid();
    let np = noise.particles();
    let n = spec.n;
    let kk = spec.marks();
    let h = grid.step();
    if state.y.grid() != grid || state.y.particles() != np {
        return Err(Error::Dimension("state and noise do not match".into()));
    }
    let mut k = PathEnsemble::zeros(grid, np, n);
    let ey0 = state.y.mean(0);
    let mut g_mean = vec![0.0; n];
    matvec_acc(&spec.coeffs.g_bar, ey0, -1.0, &mut g_mean);
    let mut row = vec![0.0; np * n];
    for (p, out) in row.chunks_mut(n).enumerate() {
        out.copy_from_slice(&g_mean);
        matvec_acc(&spec.coeffs.g, state.y.particle(0, p), -1.0, out);
    }
    k.set_row(0, row)?;

    for i in 0..grid.steps() {
        let c = spec.coefficients_at(grid.node(i))?;
        let step = AdjointStep::new(&c, convention);
        let ek = k.mean(i).to_vec();
        let (ey, ez) = (state.y.mean(i), state.z.mean(i));
        let er = mark_means(&state.r, i, n);
        let dw = noise.dw(i);
        let mut next = vec![0.0; np * n];
        let kprev = &k;
        next.par_chunks_mut(n).enumerate().for_each(|(p, out)| {
            let mut rp = vec![0.0; kk * n];
            marks_of(&state.r, i, p, &mut rp);
            let l = step.loadings(
                kprev.particle(i, p),
                &ek,
                state.y.particle(i, p),
                ey,
                state.z.particle(i, p),
                ez,
                &rp,
                &er,
            );
            let dn: Vec<f64> = (0..kk).map(|m| noise.compensated(i, p, m)).collect();
            euler_adjoint(kprev.particle(i, p), &l, h, dw[p], &dn, out);
        });
        finite(&next, "adjoint", grid.node(i + 1))?;
        k.set_row(i + 1, next)?;
    }
    Ok(AdjointProcess { k })
}

/// Solution `(φ, β, Φ)` of the auxiliary equation of the decoupling.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiSolution {
    pub phi: PathEnsemble,
    pub beta: PathEnsemble,
    /// One ensemble per mark.
    pub big_phi: Vec<PathEnsemble>,
    /// Drift of `φ` along the solution.
    pub alpha_drift: PathEnsemble,
    pub basis_degraded: bool,
}

impl PhiSolution {
    /// `η = φ - E[φ]` at node `i`.
    pub fn eta(&self, i: usize) -> Vec<f64> {
        self.phi.centered(i)
    }

    /// `γ = α - E[α]` at node `i`.
    pub fn gamma(&self, i: usize) -> Vec<f64> {
        self.alpha_drift.centered(i)
    }
}

/// Coefficients of the auxiliary equation at one node:
/// `F = A + PQ`, `F̄ = Ā + Π(Q+Q̄) - PQ`, `H = C (I+PN1)⁻¹`,
/// `H̄ = (C+C̄)(I+P(N1+N̄1))⁻¹ - H`, and likewise `K_k`, `K̄_k` from `D`, `N2`.
pub(crate) fn phi_driver(c: &Coefficients, p: &DMatrix<f64>, pi: &DMatrix<f64>, s: f64) -> Result<Driver> {
    let n = p.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let pq = p * &c.q;
    let h = &c.c * checked_inverse(&(&id + p * &c.n1), "P*N1+I", s)?;
    let h_sum = (&c.c + &c.c_bar) * checked_inverse(&(&id + p * (&c.n1 + &c.n1_bar)), "P*(N1+N1_bar)+I", s)?;
    let mut k = Vec::new();
    let mut k_bar = Vec::new();
    for m in 0..c.d.len() {
        let km = &c.d[m] * checked_inverse(&(&id + p * &c.n2[m]), &format!("P*N2[{m}]+I"), s)?;
        let ks = (&c.d[m] + &c.d_bar[m])
            * checked_inverse(
                &(&id + p * (&c.n2[m] + &c.n2_bar[m])),
                &format!("P*(N2+N2_bar)[{m}]+I"),
                s,
            )?;
        k_bar.push(ks - &km);
        k.push(km);
    }
    Ok(Driver {
        f: &c.a + &pq,
        f_bar: &c.a_bar + pi * (&c.q + &c.q_bar) - &pq,
        h_bar: h_sum - &h,
        h,
        k,
        k_bar,
    })
}

pub fn solve_phi(
    spec: &ProblemSpec,
    riccati: &RiccatiPair,
    noise: &NoiseIncrements,
    options: &BsdeOptions,
) -> Result<PhiSolution> {
    let grid = noise.grid();
    if riccati.p.grid() != grid {
        return Err(Error::Dimension("Riccati pair lives on a different grid".into()));
    }
    let drivers = (0..grid.steps())
        .map(|i| {
            let s = grid.node(i);
            phi_driver(&spec.coefficients_at(s)?, riccati.p.at(i), riccati.pi.at(i), s)
        })
        .collect::<Result<Vec<_>>>()?;
    let xi = realize_terminal(&spec.terminal, noise);
    let sol = solve_linear(grid, &drivers, spec.jumps.weights(), xi, None, noise, None, options)?;
    Ok(PhiSolution {
        phi: sol.x,
        beta: sol.z,
        big_phi: sol.r,
        alpha_drift: sol.drift,
        basis_degraded: sol.basis_degraded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub max_iter: usize,
    /// Stop once the relative sup-node RMS change of the adjoint is below.
    pub tol: f64,
    /// Weight `θ` of the new iterate.
    pub damping: f64,
    pub bsde: BsdeOptions,
    #[serde(default)]
    pub convention: AdjointConvention,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            max_iter: 30,
            tol: 1e-6,
            damping: 0.5,
            bsde: BsdeOptions::default(),
            convention: AdjointConvention::Standard,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardSolution {
    pub u: ControlProcess,
    pub state: StateProcesses,
    pub k: AdjointProcess,
    pub iterations: usize,
    /// Relative change of the adjoint per iteration.
    pub history: Vec<f64>,
    /// Whether the history decreased after the first iteration.
    pub monotone: bool,
}

/// Damped fixed-point iteration on the adjoint, starting from zero.
pub fn solve_hamilton_picard(
    spec: &ProblemSpec,
    noise: &NoiseIncrements,
    options: &PicardOptions,
) -> Result<PicardSolution> {
    let start = PathEnsemble::zeros(noise.grid(), noise.particles(), spec.n);
    solve_hamilton_picard_from(spec, noise, &start, options)
}

/// Damped fixed-point iteration on the adjoint: control from stationarity,
/// state from the backward solver, then the forward adjoint.
pub fn solve_hamilton_picard_from(
    spec: &ProblemSpec,
    noise: &NoiseIncrements,
    initial: &PathEnsemble,
    options: &PicardOptions,
) -> Result<PicardSolution> {
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "damping must lie in (0, 1], got {}",
            options.damping
        )));
    }
    let xi = realize_terminal(&spec.terminal, noise);
    let theta = options.damping;
    let mut current = initial.clone();
    let mut history = Vec::new();
    for j in 1..=options.max_iter {
        let u = ControlProcess::optimal_feedback(spec, &current)?;
        let state = solve_state_bsde_with(spec, &u, noise, &xi, Some(&current), &options.bsde)?;
        let k = solve_adjoint(spec, &state, noise, options.convention)?;
        let diff = k.k.sup_rms_distance(&current)?;
        let scale = k.k.sup_rms();
        let change = if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(f64::MIN_POSITIVE)
        };
        history.push(change);
        if change <= options.tol {
            let monotone = history.windows(2).skip(1).all(|w| w[1] <= w[0]);
            return Ok(PicardSolution {
                u,
                state,
                k,
                iterations: j,
                history,
                monotone,
            });
        }
        let rows = (0..current.nodes())
            .map(|i| {
                current
                    .values(i)
                    .iter()
                    .zip(k.k.values(i))
                    .map(|(a, b)| (1.0 - theta) * a + theta * b)
                    .collect()
            })
            .collect();
        current = PathEnsemble::from_rows(noise.grid(), noise.particles(), spec.n, rows)?;
    }
    Err(Error::NoConvergence {
        iterations: options.max_iter,
        last: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}
