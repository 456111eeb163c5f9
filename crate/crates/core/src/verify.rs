//! Optimality checks for a computed control: the stationarity defect, the
//! one-step defect of the Hamilton system, the Gâteaux derivative of the
//! cost, and a probe-based verification report.
//!
//! All cost comparisons use common random numbers and a common regression
//! state, which makes the discrete control-to-state map exactly linear; the
//! cost is then exactly quadratic along every probe direction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{
    euler_adjoint, mark_means, marks_of, realize_terminal, solve_adjoint, solve_state_bsde_with, AdjointConvention,
    AdjointProcess, AdjointStep, BsdeOptions, StateProcesses,
};
use crate::control::ControlProcess;
use crate::cost::{cost_bilinear, evaluate_cost, CostValue, Trajectory};
use crate::error::{Error, Result};
use crate::kernel::{empirical_mean, NoiseIncrements, PathEnsemble};
use crate::linalg::{dot, matvec_acc};
use crate::pipeline::DecoupledSolution;
use crate::problem::{validate_assumptions, ProblemSpec};

/// `sqrt(Σ_{i<M} h mean_p |N3 u + N̄3 E[u] + Bᵀ k + B̄ᵀ E[k]|²)`, relative to
/// the norm of `u` unless `u` vanishes.
pub fn stationarity_residual(spec: &ProblemSpec, u: &ControlProcess, k: &AdjointProcess) -> Result<f64> {
    let grid = k.k.grid();
    if u.grid() != grid || u.dim() != spec.m || k.k.dim() != spec.n {
        return Err(Error::Dimension("control and adjoint do not match".into()));
    }
    let np = k.k.particles();
    if u.particles().is_some_and(|p| p != np) {
        return Err(Error::Dimension("control and adjoint ensembles differ".into()));
    }
    let m = spec.m;
    let h = grid.step();
    let mut total = 0.0;
    for i in 0..grid.steps() {
        let c = spec.coefficients_at(grid.node(i))?;
        let bt = c.b.transpose();
        let mut shared = vec![0.0; m];
        matvec_acc(&c.n3_bar, u.mean(i), 1.0, &mut shared);
        matvec_acc(&c.b_bar.transpose(), k.mean_left(i), 1.0, &mut shared);
        let row = u.row(i, np);
        let kl = k.k_left(i);
        let n = spec.n;
        let sq: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut v = shared.clone();
                matvec_acc(&c.n3, &row[p * m..(p + 1) * m], 1.0, &mut v);
                matvec_acc(&bt, &kl[p * n..(p + 1) * n], 1.0, &mut v);
                dot(&v, &v)
            })
            .collect();
        total += h * empirical_mean(&sq, 1)?[0];
    }
    let defect = total.sqrt();
    let norm = u.l2_norm();
    Ok(if norm > f64::MIN_POSITIVE.sqrt() {
        defect / norm
    } else {
        defect
    })
}

/// One-step Euler defects of the state and adjoint equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HamiltonResidual {
    pub state: f64,
    pub adjoint: f64,
}

impl HamiltonResidual {
    pub fn max(&self) -> f64 {
        self.state.max(self.adjoint)
    }
}

/// Sup over intervals of the ensemble RMS of the one-step explicit Euler
/// defect of each equation, relative to `max(1, sup |Y|, sup |k|)`.
pub fn hamilton_defect(
    spec: &ProblemSpec,
    state: &StateProcesses,
    u: &ControlProcess,
    k: &AdjointProcess,
    noise: &NoiseIncrements,
    convention: AdjointConvention,
) -> Result<HamiltonResidual> {
    let grid = noise.grid();
    let np = noise.particles();
    let (n, m, kk) = (spec.n, spec.m, spec.marks());
    if state.y.grid() != grid || k.k.grid() != grid || u.grid() != grid {
        return Err(Error::Dimension("processes live on different grids".into()));
    }
    if state.y.particles() != np || k.k.particles() != np {
        return Err(Error::Dimension("processes and noise differ in ensemble size".into()));
    }
    let h = grid.step();
    let nu = spec.jumps.weights();
    let mut worst_y = 0.0f64;
    let mut worst_k = 0.0f64;
    for i in 0..grid.steps() {
        let c = spec.coefficients_at(grid.node(i))?;
        let step = AdjointStep::new(&c, convention);
        let (ey, ez) = (state.y.mean(i), state.z.mean(i));
        let er = mark_means(&state.r, i, n);
        let ek = k.mean_left(i);
        let eu = u.mean(i);
        let urow = u.row(i, np);
        let dw = noise.dw(i);
        let sq: Vec<(f64, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut rp = vec![0.0; n * kk];
                marks_of(&state.r, i, p, &mut rp);
                let dn: Vec<f64> = (0..kk).map(|q| noise.compensated(i, p, q)).collect();
                let (y, z) = (state.y.particle(i, p), state.z.particle(i, p));

                let mut drift = vec![0.0; n];
                matvec_acc(&c.a, y, 1.0, &mut drift);
                matvec_acc(&c.a_bar, ey, 1.0, &mut drift);
                matvec_acc(&c.b, &urow[p * m..(p + 1) * m], 1.0, &mut drift);
                matvec_acc(&c.b_bar, eu, 1.0, &mut drift);
                matvec_acc(&c.c, z, 1.0, &mut drift);
                matvec_acc(&c.c_bar, ez, 1.0, &mut drift);
                for q in 0..kk {
                    matvec_acc(&c.d[q], &rp[q * n..(q + 1) * n], nu[q], &mut drift);
                    matvec_acc(&c.d_bar[q], &er[q * n..(q + 1) * n], nu[q], &mut drift);
                }
                let y_next = state.y.particle(i + 1, p);
                let mut dy = 0.0;
                for j in 0..n {
                    let mut v = y_next[j] - y[j] - h * drift[j] - z[j] * dw[p];
                    for q in 0..kk {
                        v -= rp[q * n + j] * dn[q];
                    }
                    dy += v * v;
                }

                let kp = k.k.particle(i, p);
                let l = step.loadings(kp, ek, y, ey, z, ez, &rp, &er);
                let mut predicted = vec![0.0; n];
                euler_adjoint(kp, &l, h, dw[p], &dn, &mut predicted);
                let k_next = k.k.particle(i + 1, p);
                let dk: f64 = (0..n).map(|j| (k_next[j] - predicted[j]).powi(2)).sum();
                (dy, dk)
            })
            .collect();
        let (ys, ks): (Vec<f64>, Vec<f64>) = sq.into_iter().unzip();
        worst_y = worst_y.max(empirical_mean(&ys, 1)?[0].sqrt());
        worst_k = worst_k.max(empirical_mean(&ks, 1)?[0].sqrt());
    }
    let scale = 1f64.max(state.y.sup_rms()).max(k.k.sup_rms());
    Ok(HamiltonResidual {
        state: worst_y / scale,
        adjoint: worst_k / scale,
    })
}

/// [`hamilton_defect`] along a decoupled solution.
pub fn hamilton_residual(
    spec: &ProblemSpec,
    solution: &DecoupledSolution,
    noise: &NoiseIncrements,
    convention: AdjointConvention,
) -> Result<HamiltonResidual> {
    hamilton_defect(spec, &solution.state, &solution.u, &solution.k, noise, convention)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMethod {
    /// `2 E ∫ ⟨N3 u + N̄3 E[u] + Bᵀ k + B̄ᵀ E[k], v⟩ ds` with the adjoint of `u`.
    AdjointRepresentation,
    /// Twice the cost bilinear form between the state of `u` and the state
    /// driven by `v` from a zero terminal value.
    Direct,
    /// Central difference of the cost with unit step, exact for a quadratic.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxDerivative {
    pub value: f64,
    pub via: DerivativeMethod,
}

/// Everything shared by the cost evaluations of one verification run.
pub struct CostContext<'a> {
    pub spec: &'a ProblemSpec,
    pub noise: &'a NoiseIncrements,
    /// Regression state for every backward solve.
    pub regressors: Option<&'a PathEnsemble>,
    pub options: BsdeOptions,
    xi: Vec<f64>,
    zero: Vec<f64>,
}

impl<'a> CostContext<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        noise: &'a NoiseIncrements,
        regressors: Option<&'a PathEnsemble>,
        options: BsdeOptions,
    ) -> Self {
        Self {
            spec,
            noise,
            regressors,
            options,
            xi: realize_terminal(&spec.terminal, noise),
            zero: vec![0.0; noise.particles() * spec.n],
        }
    }

    /// State under `u` with the problem's terminal value, or from zero.
    pub fn state(&self, u: &ControlProcess, zero_terminal: bool) -> Result<StateProcesses> {
        let terminal = if zero_terminal { &self.zero } else { &self.xi };
        solve_state_bsde_with(self.spec, u, self.noise, terminal, self.regressors, &self.options)
    }

    pub fn cost(&self, u: &ControlProcess, zero_terminal: bool) -> Result<CostValue> {
        evaluate_cost(self.spec, &self.state(u, zero_terminal)?, u)
    }

    pub fn gateaux(&self, u: &ControlProcess, v: &ControlProcess, via: DerivativeMethod) -> Result<GateauxDerivative> {
        let value = match via {
            DerivativeMethod::AdjointRepresentation => {
                let state = self.state(u, false)?;
                let k = solve_adjoint(self.spec, &state, self.noise, AdjointConvention::Standard)?;
                adjoint_pairing(self.spec, u, &k, v)?
            }
            DerivativeMethod::Direct => {
                let xu = self.state(u, false)?;
                let xv = self.state(v, true)?;
                2.0 * cost_bilinear(self.spec, Trajectory { state: &xu, u }, Trajectory { state: &xv, u: v })?.total
            }
            DerivativeMethod::FiniteDifference => {
                let plus = self.cost(&u.combine(1.0, v, 1.0)?, false)?.total;
                let minus = self.cost(&u.combine(1.0, v, -1.0)?, false)?.total;
                0.5 * (plus - minus)
            }
        };
        Ok(GateauxDerivative { value, via })
    }
}

/// `2 Σ_{i<M} h mean_p ⟨N3 u + N̄3 E[u] + Bᵀ k + B̄ᵀ E[k], v⟩`.
fn adjoint_pairing(spec: &ProblemSpec, u: &ControlProcess, k: &AdjointProcess, v: &ControlProcess) -> Result<f64> {
    let grid = k.k.grid();
    let (n, m) = (spec.n, spec.m);
    let np = k.k.particles();
    let h = grid.step();
    let mut total = 0.0;
    for i in 0..grid.steps() {
        let c = spec.coefficients_at(grid.node(i))?;
        let bt = c.b.transpose();
        let mut shared = vec![0.0; m];
        matvec_acc(&c.n3_bar, u.mean(i), 1.0, &mut shared);
        matvec_acc(&c.b_bar.transpose(), k.mean_left(i), 1.0, &mut shared);
        let (ur, vr, kl) = (u.row(i, np), v.row(i, np), k.k_left(i));
        let terms: Vec<f64> = (0..np)
            .map(|p| {
                let mut g = shared.clone();
                matvec_acc(&c.n3, &ur[p * m..(p + 1) * m], 1.0, &mut g);
                matvec_acc(&bt, &kl[p * n..(p + 1) * n], 1.0, &mut g);
                dot(&g, &vr[p * m..(p + 1) * m])
            })
            .collect();
        total += 2.0 * h * empirical_mean(&terms, 1)?[0];
    }
    Ok(total)
}

/// Directional derivative of the cost at `u` along `v`, regressing on the
/// Markov state of `u` (or of `v`).
pub fn gateaux_derivative(
    spec: &ProblemSpec,
    u: &ControlProcess,
    v: &ControlProcess,
    noise: &NoiseIncrements,
    via: DerivativeMethod,
    options: &BsdeOptions,
) -> Result<GateauxDerivative> {
    let ctx = CostContext::new(spec, noise, u.regressors().or(v.regressors()), *options);
    ctx.gateaux(u, v, via)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub probes: usize,
    pub coercivity_samples: usize,
    pub epsilons: Vec<f64>,
    pub seed: u64,
    /// Multiple of the Monte Carlo standard error allowed as slack.
    pub se_multiplier: f64,
    /// Absolute floor of the parabola tolerance.
    pub parabola_floor: f64,
    /// Discretization allowance for the fitted vertex along `u*`.
    pub vertex_floor: f64,
    /// Derivative used in the parabola identity.
    pub parabola_delta: DerivativeMethod,
    pub bsde: BsdeOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            probes: 20,
            coercivity_samples: 20,
            epsilons: vec![-1.0, -0.1, 0.1, 1.0],
            seed: 0,
            se_multiplier: 4.0,
            parabola_floor: 1e-8,
            vertex_floor: 0.05,
            parabola_delta: DerivativeMethod::AdjointRepresentation,
            bsde: BsdeOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Random smooth function of time.
    Deterministic,
    /// Random affine feedback on the optimal adjoint.
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbedCost {
    pub epsilon: f64,
    pub cost: f64,
    /// `J(u* + εv) - J(u*) + 4 se`; nonnegative when the check passes.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub index: usize,
    pub kind: ProbeKind,
    pub seed: u64,
    pub norm: f64,
    /// Cost of the probe alone from a zero terminal value.
    pub zero_terminal_cost: f64,
    /// Derivative through the adjoint representation.
    pub delta_adjoint: f64,
    /// Derivative through the cost bilinear form, exact for the discrete cost.
    pub delta_direct: f64,
    pub perturbed: Vec<PerturbedCost>,
    pub descent_pass: bool,
    /// `|J(u* + v) - J(u*) - J(0; v) - Δ|` with the configured `Δ`.
    pub parabola_gap: f64,
    /// The same gap with the other derivative.
    pub parabola_gap_alternate: f64,
    pub parabola_tolerance: f64,
    pub parabola_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivitySample {
    pub index: usize,
    pub kind: ProbeKind,
    pub seed: u64,
    pub norm_squared: f64,
    pub cost: f64,
    /// `J - δ |u|² + 4 se`.
    pub margin: f64,
    pub pass: bool,
}

/// Three-point fit of `ε ↦ J(u* + ε u*)` at `ε ∈ {-1, 0, 1}`.
///
/// The vertex passes when it lies within the discretization floor, or when
/// the cost decrease it promises, `curvature * vertex² / 2`, is within the
/// Monte Carlo slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VertexFit {
    pub vertex: f64,
    pub curvature: f64,
    /// `2 J(0; u*)` from a zero-terminal solve.
    pub expected_curvature: f64,
    pub curvature_relative_error: f64,
    /// `max(floor, sqrt(2 * slack / curvature))`.
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub optimal_cost: f64,
    pub mc_standard_error: f64,
    pub coercivity_constant: f64,
    pub probes: Vec<ProbeResult>,
    pub coercivity: Vec<CoercivitySample>,
    pub vertex: Option<VertexFit>,
    pub descent_pass: bool,
    pub parabola_pass: bool,
    pub coercivity_pass: bool,
    pub passed: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A random probe with unit `L²` norm.
fn random_control(kind: ProbeKind, seed: u64, spec: &ProblemSpec, kstar: &PathEnsemble) -> Result<ControlProcess> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = kstar.grid();
    let m = spec.m;
    let v = match kind {
        ProbeKind::Deterministic => {
            let modes: Vec<(f64, f64, f64)> = (0..3 * m)
                .map(|j| {
                    let freq = (j / m + 1) as f64;
                    (
                        normal(&mut rng) / freq,
                        freq,
                        rng.random::<f64>() * std::f64::consts::TAU,
                    )
                })
                .collect();
            let (t0, len) = (grid.t_start(), grid.t_end() - grid.t_start());
            ControlProcess::from_fn(grid, |s| {
                let x = std::f64::consts::PI * (s - t0) / len;
                (0..m)
                    .map(|c| {
                        modes
                            .iter()
                            .skip(c)
                            .step_by(m)
                            .map(|(a, f, ph)| a * (f * x + ph).cos())
                            .sum()
                    })
                    .collect()
            })?
        }
        ProbeKind::Feedback => {
            let n = spec.n;
            let scale = 1.0 / kstar.sup_rms().max(1e-12);
            let gain = DMatrix::from_fn(m, n, |_, _| normal(&mut rng) * scale);
            let offset: Vec<f64> = (0..m).map(|_| 0.5 * normal(&mut rng)).collect();
            let nodes = grid.steps() + 1;
            ControlProcess::linear_feedback(kstar, &vec![gain; nodes], &vec![offset; nodes])?
        }
    };
    let norm = v.l2_norm();
    if norm == 0.0 {
        return Ok(v);
    }
    v.scaled(1.0 / norm)
}

fn kind_of(index: usize) -> ProbeKind {
    if index.is_multiple_of(2) {
        ProbeKind::Deterministic
    } else {
        ProbeKind::Feedback
    }
}

/// Probe-based optimality report for a decoupled solution.
///
/// Along every probe `v` the costs `J(u* + εv)` are compared with `J(u*)`,
/// the exact quadratic expansion `J(u* + v) = J(u*) + J(0; v) + Δ` is checked
/// with `Δ` the directional derivative, and random controls are tested
/// against the coercivity bound `J(u) ≥ δ |u|²`.
pub fn verify_optimality(
    spec: &ProblemSpec,
    solution: &DecoupledSolution,
    noise: &NoiseIncrements,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    let grid = noise.grid();
    let kstar = &solution.k.k;
    let ustar = &solution.u;
    let ctx = CostContext::new(spec, noise, Some(kstar), options.bsde);
    let xstar = ctx.state(ustar, false)?;
    let jstar = evaluate_cost(spec, &xstar, ustar)?;
    let kadj = solve_adjoint(spec, &xstar, noise, AdjointConvention::Standard)?;
    let slack = options.se_multiplier * jstar.mc_standard_error;
    let delta_coercive = validate_assumptions(spec, grid)?.delta;
    let scale = ustar.l2_norm().max(1.0);

    let mut master = ChaCha8Rng::seed_from_u64(options.seed);
    let probe_seeds: Vec<u64> = (0..options.probes).map(|_| master.random()).collect();
    let sample_seeds: Vec<u64> = (0..options.coercivity_samples).map(|_| master.random()).collect();
    let sample_scales: Vec<f64> = (0..options.coercivity_samples)
        .map(|_| scale * (0.1 + 2.9 * master.random::<f64>()))
        .collect();

    let probes = probe_seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| -> Result<ProbeResult> {
            let kind = kind_of(index);
            let v = random_control(kind, seed, spec, kstar)?.scaled(scale)?;
            let xv = ctx.state(&v, true)?;
            let jv = evaluate_cost(spec, &xv, &v)?.total;
            let delta_direct = 2.0
                * cost_bilinear(
                    spec,
                    Trajectory {
                        state: &xstar,
                        u: ustar,
                    },
                    Trajectory { state: &xv, u: &v },
                )?
                .total;
            let delta_adjoint = adjoint_pairing(spec, ustar, &kadj, &v)?;
            let mut perturbed = Vec::new();
            let mut unit = None;
            for &eps in &options.epsilons {
                let c = ctx.cost(&ustar.combine(1.0, &v, eps)?, false)?;
                if eps == 1.0 {
                    unit = Some(c);
                }
                perturbed.push(PerturbedCost {
                    epsilon: eps,
                    cost: c.total,
                    margin: c.total - jstar.total + slack,
                });
            }
            let unit = match unit {
                Some(c) => c,
                None => ctx.cost(&ustar.combine(1.0, &v, 1.0)?, false)?,
            };
            let gap = |d: f64| (unit.total - jstar.total - jv - d).abs();
            let (parabola_gap, parabola_gap_alternate) = match options.parabola_delta {
                DerivativeMethod::Direct => (gap(delta_direct), gap(delta_adjoint)),
                _ => (gap(delta_adjoint), gap(delta_direct)),
            };
            let parabola_tolerance = options
                .parabola_floor
                .max(options.se_multiplier * jstar.mc_standard_error.max(unit.mc_standard_error));
            Ok(ProbeResult {
                index,
                kind,
                seed,
                norm: v.l2_norm(),
                zero_terminal_cost: jv,
                delta_adjoint,
                delta_direct,
                descent_pass: perturbed.iter().all(|p| p.margin >= 0.0),
                perturbed,
                parabola_gap,
                parabola_gap_alternate,
                parabola_tolerance,
                parabola_pass: parabola_gap <= parabola_tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let coercivity = sample_seeds
        .par_iter()
        .zip(&sample_scales)
        .enumerate()
        .map(|(index, (&seed, &amp))| -> Result<CoercivitySample> {
            let kind = kind_of(index);
            let u = random_control(kind, seed, spec, kstar)?.scaled(amp)?;
            let c = ctx.cost(&u, false)?;
            let norm_squared = u.l2_norm().powi(2);
            let margin = c.total - delta_coercive * norm_squared + options.se_multiplier * c.mc_standard_error;
            Ok(CoercivitySample {
                index,
                kind,
                seed,
                norm_squared,
                cost: c.total,
                margin,
                pass: margin >= 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let vertex = if ustar.l2_norm() > 0.0 {
        let up = ctx.cost(&ustar.scaled(2.0)?, false)?.total;
        let down = ctx.cost(&ustar.scaled(0.0)?, false)?.total;
        let curvature = up + down - 2.0 * jstar.total;
        let slope = 0.5 * (up - down);
        let vertex = -slope / curvature;
        let expected = 2.0 * ctx.cost(ustar, true)?.total;
        let tolerance = options.vertex_floor.max((2.0 * slack / curvature.abs()).sqrt());
        Some(VertexFit {
            vertex,
            curvature,
            expected_curvature: expected,
            curvature_relative_error: (curvature - expected).abs() / expected.abs().max(f64::MIN_POSITIVE),
            tolerance,
            pass: curvature > 0.0 && vertex.abs() <= tolerance,
        })
    } else {
        None
    };

    let descent_pass = probes.iter().all(|p| p.descent_pass);
    let parabola_pass = probes.iter().all(|p| p.parabola_pass);
    let coercivity_pass = coercivity.iter().all(|s| s.pass);
    let vertex_pass = vertex.is_none_or(|v| v.pass);
    Ok(VerificationReport {
        seed: options.seed,
        optimal_cost: jstar.total,
        mc_standard_error: jstar.mc_standard_error,
        coercivity_constant: delta_coercive,
        probes,
        coercivity,
        vertex,
        descent_pass,
        parabola_pass,
        coercivity_pass,
        passed: descent_pass && parabola_pass && coercivity_pass && vertex_pass,
    })
}
