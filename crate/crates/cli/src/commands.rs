use std::fmt::Write as _;
use std::path::Path;

use mflq_core::bsde::{solve_hamilton_picard, PicardSolution};
use mflq_core::export::{export_solution, RunMeta};
use mflq_core::kernel::write_noise;
use mflq_core::riccati::{riccati_residual, write_riccati_csv};
use mflq_core::verify::hamilton_residual;
use mflq_core::{
    brute_force_lq_oracle, build_grid, generate_noise, parse_spec, solve_decoupled, solve_riccati,
    validate_assumptions, verify_optimality, AdjointConvention, AssumptionReport, BsdeOptions, DecoupledOptions,
    DecoupledSolution, Error, NoiseIncrements, PicardOptions, ProblemSpec, TimeGrid, VerifyOptions, Violation,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{Command, RunConfig};

/// Why a run stopped before its checks could be evaluated.
pub enum Failure {
    Usage(anyhow::Error),
    Assumptions(Vec<Violation>),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Assumptions(_) => 2,
            Failure::Core(e) => match e {
                Error::Parse { .. }
                | Error::Dimension(_)
                | Error::InvalidArgument(_)
                | Error::OutsideHorizon { .. }
                | Error::OracleRefused(_)
                | Error::Io(_) => 2,
                _ => 3,
            },
        }
    }

    pub fn print(&self) {
        match self {
            Failure::Usage(e) => eprintln!("error: {e:#}"),
            Failure::Assumptions(violations) => {
                eprintln!("error: the problem violates the standing assumptions");
                for v in violations {
                    eprintln!("  {} at s = {}: {}", v.assumption, v.time, v.description);
                }
            }
            Failure::Core(e) => {
                let kind = match e {
                    Error::Dimension(_) => "dimension",
                    Error::InvalidArgument(_) => "invalid-argument",
                    Error::OutsideHorizon { .. } => "outside-horizon",
                    Error::Singular { .. } => "singular",
                    Error::Divergence { .. } => "divergence",
                    Error::EmptyEnsemble => "empty-ensemble",
                    Error::NoConvergence { .. } => "no-convergence",
                    Error::OracleRefused(_) => "oracle-refused",
                    Error::Parse { .. } => "parse",
                    Error::Io(_) => "io",
                };
                let mut body = json!({ "error": kind, "message": e.to_string() });
                match e {
                    Error::Singular { factor, s, sigma } => {
                        body["factor"] = json!(factor);
                        body["s"] = json!(s);
                        body["sigma"] = json!(sigma);
                    }
                    Error::NoConvergence { history, .. } => body["history"] = json!(history),
                    Error::Divergence { s, .. } => body["s"] = json!(s),
                    _ => {}
                }
                eprintln!("{body}");
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

/// A boolean check counted by its number of failures.
fn count_check(name: &str, failures: usize) -> Check {
    check(name, failures as f64, 0.0)
}

struct Setup {
    spec: ProblemSpec,
    grid: TimeGrid,
    assumptions: AssumptionReport,
    meta: RunMeta,
}

fn setup(cfg: &RunConfig) -> Result<Setup, Failure> {
    let spec = parse_spec(&cfg.spec_path)?;
    let grid = build_grid(&spec.horizon, cfg.grid_steps)?;
    let assumptions = validate_assumptions(&spec, &grid)?;
    if !assumptions.passed {
        return Err(Failure::Assumptions(assumptions.violations));
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
    Ok(Setup {
        spec,
        grid,
        assumptions,
        meta: RunMeta::new(cfg.seed, cfg.grid_steps, cfg.particles),
    })
}

fn noise(cfg: &RunConfig, s: &Setup) -> Result<NoiseIncrements, Failure> {
    let noise = generate_noise(&s.grid, cfg.particles, &s.spec.jumps, cfg.seed)?;
    if let Some(path) = &cfg.noise_dump {
        write_noise(&noise, path)?;
    }
    Ok(noise)
}

fn bsde(cfg: &RunConfig) -> BsdeOptions {
    BsdeOptions {
        basis_degree: cfg.basis_degree,
    }
}

fn convention(cfg: &RunConfig) -> AdjointConvention {
    if cfg.factor2_variant {
        AdjointConvention::DoubledWeights
    } else {
        AdjointConvention::Standard
    }
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Usage(e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

/// Prints the checks, writes the report and returns whether all passed.
fn finish(cfg: &RunConfig, s: &Setup, name: &str, checks: Vec<Check>, mut body: Value) -> Result<bool, Failure> {
    let passed = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!(
            "{} {}: {:e} (tolerance {:e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    body["meta"] = json!(s.meta);
    body["config"] = json!(cfg);
    body["assumptions"] = json!(s.assumptions);
    body["checks"] = json!(checks);
    body["passed"] = json!(passed);
    let path = cfg.output_dir.join(name);
    write_json(&path, &body)?;
    println!("report: {}", path.display());
    Ok(passed)
}

pub fn run(cfg: &RunConfig) -> Result<bool, Failure> {
    let s = setup(cfg)?;
    match cfg.command {
        Command::Riccati => riccati(cfg, &s),
        Command::Solve => solve(cfg, &s),
        Command::Verify => verify(cfg, &s),
        Command::OracleCompare => oracle_compare(cfg, &s),
        Command::PicardCompare => picard_compare(cfg, &s),
    }
}

fn riccati(cfg: &RunConfig, s: &Setup) -> Result<bool, Failure> {
    let pair = solve_riccati(&s.spec, &s.grid)?;
    write_riccati_csv(&pair, Some(&s.meta.header()), cfg.output_dir.join("riccati.csv"))?;
    let residual = riccati_residual(&pair, &s.spec);
    let tol = cfg.tolerances.value("riccati-residual");
    let checks = vec![
        check("riccati-residual-p", residual.p, tol),
        check("riccati-residual-pi", residual.pi, tol),
    ];
    let body = json!({
        "command": "riccati",
        "residual": residual,
        "p_initial": matrix_rows(pair.p.initial()),
        "pi_initial": matrix_rows(pair.pi.initial()),
    });
    finish(cfg, s, "riccati_summary.json", checks, body)
}

fn solution_checks(cfg: &RunConfig, sol: &DecoupledSolution) -> Vec<Check> {
    let t = &cfg.tolerances;
    let d = &sol.diagnostics;
    let mut checks = vec![
        check("stationarity", d.stationarity_residual, t.value("stationarity")),
        check("decoupling", d.decoupling_error, t.value("decoupling")),
        check("terminal", d.terminal_error, t.value("terminal")),
        check("form-gap", sol.cost.form_gap(), t.value("form-gap")),
    ];
    if let Some((_, c)) = &sol.simulated {
        checks.push(check("form-gap-simulated", c.form_gap(), t.value("form-gap")));
    }
    checks
}

fn decoupled(cfg: &RunConfig, s: &Setup, noise: &NoiseIncrements) -> Result<DecoupledSolution, Failure> {
    let options = DecoupledOptions {
        bsde: bsde(cfg),
        simulate_state: true,
    };
    Ok(solve_decoupled(&s.spec, noise, &options)?)
}

fn solve(cfg: &RunConfig, s: &Setup) -> Result<bool, Failure> {
    let noise = noise(cfg, s)?;
    let sol = decoupled(cfg, s, &noise)?;
    write_riccati_csv(&sol.riccati, Some(&s.meta.header()), cfg.output_dir.join("riccati.csv"))?;
    let files = export_solution(&cfg.output_dir, &s.meta, &sol, cfg.full_ensemble)?;
    let mut checks = solution_checks(cfg, &sol);
    let hamilton = hamilton_residual(&s.spec, &sol, &noise, convention(cfg))?;
    if let Some(tol) = cfg.tolerances.get("hamilton") {
        checks.push(check("hamilton", hamilton.max(), tol));
    }
    let body = json!({
        "command": "solve",
        "cost": sol.cost,
        "simulated_cost": sol.simulated.as_ref().map(|(_, c)| c),
        "diagnostics": sol.diagnostics,
        "hamilton_residual": hamilton,
        "adjoint_convention": convention(cfg),
        "riccati_min_inv_margin": sol.riccati.min_inv_margin,
        "files": files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy()).collect::<Vec<_>>(),
    });
    println!("J = {} (se {:e})", sol.cost.total, sol.cost.mc_standard_error);
    finish(cfg, s, "solve_report.json", checks, body)
}

fn verify(cfg: &RunConfig, s: &Setup) -> Result<bool, Failure> {
    let noise = noise(cfg, s)?;
    let sol = decoupled(cfg, s, &noise)?;
    let t = &cfg.tolerances;
    let options = VerifyOptions {
        probes: cfg.probes,
        coercivity_samples: cfg.probes,
        seed: cfg.seed,
        se_multiplier: t.value("se-multiplier"),
        parabola_floor: t.value("parabola-floor"),
        vertex_floor: t.value("vertex-floor"),
        parabola_delta: cfg.parabola_delta.into(),
        bsde: bsde(cfg),
        ..VerifyOptions::default()
    };
    let report = verify_optimality(&s.spec, &sol, &noise, &options)?;
    let mut checks = vec![check(
        "stationarity",
        sol.diagnostics.stationarity_residual,
        t.value("stationarity"),
    )];
    checks.push(count_check(
        "descent",
        report.probes.iter().filter(|p| !p.descent_pass).count(),
    ));
    checks.push(count_check(
        "parabola",
        report.probes.iter().filter(|p| !p.parabola_pass).count(),
    ));
    checks.push(count_check(
        "coercivity",
        report.coercivity.iter().filter(|c| !c.pass).count(),
    ));
    if let Some(v) = &report.vertex {
        checks.push(check("vertex", v.vertex.abs(), v.tolerance));
    }
    let body = json!({ "command": "verify", "verification": report });
    finish(cfg, s, "verify_report.json", checks, body)
}

fn oracle_compare(cfg: &RunConfig, s: &Setup) -> Result<bool, Failure> {
    let oracle = brute_force_lq_oracle(&s.spec, &s.grid)?;
    let noise = noise(cfg, s)?;
    let sol = decoupled(cfg, s, &noise)?;
    let t = &cfg.tolerances;
    let j_pipe = sol.simulated.as_ref().map_or(sol.cost.total, |(_, c)| c.total);
    let cost_gap = (j_pipe - oracle.cost).abs();
    let cost_scale = 1.0 + oracle.cost.abs();
    let u_gap = sol.u.l2_distance(&oracle.u)?;
    let u_scale = 1.0 + oracle.u.l2_norm();
    let checks = vec![
        check("oracle-cost", cost_gap / cost_scale, t.value("oracle-cost")),
        check("oracle-control", u_gap / u_scale, t.value("oracle-control")),
    ];

    let mut table = format!("{}\nquantity,pipeline,oracle,gap,tolerance,pass\n", s.meta.header());
    let _ = writeln!(
        table,
        "cost,{j_pipe},{},{cost_gap},{},{}",
        oracle.cost,
        t.value("oracle-cost") * cost_scale,
        checks[0].pass
    );
    let _ = writeln!(
        table,
        "control_l2,{},{},{u_gap},{},{}",
        sol.u.l2_norm(),
        oracle.u.l2_norm(),
        t.value("oracle-control") * u_scale,
        checks[1].pass
    );
    write_text(&cfg.output_dir.join("oracle_compare.csv"), &table)?;

    let mut controls = format!("{}\ns,component,pipeline,oracle\n", s.meta.header());
    for i in 0..s.grid.steps() {
        for (c, (a, b)) in sol.u.mean(i).iter().zip(oracle.u.mean(i)).enumerate() {
            let _ = writeln!(controls, "{},{c},{a},{b}", s.grid.node(i));
        }
    }
    write_text(&cfg.output_dir.join("oracle_controls.csv"), &controls)?;

    println!("relative cost gap: {:e}", cost_gap / cost_scale);
    let body = json!({
        "command": "oracle-compare",
        "pipeline_cost": j_pipe,
        "reconstructed_cost": sol.cost.total,
        "oracle": oracle,
        "cost_gap": cost_gap,
        "relative_cost_gap": cost_gap / cost_scale,
        "control_distance": u_gap,
        "relative_control_distance": u_gap / u_scale,
    });
    finish(cfg, s, "oracle_compare.json", checks, body)
}

fn relative(distance: f64, scale: f64) -> f64 {
    if distance == 0.0 {
        0.0
    } else {
        distance / scale.max(f64::MIN_POSITIVE)
    }
}

fn picard_compare(cfg: &RunConfig, s: &Setup) -> Result<bool, Failure> {
    let noise = noise(cfg, s)?;
    let sol = decoupled(cfg, s, &noise)?;
    let t = &cfg.tolerances;
    let max_iter = t.value("picard-max-iter") as usize;
    let options = PicardOptions {
        max_iter,
        tol: t.value("picard-tol"),
        damping: cfg.picard_damping,
        bsde: bsde(cfg),
        convention: convention(cfg),
    };
    let outcome: Result<PicardSolution, Vec<f64>> = match solve_hamilton_picard(&s.spec, &noise, &options) {
        Ok(p) => Ok(p),
        Err(Error::NoConvergence { history, .. }) => Err(history),
        Err(e) => return Err(e.into()),
    };
    let history = match &outcome {
        Ok(p) => p.history.clone(),
        Err(h) => h.clone(),
    };
    let mut hist = format!("{}\niteration,change\n", s.meta.header());
    for (j, c) in history.iter().enumerate() {
        let _ = writeln!(hist, "{},{c}", j + 1);
    }
    write_text(&cfg.output_dir.join("picard_history.csv"), &hist)?;

    let mut table = format!("{}\nquantity,value,tolerance,pass\n", s.meta.header());
    let mut checks = Vec::new();
    let body = match &outcome {
        Ok(p) => {
            let dy = relative(sol.state.y.sup_rms_distance(&p.state.y)?, p.state.y.sup_rms());
            let dk = relative(sol.k.k.sup_rms_distance(&p.k.k)?, p.k.k.sup_rms());
            let du = relative(sol.u.l2_distance(&p.u)?, p.u.l2_norm());
            checks.push(check("picard-distance-y", dy, t.value("picard-distance")));
            checks.push(check("picard-iterations", p.iterations as f64, max_iter as f64));
            let _ = writeln!(
                table,
                "y_distance,{dy},{},{}",
                t.value("picard-distance"),
                checks[0].pass
            );
            let _ = writeln!(table, "k_distance,{dk},,");
            let _ = writeln!(table, "u_distance,{du},,");
            let _ = writeln!(table, "iterations,{},{max_iter},{}", p.iterations, checks[1].pass);
            json!({
                "command": "picard-compare",
                "converged": true,
                "iterations": p.iterations,
                "monotone": p.monotone,
                "history": history,
                "y_distance": dy,
                "k_distance": dk,
                "u_distance": du,
            })
        }
        Err(_) => {
            checks.push(check("picard-iterations", f64::INFINITY, max_iter as f64));
            let _ = writeln!(table, "iterations,inf,{max_iter},false");
            json!({
                "command": "picard-compare",
                "converged": false,
                "history": history,
            })
        }
    };
    write_text(&cfg.output_dir.join("picard_compare.csv"), &table)?;
    finish(cfg, s, "picard_compare.json", checks, body)
}
