//! CSV export of solution processes.
//!
//! Every file starts with a `#` line naming the tool version, seed, number
//! of steps and particles, so a run can be replayed from its outputs. No
//! timestamps are written: identical runs produce identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::control::ControlProcess;
use crate::error::Result;
use crate::kernel::PathEnsemble;
use crate::pipeline::DecoupledSolution;

/// Replay information embedded in every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunMeta {
    pub tool_version: String,
    pub seed: u64,
    pub steps: usize,
    pub particles: usize,
}

impl RunMeta {
    pub fn new(seed: u64, steps: usize, particles: usize) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            steps,
            particles,
        }
    }

    pub fn header(&self) -> String {
        format!(
            "# mflq {} seed={} steps={} particles={}",
            self.tool_version, self.seed, self.steps, self.particles
        )
    }
}

/// Writes `s,component,mean` for every node.
pub fn write_means_csv(meta: &RunMeta, x: &PathEnsemble, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{}\ns,component,mean\n", meta.header());
    for (i, s) in x.grid().nodes().iter().enumerate() {
        for (c, v) in x.mean(i).iter().enumerate() {
            let _ = writeln!(out, "{s},{c},{v}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes `s,particle,component,value` for every node and particle.
pub fn write_ensemble_csv(meta: &RunMeta, x: &PathEnsemble, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("{}\ns,particle,component,value\n", meta.header());
    for (i, s) in x.grid().nodes().iter().enumerate() {
        for p in 0..x.particles() {
            for (c, v) in x.particle(i, p).iter().enumerate() {
                let _ = writeln!(out, "{s},{p},{c},{v}");
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn control_ensemble(u: &ControlProcess) -> Result<PathEnsemble> {
    match u {
        ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => Ok(values.clone()),
        ControlProcess::Deterministic { grid, values } => PathEnsemble::from_rows(grid, 1, u.dim(), values.clone()),
    }
}

/// Writes one means file per process (`Y`, `Z`, `R<k>`, `u`, `k`, `phi`)
/// into `dir`, plus full-ensemble files when asked. Returns the paths.
pub fn export_solution(
    dir: impl AsRef<Path>,
    meta: &RunMeta,
    solution: &DecoupledSolution,
    full_ensemble: bool,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut processes: Vec<(String, PathEnsemble)> = vec![
        ("Y".into(), solution.state.y.clone()),
        ("Z".into(), solution.state.z.clone()),
    ];
    for (k, r) in solution.state.r.iter().enumerate() {
        processes.push((format!("R{k}"), r.clone()));
    }
    processes.push(("u".into(), control_ensemble(&solution.u)?));
    processes.push(("k".into(), solution.k.k.clone()));
    processes.push(("phi".into(), solution.phi.phi.clone()));

    let mut written = Vec::new();
    for (name, x) in &processes {
        let path = dir.join(format!("means_{name}.csv"));
        write_means_csv(meta, x, &path)?;
        written.push(path);
        if full_ensemble {
            let path = dir.join(format!("ensemble_{name}.csv"));
            write_ensemble_csv(meta, x, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_grid, TimeHorizon};

    #[test]
    fn header_names_the_run() {
        let meta = RunMeta::new(7, 20, 3);
        assert_eq!(
            meta.header(),
            format!("# mflq {} seed=7 steps=20 particles=3", env!("CARGO_PKG_VERSION"))
        );
    }

    #[test]
    fn means_and_ensemble_layout() {
        let grid = build_grid(&TimeHorizon::new(0.0, 1.0).unwrap(), 2).unwrap();
        let rows = vec![vec![1.0, 3.0], vec![0.0, 0.0], vec![-1.0, 1.0]];
        let x = PathEnsemble::from_rows(&grid, 2, 1, rows).unwrap();
        let meta = RunMeta::new(0, 2, 2);
        let dir = tempfile::tempdir().unwrap();

        let means = dir.path().join("m.csv");
        write_means_csv(&meta, &x, &means).unwrap();
        let text = std::fs::read_to_string(&means).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], meta.header());
        assert_eq!(&lines[1..], ["s,component,mean", "0,0,2", "0.5,0,0", "1,0,0"]);

        let full = dir.path().join("e.csv");
        write_ensemble_csv(&meta, &x, &full).unwrap();
        let text = std::fs::read_to_string(&full).unwrap();
        assert_eq!(text.lines().nth(1), Some("s,particle,component,value"));
        assert_eq!(text.lines().nth(3), Some("0,1,0,3"));
        assert_eq!(text.lines().count(), 2 + 6);
    }
}
