//! Admissible controls on a grid and ensemble.
//!
//! Interval-valued quantities hold one slot per node: slot `i` acts on
//! `[s_i, s_{i+1})` and the terminal slot only pads the layout.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::PathEnsemble;
use crate::linalg::{checked_inverse, matvec, matvec_acc};
use crate::problem::{ProblemSpec, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub enum ControlProcess {
    /// A deterministic function of time, one vector per node.
    Deterministic { grid: TimeGrid, values: Vec<Vec<f64>> },
    /// A function of the adjoint (or some other Markov state) carried along
    /// so that backward solvers can regress on it.
    Feedback { values: PathEnsemble, state: PathEnsemble },
    /// Arbitrary per-particle values.
    Ensemble { values: PathEnsemble },
}

impl ControlProcess {
    pub fn deterministic(grid: &TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.steps() + 1 {
            return Err(Error::Dimension(format!(
                "{} control values for {} nodes",
                values.len(),
                grid.steps() + 1
            )));
        }
        let m = values[0].len();
        if values.iter().any(|v| v.len() != m) {
            return Err(Error::Dimension("control values of mixed dimension".into()));
        }
        Ok(ControlProcess::Deterministic {
            grid: grid.clone(),
            values,
        })
    }

    pub fn zero(grid: &TimeGrid, m: usize) -> Self {
        ControlProcess::Deterministic {
            grid: grid.clone(),
            values: vec![vec![0.0; m]; grid.steps() + 1],
        }
    }

    /// Samples `f` at the left end of every interval.
    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let steps = grid.steps();
        let mut values: Vec<Vec<f64>> = (0..steps).map(|i| f(grid.node(i))).collect();
        values.push(values[steps - 1].clone());
        Self::deterministic(grid, values)
    }

    /// The feedback that solves the stationarity condition for a given
    /// adjoint: `u = -N3⁻¹ Bᵀ (k - E[k]) - (N3 + N̄3)⁻¹ (B + B̄)ᵀ E[k]`.
    pub fn optimal_feedback(spec: &ProblemSpec, k: &PathEnsemble) -> Result<Self> {
        let grid = k.grid();
        let (n, m) = (spec.n, spec.m);
        if k.dim() != n {
            return Err(Error::Dimension("adjoint dimension differs from n".into()));
        }
        let particles = k.particles();
        let mut rows = Vec::with_capacity(grid.steps() + 1);
        for (i, &s) in grid.nodes().iter().enumerate() {
            let c = spec.coefficients_at(s)?;
            let centered_gain = -checked_inverse(&c.n3, "N3", s)? * c.b.transpose();
            let mean_gain = -checked_inverse(&(&c.n3 + &c.n3_bar), "N3+N3_bar", s)? * (&c.b + &c.b_bar).transpose();
            let ek = k.mean(i);
            let mut mean_part = vec![0.0; m];
            matvec(&mean_gain, ek, &mut mean_part);
            let mut row = vec![0.0; particles * m];
            let mut dev = vec![0.0; n];
            for p in 0..particles {
                let kp = k.particle(i, p);
                for j in 0..n {
                    dev[j] = kp[j] - ek[j];
                }
                let out = &mut row[p * m..(p + 1) * m];
                matvec(&centered_gain, &dev, out);
                for j in 0..m {
                    out[j] += mean_part[j];
                }
            }
            rows.push(row);
        }
        Ok(ControlProcess::Feedback {
            values: PathEnsemble::from_rows(grid, particles, m, rows)?,
            state: k.clone(),
        })
    }

    /// `v_p(s_i) = gain_i x_p(s_i) + offset_i` for a Markov state `x`.
    pub fn linear_feedback(state: &PathEnsemble, gains: &[DMatrix<f64>], offsets: &[Vec<f64>]) -> Result<Self> {
        let grid = state.grid();
        let nodes = grid.steps() + 1;
        if gains.len() != nodes || offsets.len() != nodes {
            return Err(Error::Dimension("one gain and offset per node required".into()));
        }
        let m = gains[0].nrows();
        let particles = state.particles();
        let rows = (0..nodes)
            .map(|i| {
                let mut row = vec![0.0; particles * m];
                for p in 0..particles {
                    let out = &mut row[p * m..(p + 1) * m];
                    out.copy_from_slice(&offsets[i]);
                    matvec_acc(&gains[i], state.particle(i, p), 1.0, out);
                }
                row
            })
            .collect();
        Ok(ControlProcess::Feedback {
            values: PathEnsemble::from_rows(grid, particles, m, rows)?,
            state: state.clone(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        match self {
            ControlProcess::Deterministic { grid, .. } => grid,
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => values.grid(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlProcess::Deterministic { values, .. } => values[0].len(),
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => values.dim(),
        }
    }

    /// Ensemble size, `None` for deterministic controls.
    pub fn particles(&self) -> Option<usize> {
        match self {
            ControlProcess::Deterministic { .. } => None,
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => Some(values.particles()),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, ControlProcess::Deterministic { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ControlProcess::Deterministic { .. } => "deterministic",
            ControlProcess::Feedback { .. } => "feedback",
            ControlProcess::Ensemble { .. } => "ensemble",
        }
    }

    /// Value for particle `p` on the interval starting at node `i`.
    pub fn value(&self, i: usize, p: usize) -> &[f64] {
        match self {
            ControlProcess::Deterministic { values, .. } => &values[i],
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => values.particle(i, p),
        }
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        match self {
            ControlProcess::Deterministic { values, .. } => &values[i],
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => values.mean(i),
        }
    }

    /// State a backward solver should add to its regression basis.
    pub fn regressors(&self) -> Option<&PathEnsemble> {
        match self {
            ControlProcess::Feedback { state, .. } => Some(state),
            _ => None,
        }
    }

    /// All particles at node `i` (`p * m + j`), broadcasting deterministic
    /// values.
    pub fn row(&self, i: usize, particles: usize) -> Vec<f64> {
        match self {
            ControlProcess::Deterministic { values, .. } => values[i].repeat(particles),
            ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => values.values(i).to_vec(),
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ControlProcess, b: f64) -> Result<Self> {
        if self.grid() != other.grid() || self.dim() != other.dim() {
            return Err(Error::Dimension("controls live on different grids".into()));
        }
        let particles = match (self.particles(), other.particles()) {
            (None, None) => {
                let values = (0..=self.grid().steps())
                    .map(|i| {
                        self.mean(i)
                            .iter()
                            .zip(other.mean(i))
                            .map(|(x, y)| a * x + b * y)
                            .collect()
                    })
                    .collect();
                return Self::deterministic(self.grid(), values);
            }
            (Some(p), None) | (None, Some(p)) => p,
            (Some(p), Some(q)) if p == q => p,
            _ => return Err(Error::Dimension("controls have different ensemble sizes".into())),
        };
        let rows = (0..=self.grid().steps())
            .map(|i| {
                self.row(i, particles)
                    .iter()
                    .zip(other.row(i, particles))
                    .map(|(x, y)| a * x + b * y)
                    .collect()
            })
            .collect();
        let values = PathEnsemble::from_rows(self.grid(), particles, self.dim(), rows)?;
        Ok(match self.regressors().or(other.regressors()) {
            Some(state) => ControlProcess::Feedback {
                values,
                state: state.clone(),
            },
            None => ControlProcess::Ensemble { values },
        })
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        self.combine(a, self, 0.0)
    }

    /// `sqrt(Σ_{i<M} h E|u_i|²)`.
    pub fn l2_norm(&self) -> f64 {
        let grid = self.grid();
        let h = grid.step();
        let mut total = 0.0;
        for i in 0..grid.steps() {
            total += h * match self {
                ControlProcess::Deterministic { values, .. } => values[i].iter().map(|v| v * v).sum::<f64>(),
                ControlProcess::Feedback { values, .. } | ControlProcess::Ensemble { values } => {
                    values.values(i).iter().map(|v| v * v).sum::<f64>() / values.particles() as f64
                }
            };
        }
        total.sqrt()
    }

    pub fn l2_distance(&self, other: &ControlProcess) -> Result<f64> {
        Ok(self.combine(1.0, other, -1.0)?.l2_norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_grid, TimeHorizon};

    #[test]
    fn norm_of_constant_control() {
        let grid = build_grid(&TimeHorizon::new(0.0, 2.0).unwrap(), 8).unwrap();
        let u = ControlProcess::from_fn(&grid, |_| vec![3.0]).unwrap();
        assert!((u.l2_norm() - (9.0f64 * 2.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn combine_mixes_representations() {
        let grid = build_grid(&TimeHorizon::new(0.0, 1.0).unwrap(), 2).unwrap();
        let det = ControlProcess::from_fn(&grid, |s| vec![s]).unwrap();
        let rows = vec![vec![1.0, 2.0]; 3];
        let ens = ControlProcess::Ensemble {
            values: PathEnsemble::from_rows(&grid, 2, 1, rows).unwrap(),
        };
        let sum = det.combine(2.0, &ens, 1.0).unwrap();
        assert_eq!(sum.value(1, 1), &[2.0 * 0.5 + 2.0]);
        assert!(!sum.is_deterministic());
        let back = sum.combine(1.0, &ens, -1.0).unwrap();
        assert!((back.mean(1)[0] - 1.0).abs() < 1e-15);
    }
}
