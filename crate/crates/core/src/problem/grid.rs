use serde::Serialize;

use crate::error::{Error, Result};

/// Control interval `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeHorizon {
    t_start: f64,
    t_end: f64,
}

impl TimeHorizon {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_start < 0.0 || t_start >= t_end {
            return Err(Error::InvalidArgument(format!(
                "horizon requires 0 <= t < T, got [{t_start}, {t_end}]"
            )));
        }
        Ok(Self { t_start, t_end })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Slack used when deciding whether a grid-computed time lies inside.
    fn slack(&self) -> f64 {
        1e-12 * (1.0 + self.t_end.abs())
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.t_start - self.slack() && s <= self.t_end + self.slack()
    }

    pub fn check(&self, s: f64) -> Result<()> {
        if self.contains(s) {
            Ok(())
        } else {
            Err(Error::OutsideHorizon {
                s,
                t_start: self.t_start,
                t_end: self.t_end,
            })
        }
    }
}

/// Uniform grid `s_i = t_start + i h`, `i = 0..=M`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    step: f64,
}

impl TimeGrid {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of intervals `M`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn t_start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn t_end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        0.5 * (self.nodes[i] + self.nodes[i + 1])
    }

    /// Trapezoid weights over the nodes.
    pub fn node_weights(&self) -> Vec<f64> {
        let m = self.steps();
        (0..=m)
            .map(|i| if i == 0 || i == m { 0.5 * self.step } else { self.step })
            .collect()
    }

    /// Left-point weights for interval-valued (predictable) processes; the
    /// terminal node carries no weight.
    pub fn interval_weights(&self) -> Vec<f64> {
        let m = self.steps();
        (0..=m).map(|i| if i < m { self.step } else { 0.0 }).collect()
    }
}

pub fn build_grid(horizon: &TimeHorizon, steps: usize) -> Result<TimeGrid> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "a time grid needs at least 2 steps, got {steps}"
        )));
    }
    let step = horizon.length() / steps as f64;
    let mut nodes: Vec<f64> = (0..=steps).map(|i| horizon.t_start() + i as f64 * step).collect();
    nodes[steps] = horizon.t_end();
    Ok(TimeGrid { nodes, step })
}
