//! Problem instances: coefficients, horizon, grid, assumption checks and the
//! JSON spec format.

mod assumptions;
mod coeff;
mod file;
mod grid;
mod spec;

pub use assumptions::{validate_assumptions, AssumptionReport, Violation};
pub use coeff::{sample_coefficient, CoefficientTable};
pub use file::{parse_spec, parse_spec_str};
pub use grid::{build_grid, TimeGrid, TimeHorizon};
pub use spec::{CoefficientSet, Coefficients, JumpMeasure, NoiseFunction, ProblemSpec, TerminalCondition};
