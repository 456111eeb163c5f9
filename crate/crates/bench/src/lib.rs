//! Shared inputs for the benchmarks.

use std::path::Path;

use mflq_core::{build_grid, parse_spec, ProblemSpec, TimeGrid};

/// Loads `fixtures/<name>.json` from the workspace root.
pub fn fixture(name: &str) -> ProblemSpec {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"));
    parse_spec(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Uniform grid over the fixture's horizon.
pub fn grid(spec: &ProblemSpec, steps: usize) -> TimeGrid {
    build_grid(&spec.horizon, steps).expect("steps >= 2")
}
