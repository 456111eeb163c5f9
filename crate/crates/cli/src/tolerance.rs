use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Result};
use serde::Serialize;

/// Named tolerances with defaults. Keys without a default are opt-in checks.
#[derive(Debug, Clone, Serialize)]
pub struct Tolerances(BTreeMap<&'static str, Option<f64>>);

const KNOWN: &[(&str, Option<f64>, &str)] = &[
    ("riccati-residual", Some(1e-3), "central-difference defect of P and Pi"),
    (
        "stationarity",
        Some(1e-12),
        "stationarity defect of the reconstructed pair",
    ),
    ("decoupling", Some(1e-12), "defect of the decoupling relation for Y"),
    ("terminal", Some(1e-12), "max |Y(T) - xi|"),
    ("form-gap", Some(1e-10), "relative gap of raw and centered cost forms"),
    ("hamilton", None, "normalized one-step defect of the optimality system"),
    ("se-multiplier", Some(4.0), "Monte Carlo slack in standard errors"),
    ("parabola-floor", Some(1e-8), "absolute floor of the parabola tolerance"),
    ("vertex-floor", Some(0.05), "allowance for the fitted vertex along u*"),
    ("oracle-cost", Some(1e-3), "cost gap relative to 1 + |J_oracle|"),
    (
        "oracle-control",
        Some(2e-2),
        "L2 control gap relative to 1 + |u_oracle|",
    ),
    ("picard-distance", Some(5e-2), "relative sup-node L2 distance of Y"),
    ("picard-tol", Some(1e-6), "Picard stopping threshold"),
    ("picard-max-iter", Some(30.0), "Picard iteration budget"),
];

impl Default for Tolerances {
    fn default() -> Self {
        Self(KNOWN.iter().map(|(k, v, _)| (*k, *v)).collect())
    }
}

impl Tolerances {
    /// Applies `KEY=VAL` overrides, rejecting unknown keys.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        let mut t = Self::default();
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("tolerance override '{item}' is not KEY=VAL"))?;
            let key = key.trim();
            let slot = KNOWN
                .iter()
                .find(|(k, _, _)| *k == key)
                .map(|(k, _, _)| *k)
                .ok_or_else(|| anyhow!("unknown tolerance key '{key}' (known: {})", Self::keys()))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| anyhow!("tolerance '{key}' needs a number, got '{value}'"))?;
            if v.is_nan() || v < 0.0 {
                bail!("tolerance '{key}' must be nonnegative");
            }
            t.0.insert(slot, Some(v));
        }
        Ok(t)
    }

    pub fn keys() -> String {
        KNOWN.iter().map(|(k, _, _)| *k).collect::<Vec<_>>().join(", ")
    }

    pub fn help() -> String {
        KNOWN
            .iter()
            .map(|(k, v, d)| match v {
                Some(v) if v.fract() == 0.0 => format!("  {k} (default {v}): {d}"),
                Some(v) => format!("  {k} (default {v:e}): {d}"),
                None => format!("  {k} (off unless set): {d}"),
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.get(key).copied().flatten()
    }

    /// For keys that always have a default.
    pub fn value(&self, key: &str) -> f64 {
        self.get(key)
            .unwrap_or_else(|| panic!("tolerance '{key}' has no default"))
    }
}
