//! Strict JSON reader for problem specs.
//!
//! ```json
//! {
//!   "n": 1, "m": 1,
//!   "horizon": {"t": 0.0, "T": 1.0},
//!   "jumps": {"marks": ["e1"], "weights": [2.0]},
//!   "coefficients": {"A": [[0.5]], "B": 1.0, "N3": 1.0, "D": [0.2],
//!                    "Q": {"breakpoints": [0.5], "values": [1.0, 2.0]}},
//!   "terminal": {"kind": "deterministic-vector", "payload": {"value": [1.0]}}
//! }
//! ```
//! Omitted coefficients are zero. Unknown keys are rejected.

use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{Map, Value};

use super::coeff::CoefficientTable;
use super::grid::TimeHorizon;
use super::spec::{CoefficientSet, JumpMeasure, NoiseFunction, ProblemSpec, TerminalCondition};
use crate::error::{Error, Result};

pub fn parse_spec(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_spec_str(&text).map_err(|e| match e {
        Error::Parse { path: field, message } => Error::Parse {
            path: format!("{}: {field}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn parse_spec_str(text: &str) -> Result<ProblemSpec> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::parse("<document>", e.to_string()))?;
    let obj = object(&root, "<root>")?;
    allow_keys(
        obj,
        "<root>",
        &["n", "m", "horizon", "jumps", "coefficients", "terminal"],
    )?;
    let n = dimension(required(obj, "<root>", "n")?, "n")?;
    let m = dimension(required(obj, "<root>", "m")?, "m")?;

    let h = object(required(obj, "<root>", "horizon")?, "horizon")?;
    allow_keys(h, "horizon", &["t", "T"])?;
    let t = number(required(h, "horizon", "t")?, "horizon.t")?;
    let big_t = number(required(h, "horizon", "T")?, "horizon.T")?;
    let horizon = TimeHorizon::new(t, big_t).map_err(|e| Error::parse("horizon", e.to_string()))?;

    let jumps = match obj.get("jumps") {
        None => JumpMeasure::none(),
        Some(v) => parse_jumps(v)?,
    };
    let k = jumps.len();

    let coeffs = match obj.get("coefficients") {
        None => CoefficientSet::zeros(n, m, k),
        Some(v) => parse_coefficients(v, n, m, k, &horizon)?,
    };
    let terminal = parse_terminal(required(obj, "<root>", "terminal")?, n, k)?;

    ProblemSpec::new(n, m, horizon, jumps, coeffs, terminal).map_err(|e| Error::parse("<root>", e.to_string()))
}

fn parse_jumps(v: &Value) -> Result<JumpMeasure> {
    let j = object(v, "jumps")?;
    allow_keys(j, "jumps", &["marks", "weights"])?;
    let weights: Vec<f64> = array(required(j, "jumps", "weights")?, "jumps.weights")?
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let path = format!("jumps.weights[{i}]");
            let w = number(w, &path)?;
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::parse(path, format!("jump weight must be positive, got {w}")));
            }
            Ok(w)
        })
        .collect::<Result<_>>()?;
    let marks: Vec<String> = match j.get("marks") {
        None => (1..=weights.len()).map(|k| format!("e{k}")).collect(),
        Some(v) => array(v, "jumps.marks")?
            .iter()
            .enumerate()
            .map(|(i, m)| match m {
                Value::String(s) => Ok(s.clone()),
                Value::Number(x) => Ok(x.to_string()),
                _ => Err(Error::parse(
                    format!("jumps.marks[{i}]"),
                    "mark identifiers must be strings or numbers",
                )),
            })
            .collect::<Result<_>>()?,
    };
    if marks.len() != weights.len() {
        return Err(Error::parse(
            "jumps.marks",
            format!("{} marks but {} weights", marks.len(), weights.len()),
        ));
    }
    JumpMeasure::new(marks, weights).map_err(|e| Error::parse("jumps", e.to_string()))
}

const SINGLE: [&str; 14] = [
    "A", "A_bar", "B", "B_bar", "C", "C_bar", "Q", "Q_bar", "N1", "N1_bar", "N3", "N3_bar", "G", "G_bar",
];
const PER_MARK: [&str; 4] = ["D", "D_bar", "N2", "N2_bar"];

fn parse_coefficients(v: &Value, n: usize, m: usize, k: usize, horizon: &TimeHorizon) -> Result<CoefficientSet> {
    let obj = object(v, "coefficients")?;
    let known: Vec<&str> = SINGLE.iter().chain(PER_MARK.iter()).copied().collect();
    allow_keys(obj, "coefficients", &known)?;

    let mut c = CoefficientSet::zeros(n, m, k);
    let shape = |name: &str| match name {
        "B" | "B_bar" => (n, m),
        "N3" | "N3_bar" => (m, m),
        _ => (n, n),
    };
    for (name, value) in obj {
        let path = format!("coefficients.{name}");
        if PER_MARK.contains(&name.as_str()) {
            let list = array(value, &path)?;
            if list.len() != k {
                return Err(Error::parse(
                    path,
                    format!("expected one entry per mark ({k}), got {}", list.len()),
                ));
            }
            let tables = list
                .iter()
                .enumerate()
                .map(|(i, t)| table(t, &format!("{path}[{i}]"), (n, n), horizon))
                .collect::<Result<Vec<_>>>()?;
            match name.as_str() {
                "D" => c.d = tables,
                "D_bar" => c.d_bar = tables,
                "N2" => c.n2 = tables,
                _ => c.n2_bar = tables,
            }
            continue;
        }
        if name == "G" || name == "G_bar" {
            let g = matrix(value, &path, (n, n))?;
            if name == "G" {
                c.g = g;
            } else {
                c.g_bar = g;
            }
            continue;
        }
        let t = table(value, &path, shape(name), horizon)?;
        match name.as_str() {
            "A" => c.a = t,
            "A_bar" => c.a_bar = t,
            "B" => c.b = t,
            "B_bar" => c.b_bar = t,
            "C" => c.c = t,
            "C_bar" => c.c_bar = t,
            "Q" => c.q = t,
            "Q_bar" => c.q_bar = t,
            "N1" => c.n1 = t,
            "N1_bar" => c.n1_bar = t,
            "N3" => c.n3 = t,
            _ => c.n3_bar = t,
        }
    }
    Ok(c)
}

fn table(v: &Value, path: &str, shape: (usize, usize), horizon: &TimeHorizon) -> Result<CoefficientTable> {
    let Value::Object(obj) = v else {
        return Ok(CoefficientTable::Constant(matrix(v, path, shape)?));
    };
    allow_keys(obj, path, &["breakpoints", "values"])?;
    let bp_path = format!("{path}.breakpoints");
    let breakpoints = array(required(obj, path, "breakpoints")?, &bp_path)?
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let p = format!("{bp_path}[{i}]");
            let b = number(b, &p)?;
            if !(b > horizon.t_start() && b < horizon.t_end()) {
                return Err(Error::parse(p, format!("breakpoint {b} not inside the horizon")));
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    let val_path = format!("{path}.values");
    let values = array(required(obj, path, "values")?, &val_path)?
        .iter()
        .enumerate()
        .map(|(i, m)| matrix(m, &format!("{val_path}[{i}]"), shape))
        .collect::<Result<Vec<_>>>()?;
    CoefficientTable::piecewise(breakpoints, values).map_err(|e| Error::parse(path, e.to_string()))
}

fn matrix(v: &Value, path: &str, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let (r, c) = shape;
    let mismatch = |got: String| Error::parse(path, format!("dimension mismatch: expected {r}x{c}, got {got}"));
    if let Value::Number(_) = v {
        if shape != (1, 1) {
            return Err(mismatch("a scalar".into()));
        }
        return Ok(DMatrix::from_element(1, 1, number(v, path)?));
    }
    let rows = array(v, path)?;
    let mut data = Vec::with_capacity(r * c);
    let mut widths = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row = array(row, &format!("{path}[{i}]"))?;
        widths.push(row.len());
        for (j, x) in row.iter().enumerate() {
            data.push(number(x, &format!("{path}[{i}][{j}]"))?);
        }
    }
    if widths.iter().any(|w| *w != widths.first().copied().unwrap_or(0)) {
        return Err(Error::parse(path, "ragged matrix rows"));
    }
    let got = (rows.len(), widths.first().copied().unwrap_or(0));
    if got != shape {
        return Err(mismatch(format!("{}x{}", got.0, got.1)));
    }
    Ok(DMatrix::from_row_slice(r, c, &data))
}

fn parse_terminal(v: &Value, n: usize, k: usize) -> Result<TerminalCondition> {
    let obj = object(v, "terminal")?;
    allow_keys(obj, "terminal", &["kind", "payload"])?;
    let kind = match required(obj, "terminal", "kind")? {
        Value::String(s) => s.as_str(),
        _ => return Err(Error::parse("terminal.kind", "expected a string")),
    };
    let payload = object(required(obj, "terminal", "payload")?, "terminal.payload")?;
    let p = "terminal.payload";
    match kind {
        "deterministic-vector" => {
            allow_keys(payload, p, &["value"])?;
            Ok(TerminalCondition::Deterministic(vector(
                required(payload, p, "value")?,
                "terminal.payload.value",
                n,
            )?))
        }
        "affine-in-terminal-noise" => {
            allow_keys(payload, p, &["constant", "brownian", "jumps"])?;
            let constant = vector(required(payload, p, "constant")?, &format!("{p}.constant"), n)?;
            let brownian = match payload.get("brownian") {
                Some(b) => vector(b, &format!("{p}.brownian"), n)?,
                None => vec![0.0; n],
            };
            let jumps = match payload.get("jumps") {
                None => vec![vec![0.0; n]; k],
                Some(j) => {
                    let path = format!("{p}.jumps");
                    let list = array(j, &path)?;
                    if list.len() != k {
                        return Err(Error::parse(
                            path,
                            format!("expected one loading per mark ({k}), got {}", list.len()),
                        ));
                    }
                    list.iter()
                        .enumerate()
                        .map(|(i, l)| vector(l, &format!("{path}[{i}]"), n))
                        .collect::<Result<_>>()?
                }
            };
            Ok(TerminalCondition::Affine {
                constant,
                brownian,
                jumps,
            })
        }
        "functional-of-noise" => {
            allow_keys(payload, p, &["function", "constant", "scale", "shift"])?;
            let function: NoiseFunction =
                serde_json::from_value(required(payload, p, "function")?.clone()).map_err(|_| {
                    Error::parse(
                        format!("{p}.function"),
                        "expected one of sin, cos, tanh, exp, square, abs",
                    )
                })?;
            let constant = match payload.get("constant") {
                Some(c) => vector(c, &format!("{p}.constant"), n)?,
                None => vec![0.0; n],
            };
            let scale = vector(required(payload, p, "scale")?, &format!("{p}.scale"), n)?;
            let shift = match payload.get("shift") {
                Some(s) => number(s, &format!("{p}.shift"))?,
                None => 0.0,
            };
            Ok(TerminalCondition::Functional {
                function,
                constant,
                scale,
                shift,
            })
        }
        other => Err(Error::parse(
            "terminal.kind",
            format!("unknown terminal kind {other:?}"),
        )),
    }
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| Error::parse(path, "expected an object"))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::parse(path, "expected an array"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| Error::parse(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(Error::parse(path, "non-finite number"));
    }
    Ok(x)
}

fn dimension(v: &Value, path: &str) -> Result<usize> {
    match v.as_u64() {
        Some(d) if d >= 1 => Ok(d as usize),
        _ => Err(Error::parse(path, "expected a positive integer")),
    }
}

fn vector(v: &Value, path: &str, n: usize) -> Result<Vec<f64>> {
    let xs = array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, x)| number(x, &format!("{path}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    if xs.len() != n {
        return Err(Error::parse(
            path,
            format!("dimension mismatch: expected length {n}, got {}", xs.len()),
        ));
    }
    Ok(xs)
}

fn required<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(join(path, key), "missing required field"))
}

fn allow_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::parse(join(path, k), "unknown field")),
        None => Ok(()),
    }
}

fn join(path: &str, key: &str) -> String {
    if path == "<root>" {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}
