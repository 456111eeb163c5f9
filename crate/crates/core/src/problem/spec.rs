use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::coeff::CoefficientTable;
use super::grid::TimeHorizon;
use crate::error::{Error, Result};

/// Finite mark set with atomic intensity measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpMeasure {
    marks: Vec<String>,
    weights: Vec<f64>,
}

impl JumpMeasure {
    pub fn new(marks: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if marks.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} marks but {} weights",
                marks.len(),
                weights.len()
            )));
        }
        if let Some((k, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "jump weight {k} must be positive and finite, got {w}"
            )));
        }
        Ok(Self { marks, weights })
    }

    pub fn none() -> Self {
        Self {
            marks: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Marks named `e1..eK` with the given intensities.
    pub fn with_weights(weights: Vec<f64>) -> Result<Self> {
        let marks = (1..=weights.len()).map(|k| format!("e{k}")).collect();
        Self::new(marks, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn marks(&self) -> &[String] {
        &self.marks
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_intensity(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Every coefficient of the state equation and the cost.
///
/// Per-mark coefficients (`d`, `d_bar`, `n2`, `n2_bar`) hold one table per
/// mark. `g` and `g_bar` are constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub a: CoefficientTable,
    pub a_bar: CoefficientTable,
    pub b: CoefficientTable,
    pub b_bar: CoefficientTable,
    pub c: CoefficientTable,
    pub c_bar: CoefficientTable,
    pub d: Vec<CoefficientTable>,
    pub d_bar: Vec<CoefficientTable>,
    pub q: CoefficientTable,
    pub q_bar: CoefficientTable,
    pub n1: CoefficientTable,
    pub n1_bar: CoefficientTable,
    pub n2: Vec<CoefficientTable>,
    pub n2_bar: Vec<CoefficientTable>,
    pub n3: CoefficientTable,
    pub n3_bar: CoefficientTable,
    pub g: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
}

/// All coefficients frozen at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d: Vec<DMatrix<f64>>,
    pub d_bar: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub n1: DMatrix<f64>,
    pub n1_bar: DMatrix<f64>,
    pub n2: Vec<DMatrix<f64>>,
    pub n2_bar: Vec<DMatrix<f64>>,
    pub n3: DMatrix<f64>,
    pub n3_bar: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
}

impl CoefficientSet {
    pub fn zeros(n: usize, m: usize, marks: usize) -> Self {
        let nn = || CoefficientTable::zeros(n, n);
        Self {
            a: nn(),
            a_bar: nn(),
            b: CoefficientTable::zeros(n, m),
            b_bar: CoefficientTable::zeros(n, m),
            c: nn(),
            c_bar: nn(),
            d: (0..marks).map(|_| nn()).collect(),
            d_bar: (0..marks).map(|_| nn()).collect(),
            q: nn(),
            q_bar: nn(),
            n1: nn(),
            n1_bar: nn(),
            n2: (0..marks).map(|_| nn()).collect(),
            n2_bar: (0..marks).map(|_| nn()).collect(),
            n3: CoefficientTable::zeros(m, m),
            n3_bar: CoefficientTable::zeros(m, m),
            g: DMatrix::zeros(n, n),
            g_bar: DMatrix::zeros(n, n),
        }
    }

    /// Frozen coefficients at `s` (no horizon check).
    pub fn at(&self, s: f64) -> Coefficients {
        let v = |t: &CoefficientTable| t.value_at(s).clone();
        let vs = |ts: &[CoefficientTable]| ts.iter().map(|t| t.value_at(s).clone()).collect();
        Coefficients {
            a: v(&self.a),
            a_bar: v(&self.a_bar),
            b: v(&self.b),
            b_bar: v(&self.b_bar),
            c: v(&self.c),
            c_bar: v(&self.c_bar),
            d: vs(&self.d),
            d_bar: vs(&self.d_bar),
            q: v(&self.q),
            q_bar: v(&self.q_bar),
            n1: v(&self.n1),
            n1_bar: v(&self.n1_bar),
            n2: vs(&self.n2),
            n2_bar: vs(&self.n2_bar),
            n3: v(&self.n3),
            n3_bar: v(&self.n3_bar),
            g: self.g.clone(),
            g_bar: self.g_bar.clone(),
        }
    }

    /// Named view of every time-dependent table.
    pub fn tables(&self) -> Vec<(String, &CoefficientTable)> {
        let mut out: Vec<(String, &CoefficientTable)> = vec![
            ("A".into(), &self.a),
            ("A_bar".into(), &self.a_bar),
            ("B".into(), &self.b),
            ("B_bar".into(), &self.b_bar),
            ("C".into(), &self.c),
            ("C_bar".into(), &self.c_bar),
            ("Q".into(), &self.q),
            ("Q_bar".into(), &self.q_bar),
            ("N1".into(), &self.n1),
            ("N1_bar".into(), &self.n1_bar),
            ("N3".into(), &self.n3),
            ("N3_bar".into(), &self.n3_bar),
        ];
        for (name, list) in [
            ("D", &self.d),
            ("D_bar", &self.d_bar),
            ("N2", &self.n2),
            ("N2_bar", &self.n2_bar),
        ] {
            for (k, t) in list.iter().enumerate() {
                out.push((format!("{name}[{k}]"), t));
            }
        }
        out
    }

    /// Copy with every barred (mean-field) coefficient set to zero.
    pub fn without_mean_field(&self) -> Self {
        let zero_like = |t: &CoefficientTable| {
            let (r, c) = t.shape();
            CoefficientTable::zeros(r, c)
        };
        let mut out = self.clone();
        out.a_bar = zero_like(&self.a_bar);
        out.b_bar = zero_like(&self.b_bar);
        out.c_bar = zero_like(&self.c_bar);
        out.q_bar = zero_like(&self.q_bar);
        out.n1_bar = zero_like(&self.n1_bar);
        out.n3_bar = zero_like(&self.n3_bar);
        out.d_bar = self.d_bar.iter().map(zero_like).collect();
        out.n2_bar = self.n2_bar.iter().map(zero_like).collect();
        out.g_bar = DMatrix::zeros(self.g_bar.nrows(), self.g_bar.ncols());
        out
    }
}

/// Elementary function applied to the terminal Brownian value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFunction {
    Sin,
    Cos,
    Tanh,
    Exp,
    Square,
    Abs,
}

impl NoiseFunction {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            NoiseFunction::Sin => x.sin(),
            NoiseFunction::Cos => x.cos(),
            NoiseFunction::Tanh => x.tanh(),
            NoiseFunction::Exp => x.exp(),
            NoiseFunction::Square => x * x,
            NoiseFunction::Abs => x.abs(),
        }
    }
}

/// The terminal value as a function of the terminal noise state
/// `(W(T), Ñ_1(T), .., Ñ_K(T))`.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalCondition {
    Deterministic(Vec<f64>),
    /// `constant + brownian * W(T) + sum_k jumps[k] * Ñ_k(T)`
    Affine {
        constant: Vec<f64>,
        brownian: Vec<f64>,
        jumps: Vec<Vec<f64>>,
    },
    /// `constant + scale ⊙ f(W(T) + shift)`
    Functional {
        function: NoiseFunction,
        constant: Vec<f64>,
        scale: Vec<f64>,
        shift: f64,
    },
}

impl TerminalCondition {
    pub fn zero(n: usize) -> Self {
        TerminalCondition::Deterministic(vec![0.0; n])
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TerminalCondition::Deterministic(_) => "deterministic-vector",
            TerminalCondition::Affine { .. } => "affine-in-terminal-noise",
            TerminalCondition::Functional { .. } => "functional-of-noise",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TerminalCondition::Deterministic(v) => v.len(),
            TerminalCondition::Affine { constant, .. } => constant.len(),
            TerminalCondition::Functional { constant, .. } => constant.len(),
        }
    }

    /// True when the value does not depend on the noise.
    pub fn is_deterministic(&self) -> bool {
        match self {
            TerminalCondition::Deterministic(_) => true,
            TerminalCondition::Affine { brownian, jumps, .. } => {
                brownian.iter().chain(jumps.iter().flatten()).all(|v| *v == 0.0)
            }
            TerminalCondition::Functional { scale, .. } => scale.iter().all(|v| *v == 0.0),
        }
    }

    /// Writes the realized value for one particle into `out`.
    pub fn evaluate(&self, w: f64, ntilde: &[f64], out: &mut [f64]) {
        match self {
            TerminalCondition::Deterministic(v) => out.copy_from_slice(v),
            TerminalCondition::Affine {
                constant,
                brownian,
                jumps,
            } => {
                for j in 0..out.len() {
                    let mut x = constant[j] + brownian[j] * w;
                    for (k, load) in jumps.iter().enumerate() {
                        x += load[j] * ntilde[k];
                    }
                    out[j] = x;
                }
            }
            TerminalCondition::Functional {
                function,
                constant,
                scale,
                shift,
            } => {
                let f = function.apply(w + shift);
                for j in 0..out.len() {
                    out[j] = constant[j] + scale[j] * f;
                }
            }
        }
    }

    fn check(&self, n: usize, marks: usize) -> Result<()> {
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::Dimension(format!(
                "terminal {what} has length {got}, expected {want}"
            )))
        };
        match self {
            TerminalCondition::Deterministic(v) if v.len() != n => bad("value", v.len(), n),
            TerminalCondition::Affine {
                constant,
                brownian,
                jumps,
            } => {
                if constant.len() != n {
                    return bad("constant", constant.len(), n);
                }
                if brownian.len() != n {
                    return bad("brownian loading", brownian.len(), n);
                }
                if jumps.len() != marks {
                    return bad("jump loading list", jumps.len(), marks);
                }
                if let Some(j) = jumps.iter().find(|j| j.len() != n) {
                    return bad("jump loading", j.len(), n);
                }
                Ok(())
            }
            TerminalCondition::Functional { constant, scale, .. } => {
                if constant.len() != n {
                    return bad("constant", constant.len(), n);
                }
                if scale.len() != n {
                    return bad("scale", scale.len(), n);
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// One LQ problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub horizon: TimeHorizon,
    pub jumps: JumpMeasure,
    pub coeffs: CoefficientSet,
    pub terminal: TerminalCondition,
}

impl ProblemSpec {
    pub fn new(
        n: usize,
        m: usize,
        horizon: TimeHorizon,
        jumps: JumpMeasure,
        coeffs: CoefficientSet,
        terminal: TerminalCondition,
    ) -> Result<Self> {
        let spec = Self {
            n,
            m,
            horizon,
            jumps,
            coeffs,
            terminal,
        };
        spec.check_dimensions()?;
        Ok(spec)
    }

    pub fn marks(&self) -> usize {
        self.jumps.len()
    }

    pub fn check_dimensions(&self) -> Result<()> {
        let (n, m, k) = (self.n, self.m, self.jumps.len());
        if n == 0 || m == 0 {
            return Err(Error::Dimension(format!(
                "state and control dimensions must be positive, got n={n}, m={m}"
            )));
        }
        let c = &self.coeffs;
        for (list, name) in [(&c.d, "D"), (&c.d_bar, "D_bar"), (&c.n2, "N2"), (&c.n2_bar, "N2_bar")] {
            if list.len() != k {
                return Err(Error::Dimension(format!(
                    "{name} has {} marks, expected {k}",
                    list.len()
                )));
            }
        }
        for (name, table) in c.tables() {
            let want = match name.as_str() {
                "B" | "B_bar" => (n, m),
                "N3" | "N3_bar" => (m, m),
                _ => (n, n),
            };
            if table.shape() != want {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {}x{}",
                    table.shape().0,
                    table.shape().1,
                    want.0,
                    want.1
                )));
            }
        }
        for (name, g) in [("G", &c.g), ("G_bar", &c.g_bar)] {
            if g.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    g.nrows(),
                    g.ncols()
                )));
            }
        }
        self.terminal.check(n, k)
    }

    /// Coefficients at `s`, rejecting times outside the horizon.
    pub fn coefficients_at(&self, s: f64) -> Result<Coefficients> {
        self.horizon.check(s)?;
        Ok(self.coeffs.at(s))
    }

    /// Start time plus every coefficient breakpoint inside the horizon: one
    /// time per constant piece.
    pub fn piece_times(&self) -> Vec<f64> {
        let mut times = vec![self.horizon.t_start()];
        for (_, t) in self.coeffs.tables() {
            for b in t.breakpoints() {
                if self.horizon.contains(*b) {
                    times.push(b.clamp(self.horizon.t_start(), self.horizon.t_end()));
                }
            }
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    /// Deterministic terminal value and `C + C̄ = 0`, `D_k + D̄_k = 0`: the
    /// optimal control is then deterministic and the problem collapses to a
    /// deterministic LQ problem on the means.
    pub fn is_reducible(&self) -> bool {
        if !self.terminal.is_deterministic() {
            return false;
        }
        self.piece_times().iter().all(|&s| {
            let c = self.coeffs.at(s);
            let zero = |m: &DMatrix<f64>| m.iter().all(|v| *v == 0.0);
            zero(&(&c.c + &c.c_bar)) && c.d.iter().zip(&c.d_bar).all(|(d, db)| zero(&(d + db)))
        })
    }

    pub fn without_mean_field(&self) -> Self {
        let mut out = self.clone();
        out.coeffs = self.coeffs.without_mean_field();
        out
    }

    pub fn with_terminal(&self, terminal: TerminalCondition) -> Result<Self> {
        let mut out = self.clone();
        out.terminal = terminal;
        out.check_dimensions()?;
        Ok(out)
    }
}
