use nalgebra::DMatrix;

use super::grid::TimeHorizon;
use crate::error::{Error, Result};

/// A deterministic matrix-valued coefficient, piecewise constant in time.
///
/// Piece `j` covers `[breakpoints[j-1], breakpoints[j])`, so the value at a
/// breakpoint is the one of the piece starting there.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientTable {
    Constant(DMatrix<f64>),
    Piecewise {
        breakpoints: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl CoefficientTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CoefficientTable::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<DMatrix<f64>>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} breakpoints need {} values, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("breakpoints must be strictly increasing".into()));
        }
        let shape = values[0].shape();
        if values.iter().any(|v| v.shape() != shape) {
            return Err(Error::Dimension(
                "all pieces of a coefficient must share one shape".into(),
            ));
        }
        if breakpoints.is_empty() {
            return Ok(CoefficientTable::Constant(values.into_iter().next().unwrap()));
        }
        Ok(CoefficientTable::Piecewise { breakpoints, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientTable::Constant(m) => m.shape(),
            CoefficientTable::Piecewise { values, .. } => values[0].shape(),
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        match self {
            CoefficientTable::Constant(_) => &[],
            CoefficientTable::Piecewise { breakpoints, .. } => breakpoints,
        }
    }

    pub fn pieces(&self) -> &[DMatrix<f64>] {
        match self {
            CoefficientTable::Constant(m) => std::slice::from_ref(m),
            CoefficientTable::Piecewise { values, .. } => values,
        }
    }

    /// Value at `s` without a horizon check.
    pub fn value_at(&self, s: f64) -> &DMatrix<f64> {
        match self {
            CoefficientTable::Constant(m) => m,
            CoefficientTable::Piecewise { breakpoints, values } => {
                let idx = breakpoints.partition_point(|b| *b <= s);
                &values[idx]
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.pieces().iter().all(|m| m.iter().all(|v| *v == 0.0))
    }
}

/// Samples `table` at `s`, rejecting times outside `horizon`.
pub fn sample_coefficient<'a>(table: &'a CoefficientTable, horizon: &TimeHorizon, s: f64) -> Result<&'a DMatrix<f64>> {
    horizon.check(s)?;
    Ok(table.value_at(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn constant_table() {
        let h = TimeHorizon::new(0.0, 1.0).unwrap();
        let t = CoefficientTable::Constant(scalar(2.0));
        assert_eq!(sample_coefficient(&t, &h, 0.3).unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn breakpoint_belongs_to_next_piece() {
        let h = TimeHorizon::new(0.0, 1.0).unwrap();
        let t = CoefficientTable::piecewise(vec![0.5], vec![scalar(1.0), scalar(3.0)]).unwrap();
        assert_eq!(sample_coefficient(&t, &h, 0.5).unwrap()[(0, 0)], 3.0);
        assert_eq!(sample_coefficient(&t, &h, 0.49).unwrap()[(0, 0)], 1.0);
        assert_eq!(sample_coefficient(&t, &h, 0.0).unwrap()[(0, 0)], 1.0);
        assert_eq!(sample_coefficient(&t, &h, 1.0).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn outside_horizon_is_an_error() {
        let h = TimeHorizon::new(0.0, 1.0).unwrap();
        let t = CoefficientTable::Constant(scalar(2.0));
        assert!(matches!(
            sample_coefficient(&t, &h, 1.5),
            Err(Error::OutsideHorizon { .. })
        ));
    }

    #[test]
    fn piecewise_validation() {
        assert!(CoefficientTable::piecewise(vec![0.5], vec![scalar(1.0)]).is_err());
        assert!(CoefficientTable::piecewise(vec![0.5, 0.4], vec![scalar(1.0), scalar(2.0), scalar(3.0)]).is_err());
    }
}
