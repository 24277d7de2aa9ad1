//! Least-squares estimates at pilot positions.

use num_complex::Complex;
use pilotforge_nn::Scalar;

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::selection::PilotPattern;

/// Elementwise `y_p / x_p`.
pub fn ls_estimate<T: Scalar>(y: &[Complex<T>], x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
    if y.len() != x.len() {
        return Err(Error::Shape(format!(
            "{} received values for {} pilot symbols",
            y.len(),
            x.len()
        )));
    }
    y.iter()
        .zip(x)
        .enumerate()
        .map(|(index, (&yi, &xi))| {
            if xi.norm_sqr() > T::zero() {
                Ok(yi / xi)
            } else {
                Err(Error::ZeroPilot { index })
            }
        })
        .collect()
}

/// LS-resolved gains at the locations of a pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub pattern: PilotPattern,
    pub values: Vec<Complex<f64>>,
}

impl PilotObservation {
    pub fn new(pattern: PilotPattern, values: Vec<Complex<f64>>) -> Result<Self> {
        if values.len() != pattern.k() {
            return Err(Error::Shape(format!(
                "pattern has {} pilots but {} values were given",
                pattern.k(),
                values.len()
            )));
        }
        Ok(Self { pattern, values })
    }

    /// Reads a received grid at unit pilot symbols, where the LS estimate is the sample itself.
    pub fn from_grid<T: Scalar>(grid: &ComplexGrid<T>, pattern: &PilotPattern) -> Result<Self> {
        pattern.fits(grid)?;
        let values = pattern
            .indices()
            .iter()
            .map(|&(f, t)| {
                let v = grid.get(f, t);
                Complex::new(v.re.to_f64_lossy(), v.im.to_f64_lossy())
            })
            .collect();
        Self::new(pattern.clone(), values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_symbols_pass_through() {
        let y = vec![Complex::new(0.3, -1.0), Complex::new(2.0, 0.5)];
        assert_eq!(ls_estimate(&y, &[Complex::new(1.0, 0.0); 2]).unwrap(), y);
    }

    #[test]
    fn arithmetic_example() {
        let h = ls_estimate(&[Complex::new(2.0, 2.0)], &[Complex::new(2.0, 0.0)]).unwrap();
        assert_eq!(h, vec![Complex::new(1.0, 1.0)]);
    }

    #[test]
    fn zero_symbol_names_index() {
        let err = ls_estimate(
            &[Complex::new(1.0f64, 0.0); 3],
            &[
                Complex::new(1.0, 0.0),
                Complex::new(0.0, 0.0),
                Complex::new(1.0, 0.0),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ZeroPilot { index: 1 }));
    }
}
