use num_complex::Complex;
use pilotforge_nn::Scalar;

use crate::error::{Error, Result};

/// Default OFDM frame: 72 subcarriers by 14 symbols.
pub const DEFAULT_NF: usize = 72;
pub const DEFAULT_NN: usize = 14;

/// Complex channel gains over an `nf x nn` time-frequency frame, row-major by subcarrier.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    nf: usize,
    nn: usize,
    values: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexGrid<T> {
    pub fn new(nf: usize, nn: usize, values: Vec<Complex<T>>) -> Result<Self> {
        if nf == 0 || nn == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got {nf}x{nn}"
            )));
        }
        if values.len() != nf * nn {
            return Err(Error::Shape(format!(
                "{nf}x{nn} grid needs {} values, got {}",
                nf * nn,
                values.len()
            )));
        }
        if let Some(i) = values
            .iter()
            .position(|v| !v.re.is_finite() || !v.im.is_finite())
        {
            return Err(Error::Degenerate(format!(
                "non-finite grid entry at index {i}"
            )));
        }
        Ok(Self { nf, nn, values })
    }

    pub fn zeros(nf: usize, nn: usize) -> Self {
        Self {
            nf,
            nn,
            values: vec![Complex::new(T::zero(), T::zero()); nf * nn],
        }
    }

    pub fn filled(nf: usize, nn: usize, value: Complex<T>) -> Self {
        Self {
            nf,
            nn,
            values: vec![value; nf * nn],
        }
    }

    pub fn nf(&self) -> usize {
        self.nf
    }

    pub fn nn(&self) -> usize {
        self.nn
    }

    /// Number of grid locations `nf * nn`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, subcarrier: usize, slot: usize) -> usize {
        subcarrier * self.nn + slot
    }

    pub fn get(&self, subcarrier: usize, slot: usize) -> Complex<T> {
        self.values[self.index(subcarrier, slot)]
    }

    pub fn set(&mut self, subcarrier: usize, slot: usize, value: Complex<T>) {
        let i = self.index(subcarrier, slot);
        self.values[i] = value;
    }

    pub fn values(&self) -> &[Complex<T>] {
        &self.values
    }

    pub fn mean_power(&self) -> T {
        let n = T::from_usize(self.values.len()).unwrap();
        self.values.iter().map(|v| v.norm_sqr()).sum::<T>() / n
    }

    /// Real plane followed by imaginary plane, each `nf x nn` row-major.
    pub fn to_planes(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(2 * self.values.len());
        out.extend(self.values.iter().map(|v| v.re));
        out.extend(self.values.iter().map(|v| v.im));
        out
    }

    pub fn from_planes(nf: usize, nn: usize, planes: &[T]) -> Result<Self> {
        let d = nf * nn;
        if planes.len() != 2 * d {
            return Err(Error::Shape(format!(
                "expected {} plane values for {nf}x{nn}, got {}",
                2 * d,
                planes.len()
            )));
        }
        let values = (0..d)
            .map(|i| Complex::new(planes[i], planes[d + i]))
            .collect();
        Self::new(nf, nn, values)
    }

    pub fn cast<U: Scalar>(&self) -> ComplexGrid<U> {
        ComplexGrid {
            nf: self.nf,
            nn: self.nn,
            values: self
                .values
                .iter()
                .map(|v| {
                    Complex::new(
                        U::from_f64_lossy(v.re.to_f64_lossy()),
                        U::from_f64_lossy(v.im.to_f64_lossy()),
                    )
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &ComplexGrid<T>) -> bool {
        self.nf == other.nf && self.nn == other.nn
    }
}
