//! Linear MMSE interpolation from empirical second-order statistics.
//!
//! Cache file layout, little-endian:
//!
//! ```text
//! magic     b"PFST"
//! version   u32
//! seed      u64 dataset seed
//! samples   u64
//! pattern   u32 length + utf8 pattern file text
//! hash      64 bytes hex SHA-256 of the pattern text
//! d, k      u32, u32
//! r_hp      d x k (re, im) f64, column-major
//! r_pp      k x k (re, im) f64, column-major
//! checksum  u32 CRC-32 of all preceding bytes
//! ```

use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex;

use super::ls::PilotObservation;
use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::selection::PilotPattern;

pub const MAGIC: &[u8; 4] = b"PFST";
pub const VERSION: u32 = 1;

/// Relative diagonal loading floor, as a fraction of the mean pilot power.
pub const LOADING_FLOOR: f64 = 1e-8;

type C64 = Complex<f64>;

/// `R_hp = E[h h_p^H]` and `R_pp = E[h_p h_p^H]` estimated over ideal channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatistics {
    pub pattern: PilotPattern,
    pub r_hp: DMatrix<C64>,
    pub r_pp: DMatrix<C64>,
    pub samples: usize,
    pub dataset_seed: u64,
}

const CHUNK: usize = 256;

/// Empirical correlations of the ideal grids of `dataset` at `pattern`.
pub fn fit_statistics(
    dataset: &ChannelDataset,
    pattern: &PilotPattern,
) -> Result<ChannelStatistics> {
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Config("cannot fit channel statistics on an empty dataset".into()))?;
    pattern.fits(&first.ideal)?;
    let (d, k, n) = (first.ideal.len(), pattern.k(), dataset.records.len());
    if n < k {
        warn!("fitting {k}x{k} pilot correlations from only {n} frames; the estimate is rank deficient");
    }
    let flat = pattern.flat_indices();
    let mut r_hp = DMatrix::<C64>::zeros(d, k);
    let mut r_pp = DMatrix::<C64>::zeros(k, k);
    for chunk in dataset.records.chunks(CHUNK) {
        let c = chunk.len();
        let h = DMatrix::<C64>::from_fn(d, c, |i, j| {
            let v = chunk[j].ideal.values()[i];
            C64::new(v.re as f64, v.im as f64)
        });
        let p = DMatrix::<C64>::from_fn(k, c, |i, j| h[(flat[i], j)]);
        let p_h = p.adjoint();
        r_hp += &h * &p_h;
        r_pp += &p * &p_h;
    }
    let scale = C64::new(1.0 / n as f64, 0.0);
    r_hp *= scale;
    r_pp *= scale;
    Ok(ChannelStatistics {
        pattern: pattern.clone(),
        r_hp,
        r_pp,
        samples: n,
        dataset_seed: dataset.header.seed,
    })
}

impl ChannelStatistics {
    pub fn k(&self) -> usize {
        self.r_pp.nrows()
    }

    pub fn d(&self) -> usize {
        self.r_hp.nrows()
    }

    /// Largest entrywise deviation of `R_pp` from its conjugate transpose.
    pub fn hermitian_error(&self) -> f64 {
        (&self.r_pp - self.r_pp.adjoint())
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 * (self.r_hp.len() + self.r_pp.len()) + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dataset_seed.to_le_bytes());
        out.extend_from_slice(&(self.samples as u64).to_le_bytes());
        let text = self.pattern.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(self.pattern.hash().as_bytes());
        out.extend_from_slice(&(self.d() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        for v in self.r_hp.iter().chain(self.r_pp.iter()) {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            what: "statistics cache",
            path: path.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = r.u64().ok_or_else(|| bad("truncated"))?;
        let samples = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let len = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let text = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated"))?)
            .map_err(|_| bad("pattern is not utf-8"))?;
        let pattern = PilotPattern::from_text(text).map_err(|e| bad(&e.to_string()))?;
        let hash = r.take(64).ok_or_else(|| bad("truncated"))?;
        if hash != pattern.hash().as_bytes() {
            return Err(bad("pattern hash mismatch"));
        }
        let d = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let k = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        if k != pattern.k() || d != pattern.nf() * pattern.nn() {
            return Err(bad("matrix dimensions disagree with the pattern"));
        }
        let mut read = |rows: usize, cols: usize| -> Option<DMatrix<C64>> {
            let mut vals = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                vals.push(C64::new(r.f64()?, r.f64()?));
            }
            Some(DMatrix::from_vec(rows, cols, vals))
        };
        let r_hp = read(d, k).ok_or_else(|| bad("truncated"))?;
        let r_pp = read(k, k).ok_or_else(|| bad("truncated"))?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            pattern,
            r_hp,
            r_pp,
            samples,
            dataset_seed: seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// `h = R_hp (R_pp + s I)^-1 h_p` with `s = max(noise_var, 1e-8 * trace(R_pp) / k)`.
pub fn mmse_estimate(
    obs: &PilotObservation,
    stats: &ChannelStatistics,
    noise_var: f64,
) -> Result<ComplexGrid<f64>> {
    if obs.pattern != stats.pattern {
        return Err(Error::Pattern(
            "observation and statistics use different pilot patterns".into(),
        ));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::Config(format!(
            "noise variance must be finite and non-negative, got {noise_var}"
        )));
    }
    let k = stats.k();
    let floor = LOADING_FLOOR * stats.r_pp.trace().re / k as f64;
    let loading = noise_var.max(floor);
    let mut a = stats.r_pp.clone();
    for i in 0..k {
        a[(i, i)] += C64::new(loading, 0.0);
    }
    let hp = DVector::from_column_slice(&obs.values);
    let z = match a.clone().cholesky() {
        Some(ch) => ch.solve(&hp),
        None => a.lu().solve(&hp).ok_or_else(|| {
            Error::Numerical("pilot correlation matrix is singular after loading".into())
        })?,
    };
    if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Numerical(
            "LMMSE solve produced non-finite weights".into(),
        ));
    }
    let h = &stats.r_hp * z;
    ComplexGrid::new(
        stats.pattern.nf(),
        stats.pattern.nn(),
        h.iter().copied().collect(),
    )
}
