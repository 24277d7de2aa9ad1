//! Discrete pilot patterns and the argmax gather layer.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use pilotforge_nn::Scalar;
use sha2::{Digest, Sha256};

use super::concrete::ConcreteSelector;
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;

/// Ordered set of distinct `(subcarrier, slot)` pilot locations on an `nf x nn` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotPattern {
    nf: usize,
    nn: usize,
    indices: Vec<(usize, usize)>,
}

impl PilotPattern {
    pub fn new(nf: usize, nn: usize, indices: Vec<(usize, usize)>) -> Result<Self> {
        if nf == 0 || nn == 0 {
            return Err(Error::Pattern(format!(
                "frame must be non-empty, got {nf}x{nn}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Pattern("pattern needs at least one pilot".into()));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &(f, t) in &indices {
            if f >= nf || t >= nn {
                return Err(Error::Pattern(format!(
                    "pilot ({f},{t}) lies outside the {nf}x{nn} frame"
                )));
            }
            if !seen.insert((f, t)) {
                return Err(Error::Pattern(format!("pilot ({f},{t}) appears twice")));
            }
        }
        Ok(Self { nf, nn, indices })
    }

    /// Builds a pattern from flat `f * nn + t` indices.
    pub fn from_flat(nf: usize, nn: usize, flat: &[usize]) -> Result<Self> {
        if let Some(&bad) = flat.iter().find(|&&i| i >= nf * nn) {
            return Err(Error::Pattern(format!(
                "flat index {bad} outside the {nf}x{nn} frame"
            )));
        }
        Self::new(nf, nn, flat.iter().map(|&i| (i / nn, i % nn)).collect())
    }

    pub fn nf(&self) -> usize {
        self.nf
    }

    pub fn nn(&self) -> usize {
        self.nn
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn flat_indices(&self) -> Vec<usize> {
        self.indices.iter().map(|&(f, t)| f * self.nn + t).collect()
    }

    pub fn distinct_subcarriers(&self) -> usize {
        self.indices
            .iter()
            .map(|p| p.0)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn distinct_slots(&self) -> usize {
        self.indices
            .iter()
            .map(|p| p.1)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn fits<T: Scalar>(&self, grid: &ComplexGrid<T>) -> Result<()> {
        if grid.nf() != self.nf || grid.nn() != self.nn {
            return Err(Error::Pattern(format!(
                "pattern is for a {}x{} frame but the grid is {}x{}",
                self.nf,
                self.nn,
                grid.nf(),
                grid.nn()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# pilot pattern nf={} nn={} k={}\n",
            self.nf,
            self.nn,
            self.k()
        );
        for &(f, t) in &self.indices {
            let _ = writeln!(s, "{f},{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Pattern("empty pattern file".into()))?;
        let fields = header
            .strip_prefix("# pilot pattern")
            .ok_or_else(|| Error::Pattern(format!("unrecognised pattern header `{header}`")))?;
        let (mut nf, mut nn, mut k) = (None, None, None);
        for kv in fields.split_whitespace() {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Pattern(format!("bad header field `{kv}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::Pattern(format!("bad header value `{kv}`")))?;
            match key {
                "nf" => nf = Some(value),
                "nn" => nn = Some(value),
                "k" => k = Some(value),
                _ => return Err(Error::Pattern(format!("unknown header field `{key}`"))),
            }
        }
        let (Some(nf), Some(nn), Some(k)) = (nf, nn, k) else {
            return Err(Error::Pattern("header must name nf, nn and k".into()));
        };
        let mut indices = Vec::with_capacity(k);
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = || -> Option<(usize, usize)> {
                let (f, t) = line.split_once(',')?;
                Some((f.trim().parse().ok()?, t.trim().parse().ok()?))
            };
            indices.push(parse().ok_or_else(|| {
                Error::Pattern(format!(
                    "line {}: expected `subcarrier,timeslot`, got `{line}`",
                    lineno + 2
                ))
            })?);
        }
        if indices.len() != k {
            return Err(Error::Pattern(format!(
                "header says k={k} but {} pilots are listed",
                indices.len()
            )));
        }
        Self::new(nf, nn, indices)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Format {
            what: "pattern",
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// SHA-256 of the text form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// One text row per subcarrier, `#` at pilots and `.` elsewhere.
    pub fn render_ascii(&self) -> String {
        let mut cells = vec![b'.'; self.nf * self.nn];
        for &(f, t) in &self.indices {
            cells[f * self.nn + t] = b'#';
        }
        let mut out = String::with_capacity(self.nf * (self.nn + 1));
        for row in cells.chunks(self.nn) {
            out.push_str(std::str::from_utf8(row).expect("ascii"));
            out.push('\n');
        }
        out
    }
}

/// Freezes a trained selector into `k` distinct locations.
///
/// Nodes are visited in order; a node whose argmax is already taken falls back to its
/// next-highest alpha. Returns the pattern and the number of such collisions.
pub fn extract_pattern<T: Scalar>(
    sel: &ConcreteSelector<T>,
    nf: usize,
    nn: usize,
) -> Result<(PilotPattern, usize)> {
    let (k, d) = (sel.k(), sel.d());
    if d != nf * nn {
        return Err(Error::Shape(format!(
            "selector covers {d} locations, frame has {}",
            nf * nn
        )));
    }
    let mut taken = vec![false; d];
    let mut flat = Vec::with_capacity(k);
    let mut collisions = 0;
    for i in 0..k {
        let row = sel.log_alpha_row(i);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let pick = order
            .iter()
            .copied()
            .find(|&j| !taken[j])
            .expect("k <= d leaves a free location");
        if pick != order[0] {
            collisions += 1;
        }
        taken[pick] = true;
        flat.push(pick);
    }
    Ok((PilotPattern::from_flat(nf, nn, &flat)?, collisions))
}

/// Reads the grid at each pilot: `u_i = (Re h[idx_i], Im h[idx_i])`.
pub fn argmax_gather<T: Scalar>(
    grid: &ComplexGrid<T>,
    pattern: &PilotPattern,
) -> Result<Vec<[T; 2]>> {
    pattern.fits(grid)?;
    Ok(pattern
        .indices()
        .iter()
        .map(|&(f, t)| {
            let v = grid.get(f, t);
            [v.re, v.im]
        })
        .collect())
}

/// Flattens gathered pilots into the decoder input layout `(re_0, im_0, re_1, ...)`.
pub fn interleave<T: Copy>(u: &[[T; 2]]) -> Vec<T> {
    u.iter().flat_map(|p| p.iter().copied()).collect()
}
