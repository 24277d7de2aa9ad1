use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::PilotPattern;

pub const CSV_HEADER: &str = "method,np,snr_db,mse_raw,mse_norm,frames";

/// One averaged MSE point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub np: usize,
    pub snr_db: f64,
    pub mse_raw: f64,
    pub mse_norm: f64,
    pub frames: usize,
}

impl ReportRow {
    pub fn validate(&self) -> Result<()> {
        if self.method.is_empty()
            || self
                .method
                .contains(|c: char| c == ',' || c.is_whitespace())
        {
            return Err(Error::Config(format!(
                "invalid method name `{}`",
                self.method
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config(format!(
                "{} row has zero frames",
                self.method
            )));
        }
        if !(self.mse_raw >= 0.0 && self.mse_norm >= 0.0)
            || !self.mse_raw.is_finite()
            || !self.mse_norm.is_finite()
        {
            return Err(Error::Numerical(format!(
                "{} row has invalid MSE",
                self.method
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config(format!(
                "{} row has non-finite SNR",
                self.method
            )));
        }
        Ok(())
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        row.validate()?;
        w.serialize(row)
            .map_err(|e| Error::Numerical(e.to_string()))?;
    }
    if rows.is_empty() {
        return Ok(format!("{CSV_HEADER}\n"));
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str, path: &str) -> Result<Vec<ReportRow>> {
    let bad = |reason: String| Error::Format {
        what: "report CSV",
        path: path.to_string(),
        reason,
    };
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(bad(format!("header must be `{CSV_HEADER}`")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<ReportRow>().enumerate() {
        let row = rec.map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        row.validate()
            .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, rows_to_csv(rows)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    rows_from_csv(&text, &path.display().to_string())
}

/// Plot-ready `(file name, contents)` pairs, one per (figure, method).
///
/// A method with several SNRs at one pilot count becomes an `snr-np<N>` curve;
/// a method with several pilot counts at one SNR becomes an `np-snr<S>` curve.
pub fn figure_files(rows: &[ReportRow]) -> Vec<(String, String)> {
    let mut by_np: BTreeMap<(String, usize), Vec<&ReportRow>> = BTreeMap::new();
    let mut by_snr: BTreeMap<(String, String), Vec<&ReportRow>> = BTreeMap::new();
    for row in rows {
        by_np
            .entry((row.method.clone(), row.np))
            .or_default()
            .push(row);
        by_snr
            .entry((row.method.clone(), format!("{}", row.snr_db)))
            .or_default()
            .push(row);
    }
    let mut files = Vec::new();
    for ((method, np), mut pts) in by_np {
        if pts.len() < 2 {
            continue;
        }
        pts.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        let mut text = format!("# {method}, np={np}\n# snr_db mse_raw mse_norm frames\n");
        for p in pts {
            text.push_str(&format!(
                "{} {:e} {:e} {}\n",
                p.snr_db, p.mse_raw, p.mse_norm, p.frames
            ));
        }
        files.push((format!("snr-np{np}-{method}.dat"), text));
    }
    for ((method, snr), mut pts) in by_snr {
        if pts.len() < 2 {
            continue;
        }
        pts.sort_by_key(|p| p.np);
        let mut text = format!("# {method}, snr_db={snr}\n# np mse_raw mse_norm frames\n");
        for p in pts {
            text.push_str(&format!(
                "{} {:e} {:e} {}\n",
                p.np, p.mse_raw, p.mse_norm, p.frames
            ));
        }
        files.push((format!("np-snr{snr}-{method}.dat"), text));
    }
    files
}

/// Writes figure data files and ASCII pattern renderings into `out`; returns the written paths.
pub fn cmd_report(
    csv: &Path,
    patterns: &[(String, PilotPattern)],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let rows = read_csv(csv)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (name, text) in figure_files(&rows) {
        emit(name, text)?;
    }
    for (label, pattern) in patterns {
        let text = format!(
            "# {label}: {} pilots on {}x{} (rows are subcarriers, columns are symbols)\n{}",
            pattern.k(),
            pattern.nf(),
            pattern.nn(),
            pattern.render_ascii()
        );
        emit(format!("pattern-{label}.txt"), text)?;
    }
    Ok(written)
}
