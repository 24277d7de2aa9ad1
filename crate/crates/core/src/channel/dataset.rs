//! Persisted (ideal, noisy, SNR) channel datasets.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! magic     b"PFDS"
//! version   u32
//! profile   n_taps u32, delays f64 x n, powers_db f64 x n,
//!           carrier f64, spacing f64, symbol f64, speed f64
//! nf, nn    u32, u32
//! count     u32
//! snr list  n u32, f32 x n
//! seed      u64
//! records   count x (ideal (re, im) f32 x nf*nn, noisy (re, im) f32 x nf*nn, snr_db f32)
//! checksum  u32 CRC-32 of all preceding bytes
//! ```

use std::path::Path;

use num_complex::Complex;
use rayon::prelude::*;

use super::fading::{add_awgn, generate_channel};
use super::profile::ChannelProfile;
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::seed;

pub const MAGIC: &[u8; 4] = b"PFDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub profile: ChannelProfile,
    pub nf: usize,
    pub nn: usize,
    pub count: usize,
    pub snr_list: Vec<f32>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRecord {
    pub ideal: ComplexGrid<f32>,
    pub noisy: ComplexGrid<f32>,
    pub snr_db: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDataset {
    pub header: DatasetHeader,
    pub records: Vec<ChannelRecord>,
}

/// Record counts for the train / validation / test splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: ChannelDataset,
    pub val: ChannelDataset,
    pub test: ChannelDataset,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl DatasetSplits {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &ChannelDataset)> {
        SPLIT_NAMES
            .into_iter()
            .zip([&self.train, &self.val, &self.test])
    }
}

/// Generates one split; record `i` uses SNR `snr_list[i % len]`.
pub fn generate_split(
    profile: &ChannelProfile,
    nf: usize,
    nn: usize,
    count: usize,
    snr_list: &[f64],
    seed: u64,
) -> Result<ChannelDataset> {
    profile.validate()?;
    if count == 0 {
        return Err(Error::Config(
            "dataset record count must be positive".into(),
        ));
    }
    if snr_list.is_empty() {
        return Err(Error::Config("SNR list must not be empty".into()));
    }
    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let ideal = generate_channel(profile, nf, nn, seed::derive(seed, &[i as u64, 0]))?;
            let snr = snr_list[i % snr_list.len()];
            let noisy = add_awgn(&ideal, snr, seed::derive(seed, &[i as u64, 1]))?;
            Ok(ChannelRecord {
                ideal: ideal.cast(),
                noisy: noisy.cast(),
                snr_db: snr as f32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelDataset {
        header: DatasetHeader {
            profile: profile.clone(),
            nf,
            nn,
            count,
            snr_list: snr_list.iter().map(|&s| s as f32).collect(),
            seed,
        },
        records,
    })
}

/// Train, validation and test splits from independent seed streams.
pub fn generate_dataset(
    profile: &ChannelProfile,
    nf: usize,
    nn: usize,
    counts: SplitCounts,
    snr_list: &[f64],
    seed: u64,
) -> Result<DatasetSplits> {
    let split = |i: u64, n: usize| {
        generate_split(
            profile,
            nf,
            nn,
            n,
            snr_list,
            seed::derive(seed, &[0xDA7A, i]),
        )
    };
    Ok(DatasetSplits {
        train: split(0, counts.train)?,
        val: split(1, counts.val)?,
        test: split(2, counts.test)?,
    })
}

impl ChannelDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn grid_len(&self) -> usize {
        self.header.nf * self.header.nn
    }

    /// Records whose SNR satisfies `keep`; the header SNR list is narrowed to match.
    pub fn filter_snr(&self, keep: impl Fn(f32) -> bool) -> ChannelDataset {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| keep(r.snr_db))
            .cloned()
            .collect();
        ChannelDataset {
            header: DatasetHeader {
                count: records.len(),
                snr_list: self
                    .header
                    .snr_list
                    .iter()
                    .copied()
                    .filter(|&s| keep(s))
                    .collect(),
                ..self.header.clone()
            },
            records,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.count != self.records.len() {
            return Err(Error::Config(format!(
                "header declares {} records but dataset holds {}",
                h.count,
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.ideal.nf() != h.nf || r.ideal.nn() != h.nn || !r.ideal.same_shape(&r.noisy) {
                return Err(Error::Shape(format!(
                    "record {i} does not match the {}x{} header",
                    h.nf, h.nn
                )));
            }
            if !h.snr_list.contains(&r.snr_db) {
                return Err(Error::Config(format!(
                    "record {i} has SNR {} not in the header list",
                    r.snr_db
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + self.records.len() * (h.nf * h.nn * 16 + 4));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, h.profile.delays_s.len() as u32);
        for v in h.profile.delays_s.iter().chain(&h.profile.powers_db) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [
            h.profile.carrier_hz,
            h.profile.subcarrier_spacing_hz,
            h.profile.symbol_duration_s,
            h.profile.speed_mps,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, h.nf as u32);
        put_u32(&mut out, h.nn as u32);
        put_u32(&mut out, h.count as u32);
        put_u32(&mut out, h.snr_list.len() as u32);
        for s in &h.snr_list {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&h.seed.to_le_bytes());
        for r in &self.records {
            for grid in [&r.ideal, &r.noisy] {
                for v in grid.values() {
                    out.extend_from_slice(&v.re.to_le_bytes());
                    out.extend_from_slice(&v.im.to_le_bytes());
                }
            }
            out.extend_from_slice(&r.snr_db.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let fail = |reason: &str| Error::Format {
            what: "dataset",
            path: path.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 8 {
            return Err(fail("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err(fail("checksum mismatch"));
        }
        let mut r = Cursor { buf: body, pos: 0 };
        let truncated = || fail("truncated");
        if r.take(4).ok_or_else(truncated)? != MAGIC {
            return Err(fail("bad magic bytes"));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let taps = r.u32().ok_or_else(truncated)? as usize;
        let mut read_f64s = |n: usize| (0..n).map(|_| r.f64()).collect::<Option<Vec<_>>>();
        let delays_s = read_f64s(taps).ok_or_else(truncated)?;
        let powers_db = read_f64s(taps).ok_or_else(truncated)?;
        let tail = read_f64s(4).ok_or_else(truncated)?;
        let profile = ChannelProfile {
            delays_s,
            powers_db,
            carrier_hz: tail[0],
            subcarrier_spacing_hz: tail[1],
            symbol_duration_s: tail[2],
            speed_mps: tail[3],
        };
        let nf = r.u32().ok_or_else(truncated)? as usize;
        let nn = r.u32().ok_or_else(truncated)? as usize;
        let count = r.u32().ok_or_else(truncated)? as usize;
        let n_snr = r.u32().ok_or_else(truncated)? as usize;
        let snr_list = (0..n_snr)
            .map(|_| r.f32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(truncated)?;
        let seed = r.u64().ok_or_else(truncated)?;
        let d = nf * nn;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let mut grid = || -> Result<ComplexGrid<f32>> {
                let vals = (0..d)
                    .map(|_| Some(Complex::new(r.f32()?, r.f32()?)))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(truncated)?;
                ComplexGrid::new(nf, nn, vals)
            };
            let ideal = grid()?;
            let noisy = grid()?;
            let snr_db = r.f32().ok_or_else(truncated)?;
            records.push(ChannelRecord {
                ideal,
                noisy,
                snr_db,
            });
        }
        if r.pos != body.len() {
            return Err(fail("unexpected bytes after records"));
        }
        let ds = ChannelDataset {
            header: DatasetHeader {
                profile,
                nf,
                nn,
                count,
                snr_list,
                seed,
            },
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}
