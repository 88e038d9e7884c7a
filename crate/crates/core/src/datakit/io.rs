//! Feature files.
//!
//! CSV: one record per line, `label,feat_0,...,feat_{D-1}`, optional header
//! (recognized by a non-numeric first field).
//!
//! Binary: `b"GCAF"`, version `u32`, record count `u64`, dim `u32`, then per
//! record a `u32` label followed by `D` float32 values; all little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledSample};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"GCAF";
pub const BINARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "binary" | "bin" => Ok(Self::Binary),
            other => Err(Error::config(
                "format",
                format!("unknown feature format `{other}` (expected csv or binary)"),
            )),
        }
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            reason: "file is empty".into(),
        });
    }
    let samples = match format {
        FeatureFormat::Csv => parse_csv(path, &bytes)?,
        FeatureFormat::Binary => parse_binary(path, &bytes)?,
    };
    Dataset::new(samples)
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let perr = |line: usize, reason: String| Error::Parse {
        path: path.into(),
        line,
        reason,
    };
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        if samples.is_empty() && dim.is_none() && first.parse::<f64>().is_err() {
            // Header row.
            dim = Some(fields.count());
            continue;
        }
        let label: u32 = first
            .parse()
            .map_err(|_| perr(line_no, format!("label `{first}` is not a class id")))?;
        if label == 0 {
            return Err(perr(
                line_no,
                "label 0 is not in the class map 1..=C".into(),
            ));
        }
        let features = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| perr(line_no, format!("feature `{f}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if features.is_empty() {
            return Err(perr(line_no, "record has no features".into()));
        }
        match dim {
            Some(d) if d != features.len() => {
                return Err(perr(
                    line_no,
                    format!("expected {d} features, found {}", features.len()),
                ))
            }
            _ => dim = Some(features.len()),
        }
        samples.push(LabeledSample { features, label });
    }
    if samples.is_empty() {
        return Err(perr(0, "no records".into()));
    }
    Ok(samples)
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<Vec<LabeledSample>> {
    let perr = |reason: String| Error::Parse {
        path: path.into(),
        line: 0,
        reason,
    };
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(perr("missing GCAF magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BINARY_VERSION {
        return Err(perr(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u32_at(16) as usize;
    if count == 0 || dim == 0 {
        return Err(perr("no records".into()));
    }
    let record = 4 + 4 * dim;
    let expected = 20 + count * record;
    if bytes.len() != expected {
        return Err(perr(format!(
            "expected {expected} bytes for {count} records of dim {dim}, found {}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for r in 0..count {
        let base = 20 + r * record;
        let label = u32_at(base);
        if label == 0 {
            return Err(perr(format!(
                "record {r}: label 0 is not in the class map 1..=C"
            )));
        }
        let features = (0..dim)
            .map(|k| {
                let o = base + 4 + 4 * k;
                f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
            })
            .collect();
        samples.push(LabeledSample { features, label });
    }
    Ok(samples)
}

pub fn write_features(ds: &Dataset, path: &Path, format: FeatureFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        FeatureFormat::Csv => {
            for s in ds.samples() {
                write!(w, "{}", s.label).map_err(io)?;
                for f in &s.features {
                    write!(w, ",{f}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        FeatureFormat::Binary => {
            w.write_all(BINARY_MAGIC).map_err(io)?;
            w.write_all(&BINARY_VERSION.to_le_bytes()).map_err(io)?;
            w.write_all(&(ds.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(ds.dim() as u32).to_le_bytes()).map_err(io)?;
            for s in ds.samples() {
                w.write_all(&s.label.to_le_bytes()).map_err(io)?;
                for &f in &s.features {
                    w.write_all(&(f as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}
