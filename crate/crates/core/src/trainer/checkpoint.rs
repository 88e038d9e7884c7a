//! Checkpoint directories: `manifest.json` plus one blob per parameter group.
//!
//! Blob layout, little-endian: `b"GCAP"`, version `u32`, element width in
//! bytes `u32` (8, IEEE float64), tensor count `u32`; per tensor a `u32` name
//! length, the UTF-8 name, `u32` rows, `u32` cols, then `rows·cols` values in
//! row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, Model, TrainConfig};
use crate::autodiff::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "gca-hng-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"GCAP";
const ELEMENT_BYTES: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub file: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub input_dim: usize,
    pub num_classes: u32,
    pub epoch: usize,
    pub metric_history: Vec<EpochRecord>,
    pub groups: Vec<GroupEntry>,
}

impl Manifest {
    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    pub fn matches_config(&self, cfg: &TrainConfig) -> bool {
        self.config_hash == config_hash(cfg)
    }
}

/// SHA-256 of the canonical JSON form of `cfg`, hex encoded.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn encode(tensors: &[(&str, &Mat)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ELEMENT_BYTES.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{} is truncated", self.file)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8], file: &str) -> Result<Vec<(String, Mat)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file,
    };
    if r.take(4)? != BLOB_MAGIC {
        return Err(Error::Checkpoint(format!("{file}: bad magic")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let width = r.u32()?;
    if width != ELEMENT_BYTES {
        return Err(Error::Checkpoint(format!(
            "{file}: unsupported element width {width}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{file}: tensor name is not UTF-8")))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Mat::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(format!("{file}: {e}")))?;
        out.push((name, m));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{file}: trailing bytes")));
    }
    Ok(out)
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    cfg: &TrainConfig,
    input_dim: usize,
    num_classes: u32,
    epoch: usize,
    history: &[EpochRecord],
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut groups = Vec::new();
    for (name, params) in model.groups() {
        let file = format!("{name}.bin");
        let tensors: Vec<(&str, &Mat)> =
            params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
        let path = dir.join(&file);
        fs::write(&path, encode(&tensors)).map_err(|e| Error::io(&path, e))?;
        groups.push(GroupEntry {
            name: name.to_string(),
            file,
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                })
                .collect(),
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        input_dim,
        num_classes,
        epoch,
        metric_history: history.to_vec(),
        groups,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint manifest",
            path.display()
        )));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Overwrites `model`'s parameters from `dir`. The checkpoint must hold
/// exactly the model's parameter groups and tensors.
pub fn load_into(dir: &Path, model: &mut Model) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let have = model.group_names();
    if manifest.group_names() != have {
        return Err(Error::Checkpoint(format!(
            "parameter groups differ: checkpoint has [{}], model has [{}]",
            manifest.group_names().join(", "),
            have.join(", ")
        )));
    }
    for ((name, params), entry) in model.groups_mut().into_iter().zip(&manifest.groups) {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut stored: BTreeMap<String, Mat> = decode(&bytes, &entry.file)?.into_iter().collect();
        if stored.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "group {name}: checkpoint has {} tensors, model has {}",
                stored.len(),
                params.len()
            )));
        }
        for p in params {
            let m = stored.remove(&p.name).ok_or_else(|| {
                Error::Checkpoint(format!("group {name}: missing tensor {}", p.name))
            })?;
            if m.dim() != p.value.dim() {
                return Err(Error::shape(
                    format!("checkpoint tensor {}", p.name),
                    format!("{:?}", p.value.dim()),
                    format!("{:?}", m.dim()),
                ));
            }
            p.value = m;
        }
    }
    Ok(manifest)
}

/// Rebuilds the model described by the manifest and loads its parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, Model)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(
        &manifest.config,
        manifest.input_dim,
        manifest.num_classes as usize,
    )?;
    let manifest = load_into(dir, &mut model)?;
    Ok((manifest, model))
}
