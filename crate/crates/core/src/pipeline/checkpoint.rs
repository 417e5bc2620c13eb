//! On-disk checkpoints.
//!
//! A checkpoint is a directory:
//!
//! - `manifest.json`: format tag, version, step, the training config, the
//!   backbone digest, optimizer step counts and one entry per array
//!   (`name`, `shape`, `dtype`, `offset`, `len`; offsets and lengths count
//!   `f32` elements).
//! - `tensors.bin`: every array back to back as little-endian `f32`,
//!   whatever the in-memory element type.
//! - `loss_log.csv`: the loss log up to `step`.
//!
//! Directories are written under a temporary name and renamed into place.

use crate::Real;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossBundle;
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT: &str = "huegan-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const LOSS_LOG: &str = "loss_log.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    #[serde(default)]
    pub backbone_sha256: String,
    /// Adam step counters keyed by optimizer (`generator`, `critic`).
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
    pub entries: Vec<Entry>,
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    #[serde(rename = "Lg")]
    pub lg: f64,
    #[serde(rename = "Lp")]
    pub lp: f64,
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "Lc")]
    pub lc: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl LogRow {
    pub fn new(step: u64, b: &LossBundle) -> Self {
        Self {
            step,
            lg: b.lg,
            lp: b.lp,
            l1: b.l1,
            lc: b.lc,
            total: b.total,
            d_loss: b.d_loss,
        }
    }
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        w.write_record(["step", "Lg", "Lp", "L1", "Lc", "total", "d_loss"])
            .map_err(|e| csv_error(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

/// Named arrays plus metadata, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Option<TrainConfig>,
    pub backbone_sha256: String,
    pub adam_steps: BTreeMap<String, u64>,
    pub tensors: BTreeMap<String, Tensor>,
    pub loss_log: Vec<LogRow>,
}

impl Checkpoint {
    /// A checkpoint holding only `store`, e.g. exported backbone weights.
    pub fn from_params(store: &ParamStore) -> Self {
        let mut c = Self {
            step: 0,
            config: None,
            backbone_sha256: String::new(),
            adam_steps: BTreeMap::new(),
            tensors: BTreeMap::new(),
            loss_log: Vec::new(),
        };
        c.insert_params("", store);
        c
    }

    pub fn insert_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.tensors
                .insert(format!("{prefix}{name}"), p.value.clone());
        }
    }

    /// Removes and returns entry `name`, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Takes every listed parameter into a store; all missing names are
    /// reported at once.
    pub fn take_params(
        &mut self,
        prefix: &str,
        shapes: &[(String, Vec<usize>)],
    ) -> Result<ParamStore> {
        let missing: Vec<String> = shapes
            .iter()
            .map(|(n, _)| format!("{prefix}{n}"))
            .filter(|n| !self.tensors.contains_key(n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing entries: {}",
                missing.join(", ")
            )));
        }
        let mut store = ParamStore::new();
        for (name, shape) in shapes {
            store.insert(name.clone(), self.take(&format!("{prefix}{name}"), shape)?);
        }
        Ok(store)
    }

    /// Entry names in manifest order.
    pub fn names(&self) -> BTreeSet<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    len: t.numel(),
                };
                offset += t.numel();
                e
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            config: self.config.clone(),
            backbone_sha256: self.backbone_sha256.clone(),
            adam_steps: self.adam_steps.clone(),
            entries,
        }
    }

    /// Writes the checkpoint to `dir`, replacing any previous one.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let base = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
        let old = parent.join(format!(".{base}.old-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_files(&tmp)?;
        if dir.exists() {
            std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    fn write_files(&self, dir: &Path) -> Result<()> {
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let path = dir.join(MANIFEST);
        std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))?;
        let mut bytes =
            Vec::with_capacity(4 * self.tensors.values().map(Tensor::numel).sum::<usize>());
        for t in self.tensors.values() {
            for v in t.data() {
                bytes.extend_from_slice(&(*v).to_le_bytes());
            }
        }
        let path = dir.join(TENSORS);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        write_loss_log(&dir.join(LOSS_LOG), &self.loss_log)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (no {MANIFEST})",
                dir.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported format {} v{}",
                path.display(),
                m.format,
                m.version
            )));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let path = dir.join(TENSORS);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint(format!("{}: truncated", path.display())));
        }
        let values: Vec<Real> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
            .collect();
        let mut tensors = BTreeMap::new();
        for e in &m.entries {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "entry `{}`: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let end = e
                .offset
                .checked_add(e.len)
                .filter(|&end| end <= values.len());
            let Some(end) = end else {
                return Err(Error::Checkpoint(format!(
                    "entry `{}` runs past the end of {TENSORS}",
                    e.name
                )));
            };
            let t = Tensor::new(&e.shape, values[e.offset..end].to_vec()).map_err(|_| {
                Error::Checkpoint(format!(
                    "entry `{}`: shape {:?} vs len {}",
                    e.name, e.shape, e.len
                ))
            })?;
            tensors.insert(e.name.clone(), t);
        }
        let log_path = dir.join(LOSS_LOG);
        let loss_log = if log_path.is_file() {
            read_loss_log(&log_path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            step: m.step,
            config: m.config,
            backbone_sha256: m.backbone_sha256,
            adam_steps: m.adam_steps,
            tensors,
            loss_log,
        })
    }
}

/// Accepts a checkpoint directory or a training output directory holding
/// `checkpoint/`.
pub fn resolve(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if !path.join(MANIFEST).is_file() && nested.join(MANIFEST).is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}
