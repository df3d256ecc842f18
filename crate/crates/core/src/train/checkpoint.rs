//! Checkpoint and model files.
//!
//! Layout: 8-byte magic, little-endian `u64` manifest length, a TOML
//! manifest (config echo, modality names, step, parameter names and
//! groups), then one tensor record per parameter followed by the optimizer
//! moments, all in manifest order. Exported models carry no optimizer state.

use std::io::{Cursor, Read};
use std::path::Path;

use mmseg_autodiff::io::{self as tio, Dtype};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::train::config::TrainConfig;
use crate::train::optim::OptimizerState;

const MAGIC: &[u8; 8] = b"MMSEGCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Dataset modality name of each model slot.
    pub modality_names: Vec<String>,
    pub step: usize,
    pub store: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: usize,
    modality_names: Vec<String>,
    optimizer_t: Option<u64>,
    moments: bool,
    config: TrainConfig,
    params: Vec<ParamMeta>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            step: self.step,
            modality_names: self.modality_names.clone(),
            optimizer_t: self.optimizer.as_ref().map(|o| o.t),
            moments: self.optimizer.as_ref().is_some_and(|o| !o.m.is_empty()),
            config: self.config.clone(),
            params: self
                .store
                .entries()
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    group: e.group,
                })
                .collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for e in self.store.entries() {
            tio::write_tensor(&mut out, &e.value, Dtype::F64)?;
        }
        if let Some(o) = self.optimizer.as_ref().filter(|o| !o.m.is_empty()) {
            for t in o.m.iter().chain(&o.v) {
                tio::write_tensor(&mut out, t, Dtype::F64)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let text = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest".into()))
            .and_then(|b| std::str::from_utf8(b).map_err(|e| bad(e.to_string())))?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut r = Cursor::new(&bytes[16 + len..]);
        let read = |r: &mut Cursor<&[u8]>| tio::read_tensor(r).map_err(|e| bad(e.to_string()));
        let mut store = ParamStore::new();
        for p in &manifest.params {
            store.insert(p.name.clone(), p.group, read(&mut r)?)?;
        }
        let optimizer = match manifest.optimizer_t {
            None => None,
            Some(t) => {
                let (mut m, mut v) = (Vec::new(), Vec::new());
                if manifest.moments {
                    for _ in 0..store.len() {
                        m.push(read(&mut r)?);
                    }
                    for _ in 0..store.len() {
                        v.push(read(&mut r)?);
                    }
                }
                Some(OptimizerState { t, m, v })
            }
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(origin, e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint {
            config: manifest.config,
            modality_names: manifest.modality_names,
            step: manifest.step,
            store,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Model slot holding dataset modality `name`.
    pub fn slot(&self, name: &str) -> Option<usize> {
        self.modality_names.iter().position(|n| n == name)
    }
}
