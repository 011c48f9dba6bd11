use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::Container;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::numcore::RngState;
use crate::Params64;

const KIND: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchConfig,
    step: u64,
    rng: Option<RngState>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Model parameters plus the training position they were saved at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params64,
    pub step: u64,
    pub rng: Option<RngState>,
    /// Free-form provenance (resolved config, stage name).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: Params64) -> Self {
        Self {
            params,
            step: 0,
            rng: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = CheckpointMeta {
            arch: self.params.arch.clone(),
            step: self.step,
            rng: self.rng,
            extra: self.extra.clone(),
        };
        let mut c = Container::new(KIND, serde_json::to_value(meta)?);
        for (name, t) in &self.params.tensors {
            c.push(name.clone(), t.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::format(format!("expected a checkpoint, found a '{}' file", c.kind)));
        }
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        meta.arch.validate().map_err(|e| Error::format(format!("checkpoint arch: {e}")))?;
        let params = Params64 {
            arch: meta.arch.clone(),
            tensors: c.tensors,
        };
        check_layout(&params, &meta.arch)?;
        Ok(Self {
            params,
            step: meta.step,
            rng: meta.rng,
            extra: meta.extra,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.to_container()?.encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::decode(bytes)?)
    }

    /// Parameters checked against an expected architecture.
    pub fn params_for(&self, arch: &ArchConfig) -> Result<Params64> {
        check_layout(&self.params, arch)?;
        let mut p = self.params.clone();
        p.arch = arch.clone();
        Ok(p)
    }
}

/// Every tensor of `arch` must be present with the expected shape.
fn check_layout(params: &Params64, arch: &ArchConfig) -> Result<()> {
    let layout = arch.layout();
    for (name, shape) in &layout {
        match params.get(name) {
            None => return Err(Error::format(format!("checkpoint lacks tensor '{name}'"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Some(_) => {}
        }
    }
    if params.tensors.len() != layout.len() {
        let extra = params
            .tensors
            .iter()
            .find(|(n, _)| !layout.iter().any(|(m, _)| m == n))
            .map(|(n, _)| n.clone())
            .unwrap_or_default();
        return Err(Error::format(format!("unexpected tensor '{extra}' in checkpoint")));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.to_container()?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_container(Container::read(path)?)
}

/// Hex SHA-256 over parameter names, shapes and raw values.
pub fn params_hash(params: &Params64) -> String {
    let mut h = Sha256::new();
    for (name, t) in &params.tensors {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
