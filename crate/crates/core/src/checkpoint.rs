//! Tensor container: an 8-byte little-endian header length `N`, `N` bytes of UTF-8
//! JSON mapping each tensor name to `{shape, offset, length}` (byte offsets into the
//! payload), then the concatenated little-endian `f32` payloads.
//!
//! The reserved key `__metadata__` holds a string → string map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const METADATA_KEY: &str = "__metadata__";
pub const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HeaderValue {
    Tensor(Entry),
    Metadata(BTreeMap<String, String>),
}

/// Tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0;
        for (name, t) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Checkpoint(format!("tensor name `{METADATA_KEY}` is reserved")));
            }
            let length = t.len() * 4;
            header.insert(
                name.clone(),
                HeaderValue::Tensor(Entry {
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                }),
            );
            offset += length;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), HeaderValue::Metadata(self.metadata.clone()));
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let total = bytes.len();
        if total < 8 {
            return Err(Error::Checkpoint(format!(
                "file is {total} bytes, shorter than the 8-byte header length field"
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if n > total - 8 {
            return Err(Error::Checkpoint(format!(
                "header declares {n} bytes at offset 8 but only {} remain",
                total - 8
            )));
        }
        let header: BTreeMap<String, HeaderValue> = serde_json::from_slice(&bytes[8..8 + n])
            .map_err(|e| Error::Checkpoint(format!("bad header JSON at offset 8: {e}")))?;
        let payload = &bytes[8 + n..];
        let mut c = Container::default();
        for (name, value) in header {
            match value {
                HeaderValue::Metadata(m) if name == METADATA_KEY => c.metadata = m,
                HeaderValue::Tensor(e) if name != METADATA_KEY => {
                    let count: usize = e.shape.iter().product();
                    if e.length != count * 4 {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}`: length {} does not match shape {:?}",
                            e.length, e.shape
                        )));
                    }
                    let end = e.offset.checked_add(e.length).unwrap_or(usize::MAX);
                    if end > payload.len() {
                        return Err(Error::Checkpoint(format!(
                            "tensor `{name}` spans payload bytes {}..{} (file offsets {}..{}) but the payload ends at {} (file size {total})",
                            e.offset,
                            end,
                            8 + n + e.offset,
                            8 + n + end,
                            payload.len()
                        )));
                    }
                    let data = payload[e.offset..end]
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    c.tensors.insert(name, Tensor::new(&e.shape, data)?);
                }
                _ => {
                    return Err(Error::Checkpoint(format!("malformed header entry `{name}`")));
                }
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A trained model with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub epochs_run: usize,
}

impl ModelState {
    pub fn to_container(&self) -> Container {
        let mut metadata = BTreeMap::new();
        metadata.insert("format_version".into(), FORMAT_VERSION.into());
        metadata.insert("config".into(), serde_json::to_string(&self.config).expect("config serializes"));
        metadata.insert("config_hash".into(), self.config.config_hash());
        metadata.insert("epochs_run".into(), self.epochs_run.to_string());
        Container {
            tensors: self.model.params.clone().into_map(),
            metadata,
        }
    }

    /// Rebuilds the state, checking that the stored hash matches the stored config and
    /// the tensors match the architecture the config describes.
    pub fn from_container(c: Container) -> Result<Self> {
        let meta = |k: &str| {
            c.metadata
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key `{k}` missing")))
        };
        let config = RunConfig::from_json(meta("config")?)?;
        let stored = meta("config_hash")?;
        if *stored != config.config_hash() {
            return Err(Error::Checkpoint("stored config hash does not match the stored config".into()));
        }
        let epochs_run = meta("epochs_run")?
            .parse()
            .map_err(|_| Error::Checkpoint("epochs_run is not an integer".into()))?;
        let reference = Model::<f32>::init(config.model.clone(), 0)?;
        let expected: Vec<(&String, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&String, &[usize])> = c.tensors.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            let missing = expected.iter().find(|e| !found.contains(e));
            let extra = found.iter().find(|f| !expected.contains(f));
            return Err(Error::Checkpoint(format!(
                "tensors do not match the configured architecture (expected but absent: {missing:?}; unexpected: {extra:?})"
            )));
        }
        Ok(ModelState {
            model: Model {
                config: config.model.clone(),
                params: ParamStore::from_map(c.tensors),
            },
            config,
            epochs_run,
        })
    }
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    state.to_container().save(path)
}

/// Loads a checkpoint; with `expected_hash` set, a different config hash is an error
/// unless `force` is true.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: Option<&str>, force: bool) -> Result<ModelState> {
    let state = ModelState::from_container(Container::load(path)?)?;
    if let Some(h) = expected_hash {
        let found = state.config.config_hash();
        if h != found && !force {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint has {found}, expected {h} (use --force to override)"
            )));
        }
    }
    Ok(state)
}
