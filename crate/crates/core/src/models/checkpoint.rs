use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{GctError, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Named tensors of one or more networks plus a small header.
///
/// On disk this is a safetensors file; the header lives in its string metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub step: u64,
    /// Free-form description of what was saved, usually JSON.
    pub spec: String,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(seed: u64, step: u64, spec: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed,
            step,
            spec: spec.into(),
            tensors: HashMap::new(),
        }
    }

    /// Copies every tensor of `store` in under `prefix.`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.named_tensors() {
            self.tensors.insert(format!("{prefix}.{name}"), var.as_tensor().copy()?);
        }
        Ok(())
    }

    /// Loads the tensors saved under `prefix.` into `store`.
    pub fn restore_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let p = format!("{prefix}.");
        let sub: HashMap<String, Tensor> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|n| (n.to_string(), v.clone())))
            .collect();
        store.load_map(&sub)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), self.format_version.to_string());
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("spec".to_string(), self.spec.clone());
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let data: Vec<(&str, Tensor)> = names
            .into_iter()
            .map(|n| Ok((n.as_str(), self.tensors[n].contiguous()?)))
            .collect::<Result<_>>()?;
        let bytes = safetensors::serialize(data.iter().map(|(n, t)| (*n, t)), Some(meta))
            .map_err(|e| GctError::format(path, e.to_string()))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| GctError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| GctError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| GctError::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| GctError::format(path, e.to_string()))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| GctError::format(path, "missing checkpoint header"))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| GctError::format(path, format!("missing header field `{k}`")))
        };
        let parse = |k: &str| -> Result<u64> {
            field(k)?
                .parse::<u64>()
                .map_err(|e| GctError::format(path, format!("header field `{k}`: {e}")))
        };
        let format_version = parse("format_version")? as u32;
        if format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GctError::format(
                path,
                format!("unsupported checkpoint version {format_version}"),
            ));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Self {
            format_version,
            seed: parse("seed")?,
            step: parse("step")?,
            spec: field("spec")?,
            tensors,
        })
    }
}
