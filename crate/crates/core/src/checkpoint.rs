//! On-disk container for base weights and adapters.
//!
//! A checkpoint is a directory holding `config.json` (the model
//! configuration), `manifest.json` (one entry per tensor: name, shape,
//! component, blob file and byte offset) and one little-endian `f32` blob per
//! component, `base.bin` and `adapters.bin`. Adapters can live in a directory
//! of their own; their manifest header records the adapter layout and the
//! configuration hash of the base they were trained against.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayout, AdapterSet, INPUT_PROMPT};
use crate::error::{Error, Result};
use crate::model::{LipReader, ModelConfig};
use crate::params::{decode_f32_le, Component, ParamSet};
use crate::tensor::Tensor;

pub const FORMAT: &str = "lipadapt-checkpoint/1";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_BLOB: &str = "base.bin";
pub const ADAPTER_BLOB: &str = "adapters.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub blob: String,
    /// Byte offset into `blob`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterHeader {
    pub layout: AdapterLayout,
    pub base_config_hash: String,
    pub base_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterHeader>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        if m.format != FORMAT {
            return Err(Error::Format {
                what: MANIFEST_FILE.into(),
                detail: format!("unsupported format {:?}", m.format),
            });
        }
        Ok(m)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn entries_for(params: &ParamSet, component: Component, blob: &str) -> Vec<ManifestEntry> {
    let mut offset = 0;
    params
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                component,
                blob: blob.to_string(),
                offset,
            };
            offset += t.numel() * 4;
            e
        })
        .collect()
}

/// Writes `params` into `dir`, replacing any previous entries of the same
/// component and keeping the others.
fn write_component(
    dir: &Path,
    config: &ModelConfig,
    params: &ParamSet,
    component: Component,
    update: impl FnOnce(&mut Manifest),
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = match component {
        Component::Base => BASE_BLOB,
        Component::Adapter => ADAPTER_BLOB,
    };
    let config_hash = config.hash();
    let mut manifest = match Manifest::read(dir) {
        Ok(m) if m.config_hash == config_hash => m,
        _ => Manifest {
            format: FORMAT.into(),
            config_hash,
            base_hash: None,
            adapter: None,
            entries: Vec::new(),
        },
    };
    manifest.entries.retain(|e| e.component != component);
    manifest.entries.extend(entries_for(params, component, blob));
    update(&mut manifest);
    write_file(&dir.join(blob), &params.to_blob())?;
    write_file(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(config)?.as_bytes())?;
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Reads every tensor of `component` listed in the manifest.
fn read_component(dir: &Path, manifest: &Manifest, component: Component) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    let mut blobs: std::collections::BTreeMap<String, Vec<u8>> = Default::default();
    for e in manifest.entries.iter().filter(|e| e.component == component) {
        if !blobs.contains_key(&e.blob) {
            let path = dir.join(&e.blob);
            blobs.insert(e.blob.clone(), fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
        let bytes = &blobs[&e.blob];
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > bytes.len() {
            return Err(Error::Format {
                what: e.blob.clone(),
                detail: format!("{} needs bytes {}..{end}, blob has {}", e.name, e.offset, bytes.len()),
            });
        }
        params.insert(&e.name, Tensor::new(e.shape.clone(), decode_f32_le(&bytes[e.offset..end])));
    }
    Ok(params)
}

/// Writes the base weights and configuration.
pub fn save_model(dir: &Path, model: &LipReader) -> Result<()> {
    let hash = model.base_hash();
    write_component(dir, model.config(), model.params(), Component::Base, |m| {
        m.base_hash = Some(hash)
    })
}

/// Loads and shape-checks a base model; the stored base hash must match.
pub fn load_model(dir: &Path) -> Result<LipReader> {
    let manifest = Manifest::read(dir)?;
    let config: ModelConfig = read_json(&dir.join(CONFIG_FILE))?;
    config.validate()?;
    let params = read_component(dir, &manifest, Component::Base)?;
    if params.is_empty() {
        return Err(Error::Format {
            what: dir.join(MANIFEST_FILE).display().to_string(),
            detail: "no base parameters".into(),
        });
    }
    let model = LipReader::from_params(config, params)?;
    if let Some(want) = &manifest.base_hash {
        if *want != model.base_hash() {
            return Err(Error::Format {
                what: BASE_BLOB.into(),
                detail: format!("base hash {} does not match manifest {want}", model.base_hash()),
            });
        }
    }
    Ok(model)
}

/// Writes adapters bound to `base`.
pub fn save_adapters(dir: &Path, adapters: &AdapterSet, base: &LipReader) -> Result<()> {
    let header = AdapterHeader {
        layout: adapters.layout().clone(),
        base_config_hash: base.config().hash(),
        base_hash: base.base_hash(),
    };
    write_component(dir, base.config(), adapters.params(), Component::Adapter, |m| {
        m.adapter = Some(header)
    })
}

/// Loads adapters and validates them against `config`: every tensor must
/// have the shape `config` implies (the error names the first offending
/// parameter), and the recorded base configuration must be `config`.
pub fn load_adapters(dir: &Path, config: &ModelConfig) -> Result<AdapterSet> {
    let manifest = Manifest::read(dir)?;
    let header = manifest.adapter.clone().ok_or_else(|| Error::Format {
        what: dir.join(MANIFEST_FILE).display().to_string(),
        detail: "no adapter header".into(),
    })?;
    let params = read_component(dir, &manifest, Component::Adapter)?;
    if let Some(p) = params.get(INPUT_PROMPT) {
        if p.rows() != header.layout.n_prompt {
            return Err(Error::shape(
                INPUT_PROMPT,
                format!("{} rows per header", header.layout.n_prompt),
                p.rows(),
            ));
        }
    }
    let set = AdapterSet::from_parts(header.layout, params);
    set.validate(config)?;
    if header.base_config_hash != config.hash() {
        return Err(Error::Config(format!(
            "adapters were trained against base configuration {}, bound model has {}",
            header.base_config_hash,
            config.hash()
        )));
    }
    Ok(set)
}

/// True when `dir` holds adapters.
pub fn has_adapters(dir: &Path) -> bool {
    Manifest::read(dir).map(|m| m.adapter.is_some()).unwrap_or(false)
}
