//! Checkpoint directories: `manifest.json` (config + tensor index) and one
//! SFTN file per named parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::Model;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::sftn;

pub const CHECKPOINT_FORMAT: &str = "blockflow-checkpoint";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Parameter name -> file name relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = ModelParams::<f32>::names(model.config.layers);
    let mut index = BTreeMap::new();
    for (name, tensor) in names.iter().zip(model.params.tensors()) {
        let file = format!("{name}.sftn");
        sftn::write_matrix(&dir.join(&file), tensor)?;
        index.insert(name.clone(), file);
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        config: model.config.clone(),
        tensors: index,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(&path, format!("unexpected format {:?}", manifest.format)));
    }
    manifest
        .config
        .validate()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    // Shapes come from a fresh init; values are overwritten below.
    let mut params = ModelParams::init(&manifest.config, 0);
    let names = ModelParams::<f32>::names(manifest.config.layers);
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let file = manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::format(&path, format!("missing tensor {name}")))?;
        let tensor_path = dir.join(file);
        let m = sftn::read_matrix(&tensor_path)?;
        if m.shape() != slot.shape() {
            return Err(Error::format(
                &tensor_path,
                format!("shape {:?}, expected {:?}", m.shape(), slot.shape()),
            ));
        }
        *slot = m;
    }
    Model::new(manifest.config, params)
}
