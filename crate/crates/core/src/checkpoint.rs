//! Model checkpoints: a directory of ".tns" weight files plus a JSON
//! manifest carrying the full config, its content hash, and the tensor list.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::BcdModel;
use crate::tensor::{read_tns, write_tns};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ExperimentConfig,
    config_hash: String,
    classes: usize,
    tensors: Vec<String>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &mut BcdModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let entries = model.named_tensors();
    for (name, tensor) in &entries {
        write_tns(dir.join(format!("{name}.tns")), tensor)?;
    }
    let manifest = Manifest {
        config: model.config.clone(),
        config_hash: model.config.content_hash(),
        classes: model.classes,
        tensors: entries.into_iter().map(|(n, _)| n).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<BcdModel> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Error::Format {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.config.content_hash() != manifest.config_hash {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            reason: "config hash mismatch".to_string(),
        });
    }
    let mut model = BcdModel::new(&manifest.config, manifest.classes)?;
    let mut tensors = HashMap::new();
    for name in &manifest.tensors {
        tensors.insert(name.clone(), read_tns(dir.join(format!("{name}.tns")))?);
    }
    model.load_tensors(&tensors)?;
    Ok(model)
}
