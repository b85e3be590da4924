//! Checkpoint directories: one tensor file per parameter plus a JSON
//! manifest with names, shapes and the config hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::SoraModel;
use crate::anchors::TextHead;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::params::ParamStore;
use crate::tensor::{read_artifact, write_atomic, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub fusion: FusionMode,
    pub encoder: EncoderConfig,
    pub text: Vec<ParamEntry>,
    pub image: Vec<ParamEntry>,
}

impl Manifest {
    pub fn numel(&self) -> usize {
        self.text
            .iter()
            .chain(&self.image)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }
}

fn write_store(dir: &Path, store: &ParamStore) -> Result<Vec<ParamEntry>> {
    store
        .iter()
        .map(|(_, name, t)| {
            let file = format!("{name}.ten");
            t.save(&dir.join(&file))?;
            Ok(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_store(dir: &Path, entries: &[ParamEntry]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let path = dir.join(&e.file);
        let t = Tensor::load(&path)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format {
                path,
                reason: format!("shape {:?} differs from manifest {:?}", t.shape(), e.shape),
            });
        }
        store.insert(e.name.clone(), t);
    }
    Ok(store)
}

pub fn save_checkpoint(dir: &Path, model: &SoraModel, config_hash: &str) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        fusion: model.image.mode,
        encoder: model.image.cfg.clone(),
        text: write_store(dir, &model.text.params)?,
        image: write_store(dir, &model.params)?,
    };
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let m: Manifest = serde_json::from_slice(&read_artifact(&path)?).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("unsupported checkpoint version {}", m.version),
        });
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<(SoraModel, Manifest)> {
    let m = read_manifest(dir)?;
    let text = TextHead::from_params(read_store(dir, &m.text)?)?;
    let params = read_store(dir, &m.image)?;
    let model = SoraModel::from_params(&m.encoder, m.fusion, params, text)?;
    Ok((model, m))
}
