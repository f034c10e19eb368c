//! Model files: a flat little-endian `f64` dump plus a JSON manifest that
//! names every parameter, its shape and its offset into the dump.

use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::diff::Matrix;
use crate::model::{ModelDims, SugarModel};

pub const MODEL_FILE: &str = "model.bin";
pub const MANIFEST_FILE: &str = "model.manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("model file mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the dump, in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dataset: String,
    pub fold: usize,
    /// Pooling ratio the agent ended at; used unchanged at test time.
    pub k: f64,
    pub dims: ModelDims,
    pub config: TrainConfig,
    pub byte_order: String,
    pub total_elements: usize,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model.bin` and `model.manifest.json` into `dir`.
pub fn save_model(
    dir: &Path,
    model: &SugarModel,
    config: &TrainConfig,
    dataset: &str,
    fold: usize,
    k: f64,
) -> Result<Manifest, PersistError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut bytes = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (name, m) in model.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
        for v in m.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        dataset: dataset.to_string(),
        fold,
        k,
        dims: model.dims,
        config: config.clone(),
        byte_order: "little".into(),
        total_elements: offset,
        tensors,
    };
    let bin = dir.join(MODEL_FILE);
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let man = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&man, text).map_err(io_err(&man))?;
    Ok(manifest)
}

/// Rebuilds the model saved by [`save_model`].
pub fn load_model(dir: &Path) -> Result<(SugarModel, Manifest), PersistError> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(io_err(&man_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| PersistError::Manifest {
        path: man_path.clone(),
        source,
    })?;
    let bin = dir.join(MODEL_FILE);
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != manifest.total_elements * 8 {
        return Err(PersistError::Mismatch(format!(
            "{} holds {} bytes, manifest expects {} values",
            bin.display(),
            bytes.len(),
            manifest.total_elements
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    // Parameter values are all overwritten below; the RNG only fixes shapes.
    let mut model = SugarModel::new(manifest.dims, &mut StepRng::new(0, 0));
    if model.store.len() != manifest.tensors.len() {
        return Err(PersistError::Mismatch(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for t in &manifest.tensors {
        let id = model
            .store
            .find(&t.name)
            .ok_or_else(|| PersistError::Mismatch(format!("unknown tensor {:?}", t.name)))?;
        let current = model.store.get(id);
        if current.shape() != (t.rows, t.cols) {
            return Err(PersistError::Mismatch(format!(
                "tensor {:?} is {}x{} in the manifest but {}x{} in the model",
                t.name,
                t.rows,
                t.cols,
                current.rows(),
                current.cols()
            )));
        }
        let end = t.offset + t.rows * t.cols;
        let slice = values
            .get(t.offset..end)
            .ok_or_else(|| PersistError::Mismatch(format!("tensor {:?} runs past the dump", t.name)))?;
        *model.store.get_mut(id) = Matrix::new(t.rows, t.cols, slice.to_vec()).expect("shape checked");
    }
    Ok((model, manifest))
}
