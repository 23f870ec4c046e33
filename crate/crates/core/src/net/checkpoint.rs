//! Checkpoints are directories holding `manifest.json` and one raw
//! little-endian f32 file per named tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, Model, ModelConfig, Tensor};
use crate::error::{Error, Result};
use crate::languages::{LanguageSpec, TaskKind};

/// What the model was trained for.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub language: Option<LanguageSpec>,
    pub task: Option<TaskKind>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    file: String,
}

pub fn save_checkpoint(dir: &Path, model: &Model<f32>, meta: &ModelMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let c = model.config();
    let mut tensors = Vec::new();
    for t in Tensor::ALL {
        let file = format!("{}.bin", t.name());
        let bytes: Vec<u8> = model.tensor(t).iter().flat_map(|x| x.to_le_bytes()).collect();
        std::fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry {
            name: t.name().to_string(),
            shape: t.shape(c),
            file,
        });
    }
    let manifest = Manifest {
        config: c.clone(),
        meta: meta.clone(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let parse_err = |message: String| Error::Parse {
        path: manifest_path.clone(),
        message,
    };
    let text = std::fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let c = manifest.config;
    c.validate()?;
    let layout = Layout::new(&c);
    let mut params = vec![0.0f32; layout.total()];
    for t in Tensor::ALL {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == t.name())
            .ok_or_else(|| parse_err(format!("missing tensor {}", t.name())))?;
        if entry.shape != t.shape(&c) {
            return Err(parse_err(format!(
                "tensor {} has shape {:?}, expected {:?}",
                t.name(),
                entry.shape,
                t.shape(&c)
            )));
        }
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let slot = &mut params[layout.range(&c, t)];
        if bytes.len() != slot.len() * 4 {
            return Err(Error::Parse {
                path: dir.join(&entry.file),
                message: format!("expected {} bytes, found {}", slot.len() * 4, bytes.len()),
            });
        }
        for (p, chunk) in slot.iter_mut().zip(bytes.chunks_exact(4)) {
            *p = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(Checkpoint {
        model: Model::from_params(c, params)?,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::OutputHead;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(ModelConfig::new(2, 3, OutputHead::Sigmoid), 42).unwrap();
        let meta = ModelMeta {
            language: Some(LanguageSpec::Dyck(1)),
            task: Some(TaskKind::NextChar),
            seed: Some(42),
        };
        save_checkpoint(dir.path(), &model, &meta).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.meta, meta);
        let bits = |m: &Model<f32>| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.model), bits(&model));
        assert_eq!(back.model.config(), model.config());
    }

    #[test]
    fn truncated_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(ModelConfig::new(2, 2, OutputHead::Softmax), 1).unwrap();
        save_checkpoint(dir.path(), &model, &ModelMeta::default()).unwrap();
        std::fs::write(dir.path().join("embed.bin"), [0u8; 3]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("embed.bin"), "{err}");
    }
}
