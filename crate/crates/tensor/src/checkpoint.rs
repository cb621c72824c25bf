//! Checkpoint directory: `model.json` (architecture config plus ordered
//! parameter names and shapes) and `params.bin` (little-endian `f32` values
//! concatenated in the declared order).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::optim::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub config: serde_json::Value,
    pub params: Vec<ParamMeta>,
}

pub fn save_checkpoint(dir: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = store
        .ids()
        .map(|id| ParamMeta {
            name: store.name(id).to_string(),
            shape: store.value(id).shape().to_vec(),
        })
        .collect();
    let model = ModelFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        params,
    };
    let mut json = serde_json::to_vec_pretty(&model)?;
    json.push(b'\n');
    fs::write(dir.join(MODEL_FILE), json)?;

    let mut bytes = Vec::with_capacity(store.num_values() * 4);
    for id in store.ids() {
        for &x in store.value(id).data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join(PARAMS_FILE))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let model: ModelFile = serde_json::from_slice(&fs::read(dir.join(MODEL_FILE))?)?;
    if model.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {}",
            model.format_version
        )));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let expected: usize = model
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != expected {
        return Err(TensorError::Checkpoint(format!(
            "{PARAMS_FILE} has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for meta in &model.params {
        let n: usize = meta.shape.iter().product();
        let data = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += 4 * n;
        store.register(meta.name.clone(), Tensor::new(meta.shape.clone(), data)?)?;
    }
    Ok((model.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .register("b", Tensor::matrix(1, 2, vec![0.1, -3.0]).unwrap())
            .unwrap();
        store
            .register("a", Tensor::new(vec![3], vec![1.0, 2.5, 1e-3]).unwrap())
            .unwrap();
        let cfg = serde_json::json!({"arch": "toy"});
        save_checkpoint(dir.path(), &cfg, &store).unwrap();
        let (cfg2, loaded) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        let names: Vec<_> = loaded.ids().map(|id| loaded.name(id).to_string()).collect();
        assert_eq!(names, ["b", "a"]);
        let b = loaded.value(loaded.id("b").unwrap());
        assert_eq!(b.shape(), &[1, 2]);
        assert_eq!(b.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn truncated_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[4])).unwrap();
        save_checkpoint(dir.path(), &serde_json::Value::Null, &store).unwrap();
        fs::write(dir.path().join(PARAMS_FILE), [0u8; 7]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
