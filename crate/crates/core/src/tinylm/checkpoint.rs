//! Checkpoint I/O: one UTF-8 JSON header line (tensor names, shapes, dtype,
//! hyperparameters, tokenizer version) followed by the tensor payloads as
//! little-endian IEEE-754 `f32`, concatenated in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, PolicyModel};
use super::tokenizer::Tokenizer;
use super::TinylmError;

const FORMAT: &str = "tinylm-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    tokenizer_version: u32,
    hyperparameters: ModelConfig,
    tensors: Vec<TensorMeta>,
}

fn shape_for(name: &str, cfg: &ModelConfig, len: usize) -> Vec<usize> {
    let d = cfg.d_model;
    let f = 4 * d;
    let base = name.rsplit('.').next().unwrap_or(name);
    match base {
        "tok_emb" | "lm_head" => vec![cfg.vocab_size, d],
        "pos_emb" => vec![cfg.context_len, d],
        "wq" | "wk" | "wv" | "wo" => vec![d, d],
        "fc1" => vec![f, d],
        "fc2" => vec![d, f],
        _ => vec![len],
    }
}

/// Write `model` to `path` in the checkpoint format.
pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<(), TinylmError> {
    let io_err = |source| TinylmError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let tensors = model.params.tensors();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        tokenizer_version: Tokenizer::VERSION,
        hyperparameters: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, data)| TensorMeta {
                name: name.clone(),
                shape: shape_for(name, &model.config, data.len()),
            })
            .collect(),
    };
    let mut bytes = serde_json::to_string(&header)
        .expect("header serializes")
        .into_bytes();
    bytes.push(b'\n');
    for (_, data) in &tensors {
        for &v in data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(io_err)
}

/// Load a model from `path`, restoring hyperparameters and all tensors.
pub fn load_checkpoint(path: &Path) -> Result<PolicyModel, TinylmError> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| TinylmError::CheckpointIo {
        path: display.clone(),
        source,
    })?;
    let bad = |reason: &str| TinylmError::BadCheckpoint {
        path: display.clone(),
        reason: reason.to_string(),
    };

    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| bad(&format!("unparseable header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    if header.dtype != "f32" {
        return Err(bad(&format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.tokenizer_version != Tokenizer::VERSION {
        return Err(bad(&format!(
            "tokenizer version {} != {}",
            header.tokenizer_version,
            Tokenizer::VERSION
        )));
    }

    let has_reward_head = header.tensors.iter().any(|t| t.name == "reward_w");
    let mut model = PolicyModel::new(header.hyperparameters.clone(), 0);
    if has_reward_head {
        model = model.with_reward_head();
    }

    let mut cursor = newline + 1;
    let payload = &bytes[cursor..];
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected * 4 {
        return Err(bad(&format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            expected * 4
        )));
    }
    cursor = 0;

    let mut metas = header.tensors.iter();
    for (name, tensor) in model.params.tensors_mut() {
        let meta = metas
            .next()
            .ok_or_else(|| TinylmError::BadCheckpoint {
                path: display.clone(),
                reason: format!("header missing tensor {name}"),
            })?;
        if meta.name != name {
            return Err(TinylmError::BadCheckpoint {
                path: display.clone(),
                reason: format!("tensor order mismatch: {} vs {name}", meta.name),
            });
        }
        let n: usize = meta.shape.iter().product();
        if n != tensor.len() {
            return Err(TinylmError::BadCheckpoint {
                path: display.clone(),
                reason: format!("tensor {name} has {n} elements, expected {}", tensor.len()),
            });
        }
        for v in tensor.iter_mut() {
            let raw: [u8; 4] = payload[cursor..cursor + 4]
                .try_into()
                .expect("length checked");
            *v = f32::from_le_bytes(raw) as f64;
            cursor += 4;
        }
    }
    if metas.next().is_some() {
        return Err(bad("extra tensors in header"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 16, 2, 32), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        for ((_, a), (_, b)) in model.params.tensors().iter().zip(loaded.params.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // saving again reproduces the same bytes
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn reward_head_survives_round_trip() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 8, 1, 16), 5).with_reward_head();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rm.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.has_reward_head());
    }

    #[test]
    fn header_is_one_json_line() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 8, 1, 16), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert!(header["tensors"].as_array().unwrap().len() > 4);
        assert!(header["hyperparameters"]["d_model"].is_number());
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let model = PolicyModel::new(ModelConfig::tiny(1, 8, 1, 16), 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TinylmError::BadCheckpoint { .. })
        ));
    }
}
