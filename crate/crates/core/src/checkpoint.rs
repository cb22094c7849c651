//! Checkpoint container: JSON header (names, shapes, dtype, config and its
//! hash, schedule position) followed by raw little-endian f64 values in
//! header order. Optimizer moments ride along under `optim.m.*` /
//! `optim.v.*` so training resumes exactly.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{Adam, AdamSlot, Tensor};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fileio;
use crate::model::Model;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Epochs fully completed when this checkpoint was written.
    pub epoch: usize,
    /// Optimizer step count.
    pub step: u64,
    pub entries: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save(
    path: &Path,
    model: &Model,
    adam: Option<&Adam>,
    config: &ExperimentConfig,
    epoch: usize,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for p in model.params().iter() {
        entries.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() });
        payload.extend_from_slice(p.value.data());
    }
    if let Some(adam) = adam {
        for (p, slot) in model.params().iter().zip(&adam.slots) {
            entries.push(TensorEntry {
                name: format!("optim.m.{}", p.name),
                shape: p.value.shape().to_vec(),
            });
            payload.extend_from_slice(&slot.m);
            entries.push(TensorEntry {
                name: format!("optim.v.{}", p.name),
                shape: p.value.shape().to_vec(),
            });
            payload.extend_from_slice(&slot.v);
        }
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: "f64le".into(),
        config_hash: config.hash(),
        config: config.clone(),
        epoch,
        step: adam.map_or(0, |a| a.step_count),
        entries,
    };
    fileio::write_framed(path, &serde_json::to_string(&header)?, &payload)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (header_json, payload) = fileio::read_framed(path)?;
    let header: CheckpointHeader = serde_json::from_str(&header_json)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dtype != "f64le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let expected: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} values, header describes {expected}",
            payload.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.entries.len());
    let mut offset = 0usize;
    for entry in &header.entries {
        let numel: usize = entry.shape.iter().product();
        let data = payload[offset..offset + numel].to_vec();
        offset += numel;
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(Checkpoint { header, tensors })
}

pub struct Restored {
    pub model: Model,
    pub adam: Option<Adam>,
    pub header: CheckpointHeader,
}

/// Rebuild the model (and optimizer state, when present) from a checkpoint.
pub fn restore(path: &Path) -> Result<Restored> {
    let ckpt = load(path)?;
    let header = ckpt.header;
    let mut model = Model::new(header.config.model.clone(), header.config.seed)?;

    let mut param_values: Vec<Option<Tensor>> = vec![None; model.params().len()];
    let mut moments_m: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    let mut moments_v: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
    for (name, tensor) in ckpt.tensors {
        if let Some(rest) = name.strip_prefix("optim.m.") {
            let idx = model
                .params()
                .index_of(rest)
                .ok_or_else(|| Error::Format(format!("moment for unknown parameter {rest}")))?;
            moments_m[idx] = Some(tensor.into_data());
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            let idx = model
                .params()
                .index_of(rest)
                .ok_or_else(|| Error::Format(format!("moment for unknown parameter {rest}")))?;
            moments_v[idx] = Some(tensor.into_data());
        } else {
            let idx = model
                .params()
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if model.params().get(idx).value.shape() != tensor.shape() {
                return Err(Error::Format(format!("shape mismatch for parameter {name}")));
            }
            param_values[idx] = Some(tensor);
        }
    }
    for (idx, value) in param_values.into_iter().enumerate() {
        let value = value.ok_or_else(|| {
            Error::Format(format!("checkpoint misses parameter {}", model.params().get(idx).name))
        })?;
        model.params_mut().get_mut(idx).value = value;
    }

    let has_moments = moments_m.iter().any(Option::is_some);
    let adam = if has_moments {
        let mut adam = Adam::new(&model.params().sizes());
        adam.step_count = header.step;
        for (i, (m, v)) in moments_m.into_iter().zip(moments_v).enumerate() {
            let (m, v) = match (m, v) {
                (Some(m), Some(v)) => (m, v),
                _ => {
                    return Err(Error::Format(format!(
                        "incomplete optimizer state for parameter {}",
                        model.params().get(i).name
                    )))
                }
            };
            adam.slots[i] = AdamSlot { m, v };
        }
        Some(adam)
    } else {
        None
    };

    Ok(Restored { model, adam, header })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.model_dim = 8;
        cfg.model.mlp_dim = 16;
        cfg.model.num_heads = 2;
        cfg.model.num_encoder_layers = 1;
        cfg.model.num_decoder_layers = 1;
        cfg.model.num_queries = 6;
        cfg.model.feature_dim = 4;
        cfg.model.num_classes = 2;
        cfg.data.synth.feature_dim = 4;
        cfg.data.synth.num_classes = 2;
        cfg
    }

    #[test]
    fn save_restore_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut adam = Adam::new(&model.params().sizes());
        adam.step_count = 17;
        adam.slots[0].m[0] = 0.123;

        let path = dir.path().join("model.ckpt");
        save(&path, &model, Some(&adam), &cfg, 3).unwrap();
        let restored = restore(&path).unwrap();

        assert_eq!(restored.header.epoch, 3);
        assert_eq!(restored.header.config_hash, cfg.hash());
        for (a, b) in model.params().iter().zip(restored.model.params().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        let radam = restored.adam.unwrap();
        assert_eq!(radam.step_count, 17);
        assert_eq!(radam.slots[0].m[0], 0.123);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config();
        let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, None, &cfg, 0).unwrap();
        let (header, mut payload) = fileio::read_framed(&path).unwrap();
        payload.truncate(payload.len() - 1);
        fileio::write_framed(&path, &header, &payload).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
