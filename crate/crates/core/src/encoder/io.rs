use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderHeader {
    pub embedding_dim: usize,
    pub patch_dims: [usize; 3],
    pub channels: [usize; 3],
    pub head_bias: bool,
    pub seed: u64,
    pub dtype: String,
    pub layers: Vec<LayerEntry>,
}

/// `<stem>.enc.json` and `<stem>.enc.raw`.
pub fn encoder_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = stem.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{base}.enc.json")),
        PathBuf::from(format!("{base}.enc.raw")),
    )
}

pub fn write_encoder<T: Real>(model: &EncoderModel<T>, seed: u64, stem: &Path) -> Result<()> {
    let (json_path, raw_path) = encoder_paths(stem);
    let cfg = model.config();
    let header = EncoderHeader {
        embedding_dim: cfg.embedding_dim,
        patch_dims: cfg.patch_dims,
        channels: cfg.channels,
        head_bias: cfg.head_bias,
        seed,
        dtype: "f32le".into(),
        layers: cfg
            .layer_specs()
            .into_iter()
            .map(|(name, shape)| LayerEntry { name, shape })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(cfg.parameter_count() * 4);
    for v in model.params().iter().flatten() {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Returns the model and the seed recorded in its header.
pub fn read_encoder<T: Real>(stem: &Path) -> Result<(EncoderModel<T>, u64)> {
    let (json_path, raw_path) = encoder_paths(stem);
    let bad = |path: &Path, reason: String| Error::Format {
        format: "encoder",
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: EncoderHeader =
        serde_json::from_str(&text).map_err(|e| bad(&json_path, e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(bad(&json_path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let cfg = EncoderConfig {
        patch_dims: header.patch_dims,
        channels: header.channels,
        embedding_dim: header.embedding_dim,
        head_bias: header.head_bias,
    };
    cfg.validate()?;
    let specs = cfg.layer_specs();
    let listed: Vec<_> = header.layers.iter().map(|l| (l.name.clone(), l.shape.clone())).collect();
    if listed != specs {
        return Err(bad(&json_path, "layer list does not match the architecture".into()));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if bytes.len() != cfg.parameter_count() * 4 {
        return Err(bad(
            &raw_path,
            format!("expected {} bytes, found {}", cfg.parameter_count() * 4, bytes.len()),
        ));
    }
    let mut flat = bytes
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
    let params = specs
        .iter()
        .map(|(_, s)| flat.by_ref().take(s.iter().product()).collect())
        .collect();
    Ok((EncoderModel::from_params(cfg, params)?, header.seed))
}
