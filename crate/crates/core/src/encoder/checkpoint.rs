//! JSON checkpoint: `{"format_version", "config", "layers": [{rows, cols, weights, bias}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderParams, Layer, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u64,
    config: TrainConfig,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub config: TrainConfig,
}

pub fn save_checkpoint(params: &EncoderParams, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        layers: params
            .layers()
            .iter()
            .map(|l| LayerRecord {
                rows: l.inputs(),
                cols: l.outputs(),
                weights: l.weights.values().to_vec(),
                bias: l.bias.clone(),
            })
            .collect(),
    };
    let s = serde_json::to_string(&file).map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let corrupt = |message: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let layers = file
        .layers
        .into_iter()
        .map(|l| {
            let w = DenseMatrix::from_vec(l.rows, l.cols, l.weights)?;
            Layer::new(w, l.bias)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| corrupt(e.to_string()))?;
    let params = EncoderParams::new(layers).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        params,
        config: file.config,
    })
}
