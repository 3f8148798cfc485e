//! Model checkpoints: JSON with per-layer shapes, activations and base64
//! little-endian f32 tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, ModelParams};
use crate::wire::{decode_f32, encode_f32};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema_version: u32,
    /// `[outputs, inputs]` per layer.
    shapes: Vec<[usize; 2]>,
    activations: Vec<Activation>,
    layers: Vec<CheckpointLayer>,
    round: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointLayer {
    weights: String,
    bias: String,
}

pub fn to_json(model: &ModelParams) -> Result<String> {
    model.validate()?;
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        shapes: model.layers.iter().map(|l| [l.outputs, l.inputs]).collect(),
        activations: model.layers.iter().map(|l| l.activation).collect(),
        layers: model
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                weights: encode_f32(&l.weights),
                bias: encode_f32(&l.bias),
            })
            .collect(),
        round: model.version,
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::config(format!("checkpoint encode: {e}")))
}

pub fn from_json(text: &str) -> Result<ModelParams> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::config(format!("malformed checkpoint: {e}")))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::config(format!(
            "checkpoint schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    if file.shapes.len() != file.activations.len() || file.shapes.len() != file.layers.len() {
        return Err(Error::config("checkpoint shapes, activations and layers differ in length"));
    }
    let layers = file
        .shapes
        .iter()
        .zip(&file.activations)
        .zip(&file.layers)
        .map(|((&[outputs, inputs], &activation), l)| {
            let count = outputs
                .checked_mul(inputs)
                .ok_or_else(|| Error::config("checkpoint layer shape overflows"))?;
            Ok(Dense {
                inputs,
                outputs,
                weights: decode_f32(&l.weights, count)?,
                bias: decode_f32(&l.bias, outputs)?,
                activation,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| match e {
            Error::Protocol(m) => Error::Config(format!("checkpoint tensor: {m}")),
            other => other,
        })?;
    ModelParams::new(layers, file.round)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::random_init;

    #[test]
    fn round_trip_is_f32_exact() {
        let mut model = random_init(&[32, 64, 32, 8], 3).quantized();
        model.version = 4;
        let back = from_json(&to_json(&model).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn rejects_other_schema_versions() {
        let model = random_init(&[2, 3], 0);
        let text = to_json(&model).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(from_json(&text).unwrap_err().is_config());
    }
}
