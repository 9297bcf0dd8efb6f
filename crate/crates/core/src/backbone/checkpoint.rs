//! JSON checkpoint container for [`BackboneParams`].
//!
//! Floats are written with shortest round-trip formatting, so a save/load
//! cycle reproduces every tensor bit for bit.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BackboneParams, BatchNorm, Layer};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fsqs-backbone";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NormRecord {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    in_dim: usize,
    out_dim: usize,
    /// row-major `in_dim x out_dim`
    weight: Vec<f64>,
    bias: Vec<f64>,
    relu: bool,
    norm: Option<NormRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerRecord>,
}

fn to_file(params: &BackboneParams) -> CheckpointFile {
    CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        layer_sizes: params.layer_sizes(),
        layers: params
            .layers()
            .iter()
            .map(|l| LayerRecord {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
                relu: l.relu,
                norm: l.norm.as_ref().map(|n| NormRecord {
                    gamma: n.gamma.to_vec(),
                    beta: n.beta.to_vec(),
                    running_mean: n.running_mean.to_vec(),
                    running_var: n.running_var.to_vec(),
                    momentum: n.momentum,
                    eps: n.eps,
                }),
            })
            .collect(),
    }
}

fn from_file(file: CheckpointFile) -> Result<BackboneParams> {
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, rec) in file.layers.into_iter().enumerate() {
        let weight = Array2::from_shape_vec((rec.in_dim, rec.out_dim), rec.weight)
            .map_err(|e| Error::Checkpoint(format!("layer {i} weight: {e}")))?;
        layers.push(Layer {
            weight,
            bias: Array1::from(rec.bias),
            relu: rec.relu,
            norm: rec.norm.map(|n| BatchNorm {
                gamma: Array1::from(n.gamma),
                beta: Array1::from(n.beta),
                running_mean: Array1::from(n.running_mean),
                running_var: Array1::from(n.running_var),
                momentum: n.momentum,
                eps: n.eps,
            }),
        });
    }
    let params = BackboneParams::from_layers(layers);
    params.validate()?;
    if params.layer_sizes() != file.layer_sizes {
        return Err(Error::Checkpoint(format!(
            "declared layer sizes {:?} do not match tensors {:?}",
            file.layer_sizes,
            params.layer_sizes()
        )));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &BackboneParams, path: &Path) -> Result<()> {
    fs::write(path, to_json(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<BackboneParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}

pub fn from_json(text: &str) -> Result<BackboneParams> {
    from_file(serde_json::from_str(text)?)
}

pub fn to_json(params: &BackboneParams) -> Result<String> {
    Ok(serde_json::to_string(&to_file(params))?)
}
