//! Model files: `ORTHOMDL`, a version byte, a little-endian `u32` header
//! length, a JSON topology header, then a tensor checkpoint holding every
//! weight and batchnorm statistic.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{parse_checkpoint, write_checkpoint, Tensor};

use super::{
    BatchNormLayer, ConvLayer, LayerKind, LayerNode, MapToZeroRecord, ModelGraph, ModelSpec,
    Projection,
};

pub const MODEL_MAGIC: &[u8; 8] = b"ORTHOMDL";
pub const MODEL_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    nodes: Vec<NodeHeader>,
}

#[derive(Serialize, Deserialize)]
struct NodeHeader {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_map: Option<MapToZeroRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    map_to_zero: Option<MapToZeroRecord>,
}

fn bn_tensors(prefix: &str, bn: &BatchNormLayer, out: &mut Vec<(String, Tensor)>) {
    let c = bn.channels();
    out.push((format!("{prefix}.gamma"), bn.gamma.clone()));
    out.push((format!("{prefix}.beta"), bn.beta.clone()));
    out.push((
        format!("{prefix}.running_mean"),
        Tensor::new(vec![c], bn.running_mean.clone()).expect("channel extent"),
    ));
    out.push((
        format!("{prefix}.running_var"),
        Tensor::new(vec![c], bn.running_var.clone()).expect("channel extent"),
    ));
}

pub fn write_model<W: Write>(mut w: W, model: &ModelGraph) -> Result<()> {
    let mut tensors = Vec::new();
    let mut nodes = Vec::new();
    for (k, node) in model.nodes.iter().enumerate() {
        let mut h = NodeHeader {
            kind: node.kind.name().to_string(),
            stride: None,
            pad: None,
            projection_stride: None,
            input_map: None,
            map_to_zero: node.map_to_zero.clone(),
        };
        match &node.kind {
            LayerKind::BatchNorm(bn) => bn_tensors(&k.to_string(), bn, &mut tensors),
            LayerKind::ResidualBegin {
                projection,
                input_map,
            } => {
                h.input_map = input_map.clone();
                if let Some(p) = projection {
                    h.projection_stride = Some(p.conv.stride);
                    tensors.push((format!("{k}.proj.weight"), p.conv.weight.clone()));
                    bn_tensors(&format!("{k}.proj"), &p.bn, &mut tensors);
                }
            }
            kind => {
                if let Some(c) = kind.conv() {
                    h.stride = Some(c.stride);
                    h.pad = Some(c.pad);
                    tensors.push((format!("{k}.weight"), c.weight.clone()));
                }
            }
        }
        nodes.push(h);
    }
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        nodes,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&[MODEL_VERSION])?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    write_checkpoint(w, &tensors)
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelGraph> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..8] != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    if bytes[8] != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {}",
            bytes[8]
        )));
    }
    let len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() < len {
        return Err(Error::Format("truncated model header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::Format(e.to_string()))?;
    let mut tensors: HashMap<String, Tensor> =
        parse_checkpoint(&body[len..])?.into_iter().collect();
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    };
    let take_bn = |prefix: String,
                   take: &mut dyn FnMut(String) -> Result<Tensor>|
     -> Result<BatchNormLayer> {
        Ok(BatchNormLayer {
            gamma: take(format!("{prefix}.gamma"))?,
            beta: take(format!("{prefix}.beta"))?,
            running_mean: take(format!("{prefix}.running_mean"))?.into_data(),
            running_var: take(format!("{prefix}.running_var"))?.into_data(),
        })
    };
    let mut nodes = Vec::with_capacity(header.nodes.len());
    for (k, h) in header.nodes.into_iter().enumerate() {
        let conv = |take: &mut dyn FnMut(String) -> Result<Tensor>| -> Result<ConvLayer> {
            Ok(ConvLayer {
                weight: take(format!("{k}.weight"))?,
                stride: h
                    .stride
                    .ok_or_else(|| Error::Format(format!("node {k} lacks a stride")))?,
                pad: h
                    .pad
                    .ok_or_else(|| Error::Format(format!("node {k} lacks padding")))?,
            })
        };
        let kind = match h.kind.as_str() {
            "conv" => LayerKind::Conv(conv(&mut take)?),
            "depthwise" => LayerKind::Depthwise(conv(&mut take)?),
            "pointwise" => LayerKind::Pointwise(conv(&mut take)?),
            "classifier" => LayerKind::Classifier(conv(&mut take)?),
            "batchnorm" => LayerKind::BatchNorm(take_bn(k.to_string(), &mut take)?),
            "relu" => LayerKind::Relu,
            "pool" => LayerKind::MaxPool,
            "residual_end" => LayerKind::ResidualEnd,
            "residual_begin" => {
                let projection = match h.projection_stride {
                    Some(stride) => Some(Projection {
                        conv: ConvLayer {
                            weight: take(format!("{k}.proj.weight"))?,
                            stride,
                            pad: 0,
                        },
                        bn: take_bn(format!("{k}.proj"), &mut take)?,
                    }),
                    None => None,
                };
                LayerKind::ResidualBegin {
                    projection,
                    input_map: h.input_map,
                }
            }
            other => return Err(Error::Format(format!("unknown node kind `{other}`"))),
        };
        nodes.push(LayerNode {
            kind,
            map_to_zero: h.map_to_zero,
        });
    }
    let model = ModelGraph {
        spec: header.spec,
        nodes,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelGraph) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    read_model(std::fs::File::open(path)?)
}
