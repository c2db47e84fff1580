use crate::error::{Error, Result};

use super::{LayerKind, ModelGraph};

/// Per-node totals plus their sum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accounting {
    pub per_layer: Vec<(usize, u64)>,
    pub total: u64,
}

impl Accounting {
    fn from_layers(per_layer: Vec<(usize, u64)>) -> Self {
        let total = per_layer.iter().map(|&(_, v)| v).sum();
        Accounting { per_layer, total }
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if extent + 2 * pad < k {
        return Err(Error::shape(
            "flops",
            format!("kernel {k} exceeds padded extent {}", extent + 2 * pad),
        ));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

/// Multiply-accumulate counts of every convolution for a single input of
/// extents `[C, H, W]`. Batchnorm, activations, pooling and additions are
/// not counted.
pub fn flops_count(model: &ModelGraph, input: [usize; 3]) -> Result<Accounting> {
    if input[0] != model.spec.in_channels {
        return Err(Error::shape(
            "flops",
            format!(
                "model takes {} channels, got {}",
                model.spec.in_channels, input[0]
            ),
        ));
    }
    let (mut h, mut w) = (input[1], input[2]);
    let mut stack = Vec::new();
    let mut per_layer = Vec::new();
    for (k, node) in model.nodes.iter().enumerate() {
        match &node.kind {
            LayerKind::Conv(c)
            | LayerKind::Pointwise(c)
            | LayerKind::Depthwise(c)
            | LayerKind::Classifier(c) => {
                let (kh, kw) = c.kernel();
                h = conv_out(h, kh, c.stride, c.pad)?;
                w = conv_out(w, kw, c.stride, c.pad)?;
                let per_pixel = (kh * kw * c.in_channels() * c.filters()) as u64;
                per_layer.push((k, (h * w) as u64 * per_pixel));
            }
            LayerKind::MaxPool => {
                if h < 2 || w < 2 {
                    return Err(Error::shape("flops", "pooling a map smaller than 2x2"));
                }
                h /= 2;
                w /= 2;
            }
            LayerKind::ResidualBegin { projection, .. } => {
                stack.push((h, w));
                if let Some(p) = projection {
                    let ph = conv_out(h, 1, p.conv.stride, p.conv.pad)?;
                    let pw = conv_out(w, 1, p.conv.stride, p.conv.pad)?;
                    per_layer.push((
                        k,
                        (ph * pw * p.conv.in_channels() * p.conv.filters()) as u64,
                    ));
                }
            }
            LayerKind::ResidualEnd => {
                stack.pop();
            }
            LayerKind::BatchNorm(_) | LayerKind::Relu => {}
        }
    }
    Ok(Accounting::from_layers(per_layer))
}

/// Trainable parameter counts (convolution weights, batchnorm scale and
/// shift, projection shortcuts).
pub fn param_count(model: &ModelGraph) -> Accounting {
    let per_layer = model
        .nodes
        .iter()
        .enumerate()
        .filter_map(|(k, node)| {
            let n = match &node.kind {
                kind if kind.conv().is_some() => kind.conv().unwrap().weight.numel(),
                LayerKind::BatchNorm(b) => 2 * b.channels(),
                LayerKind::ResidualBegin {
                    projection: Some(p),
                    ..
                } => p.conv.weight.numel() + 2 * p.bn.channels(),
                _ => return None,
            };
            Some((k, n as u64))
        })
        .collect();
    Accounting::from_layers(per_layer)
}
