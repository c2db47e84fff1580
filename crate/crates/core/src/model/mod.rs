//! Network graphs for the plain, residual and depth-separable families.
//!
//! A [`ModelGraph`] is an ordered list of [`LayerNode`]s. Convolutions are
//! bias-free and followed by batchnorm; the classifier is a 1x1 convolution
//! followed by global average pooling. Residual blocks are bracketed by
//! `ResidualBegin` / `ResidualEnd` markers.

mod accounting;
pub(crate) mod forward;
mod io;
mod units;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, uniform_tensor, SeededRng};
use crate::tensor::Tensor;

pub use accounting::{flops_count, param_count, Accounting};
pub use forward::{evaluate, ForwardOptions, ForwardTrace, Mode, ParamRef, ParamSlot, UnitMask};
pub use io::{load_model, read_model, save_model, write_model};
pub use units::{FilterRef, MaskSite, Unit, UnitKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Plain,
    Residual,
    #[serde(rename = "depthsep")]
    DepthSep,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Family::Plain),
            "residual" => Ok(Family::Residual),
            "depthsep" => Ok(Family::DepthSep),
            other => Err(Error::InvalidArgument(format!(
                "unknown model family `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Plain => "plain",
            Family::Residual => "residual",
            Family::DepthSep => "depthsep",
        })
    }
}

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub widths: Vec<usize>,
    /// Convolutions (plain), residual blocks, or depthwise/pointwise pairs
    /// per stage. Empty means one per stage.
    #[serde(default)]
    pub blocks: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

impl ModelSpec {
    pub fn new(family: Family, widths: &[usize], classes: usize, seed: u64) -> Self {
        ModelSpec {
            family,
            widths: widths.to_vec(),
            blocks: Vec::new(),
            classes,
            in_channels: 3,
            seed,
        }
    }

    pub fn with_blocks(mut self, blocks: &[usize]) -> Self {
        self.blocks = blocks.to_vec();
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.widths.is_empty() {
            problems.push("model.widths must not be empty".to_string());
        }
        if let Some(w) = self.widths.iter().find(|&&w| w < 2) {
            problems.push(format!("model.widths entries must be >= 2, got {w}"));
        }
        if !self.blocks.is_empty() && self.blocks.len() != self.widths.len() {
            problems.push(format!(
                "model.blocks has {} entries but model.widths has {}",
                self.blocks.len(),
                self.widths.len()
            ));
        }
        if self.blocks.contains(&0) {
            problems.push("model.blocks entries must be >= 1".to_string());
        }
        if self.classes < 2 {
            problems.push("model.classes must be >= 2".to_string());
        }
        if self.in_channels == 0 {
            problems.push("model.in_channels must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn blocks_for(&self, stage: usize) -> usize {
        self.blocks.get(stage).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[Cout, Cin, kh, kw]`, or `[C, 1, kh, kw]` for depthwise.
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(c: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub(crate) fn select(&self, keep: &[usize]) -> Result<Self> {
        Ok(BatchNormLayer {
            gamma: self.gamma.select_axis0(keep)?,
            beta: self.beta.select_axis0(keep)?,
            running_mean: keep.iter().map(|&i| self.running_mean[i]).collect(),
            running_var: keep.iter().map(|&i| self.running_var[i]).collect(),
        })
    }
}

/// Downsampling shortcut of a residual block. Never prunable itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

/// Zero channels re-inserted at recorded positions so an output keeps its
/// original extent after its producing filters are removed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapToZeroRecord {
    pub original: usize,
    /// Strictly increasing.
    pub pruned: Vec<usize>,
}

impl MapToZeroRecord {
    pub fn new(original: usize) -> Self {
        MapToZeroRecord {
            original,
            pruned: Vec::new(),
        }
    }

    pub fn survivors(&self) -> Vec<usize> {
        let mut it = self.pruned.iter().peekable();
        (0..self.original)
            .filter(|i| {
                if it.peek() == Some(&i) {
                    it.next();
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    /// Prunes the given positions, expressed relative to the current
    /// survivor list.
    pub fn prune_survivors(&mut self, victims: &[usize]) -> Result<()> {
        let survivors = self.survivors();
        for &v in victims {
            let idx = *survivors
                .get(v)
                .ok_or_else(|| Error::Plan(format!("channel {v} out of range for map-to-zero")))?;
            self.pruned.push(idx);
        }
        self.pruned.sort_unstable();
        self.pruned.dedup();
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pruned.windows(2).any(|w| w[0] >= w[1])
            || self.pruned.iter().any(|&p| p >= self.original)
        {
            return Err(Error::Model(
                "map-to-zero indices must be strictly increasing and in range".into(),
            ));
        }
        if self.pruned.len() >= self.original {
            return Err(Error::Model(
                "map-to-zero record prunes every channel".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Depthwise(ConvLayer),
    Pointwise(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    MaxPool,
    ResidualBegin {
        projection: Option<Projection>,
        /// Block-input channels removed from the branch and zeroed on the
        /// shortcut.
        input_map: Option<MapToZeroRecord>,
    },
    ResidualEnd,
    Classifier(ConvLayer),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Depthwise(_) => "depthwise",
            LayerKind::Pointwise(_) => "pointwise",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "pool",
            LayerKind::ResidualBegin { .. } => "residual_begin",
            LayerKind::ResidualEnd => "residual_end",
            LayerKind::Classifier(_) => "classifier",
        }
    }

    /// The weight-bearing convolution of this node, if any.
    pub fn conv(&self) -> Option<&ConvLayer> {
        match self {
            LayerKind::Conv(c)
            | LayerKind::Depthwise(c)
            | LayerKind::Pointwise(c)
            | LayerKind::Classifier(c) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvLayer> {
        match self {
            LayerKind::Conv(c)
            | LayerKind::Depthwise(c)
            | LayerKind::Pointwise(c)
            | LayerKind::Classifier(c) => Some(c),
            _ => None,
        }
    }

    pub fn batchnorm(&self) -> Option<&BatchNormLayer> {
        match self {
            LayerKind::BatchNorm(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub kind: LayerKind,
    /// Expansion applied to this node's output.
    pub map_to_zero: Option<MapToZeroRecord>,
}

impl LayerNode {
    fn new(kind: LayerKind) -> Self {
        LayerNode {
            kind,
            map_to_zero: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub spec: ModelSpec,
    pub nodes: Vec<LayerNode>,
}

fn he_conv(cout: usize, cin: usize, k: usize, stride: usize, rng: &mut SeededRng) -> ConvLayer {
    let fan_in = (cin * k * k) as f64;
    ConvLayer {
        weight: uniform_tensor(&[cout, cin, k, k], (6.0 / fan_in).sqrt(), rng),
        stride,
        pad: k / 2,
    }
}

fn he_depthwise(c: usize, stride: usize, rng: &mut SeededRng) -> ConvLayer {
    ConvLayer {
        weight: uniform_tensor(&[c, 1, 3, 3], (6.0f64 / 9.0).sqrt(), rng),
        stride,
        pad: 1,
    }
}

/// Builds a freshly initialized network (He-uniform fan-in scaling,
/// unit batchnorm scale, zero shift).
pub fn build_model(spec: &ModelSpec) -> Result<ModelGraph> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let mut nodes = Vec::new();
    let push_unit = |nodes: &mut Vec<LayerNode>, kind: LayerKind, c: usize| {
        nodes.push(LayerNode::new(kind));
        nodes.push(LayerNode::new(LayerKind::BatchNorm(BatchNormLayer::new(c))));
    };
    let stages = spec.widths.len();
    match spec.family {
        Family::Plain => {
            let mut cin = spec.in_channels;
            for (s, &w) in spec.widths.iter().enumerate() {
                for _ in 0..spec.blocks_for(s) {
                    push_unit(
                        &mut nodes,
                        LayerKind::Conv(he_conv(w, cin, 3, 1, &mut rng)),
                        w,
                    );
                    nodes.push(LayerNode::new(LayerKind::Relu));
                    cin = w;
                }
                if s + 1 < stages {
                    nodes.push(LayerNode::new(LayerKind::MaxPool));
                }
            }
        }
        Family::Residual => {
            let w0 = spec.widths[0];
            push_unit(
                &mut nodes,
                LayerKind::Conv(he_conv(w0, spec.in_channels, 3, 1, &mut rng)),
                w0,
            );
            nodes.push(LayerNode::new(LayerKind::Relu));
            let mut cin = w0;
            for (s, &w) in spec.widths.iter().enumerate() {
                for b in 0..spec.blocks_for(s) {
                    let down = s > 0 && b == 0;
                    let stride = if down { 2 } else { 1 };
                    let projection = (down || cin != w).then(|| Projection {
                        conv: he_conv(w, cin, 1, stride, &mut rng),
                        bn: BatchNormLayer::new(w),
                    });
                    nodes.push(LayerNode::new(LayerKind::ResidualBegin {
                        projection,
                        input_map: None,
                    }));
                    push_unit(
                        &mut nodes,
                        LayerKind::Conv(he_conv(w, cin, 3, stride, &mut rng)),
                        w,
                    );
                    nodes.push(LayerNode::new(LayerKind::Relu));
                    push_unit(
                        &mut nodes,
                        LayerKind::Conv(he_conv(w, w, 3, 1, &mut rng)),
                        w,
                    );
                    nodes.push(LayerNode::new(LayerKind::ResidualEnd));
                    nodes.push(LayerNode::new(LayerKind::Relu));
                    cin = w;
                }
            }
        }
        Family::DepthSep => {
            let w0 = spec.widths[0];
            push_unit(
                &mut nodes,
                LayerKind::Conv(he_conv(w0, spec.in_channels, 3, 1, &mut rng)),
                w0,
            );
            nodes.push(LayerNode::new(LayerKind::Relu));
            let mut cin = w0;
            for (s, &w) in spec.widths.iter().enumerate() {
                for b in 0..spec.blocks_for(s) {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    push_unit(
                        &mut nodes,
                        LayerKind::Depthwise(he_depthwise(cin, stride, &mut rng)),
                        cin,
                    );
                    nodes.push(LayerNode::new(LayerKind::Relu));
                    push_unit(
                        &mut nodes,
                        LayerKind::Pointwise(he_conv(w, cin, 1, 1, &mut rng)),
                        w,
                    );
                    nodes.push(LayerNode::new(LayerKind::Relu));
                    cin = w;
                }
            }
        }
    }
    let last = *spec.widths.last().unwrap();
    nodes.push(LayerNode::new(LayerKind::Classifier(he_conv(
        spec.classes,
        last,
        1,
        1,
        &mut rng,
    ))));
    let model = ModelGraph {
        spec: spec.clone(),
        nodes,
    };
    model.validate()?;
    Ok(model)
}

impl ModelGraph {
    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Structural checks: channel wiring, residual nesting, depthwise
    /// coupling, map-to-zero records.
    pub fn validate(&self) -> Result<()> {
        let mut channels = self.spec.in_channels;
        let mut stack: Vec<usize> = Vec::new();
        let mut prev_weight: Option<&'static str> = None;
        for (k, node) in self.nodes.iter().enumerate() {
            let bad = |msg: String| Error::Model(format!("node {k} ({}): {msg}", node.kind.name()));
            match &node.kind {
                LayerKind::Conv(c) | LayerKind::Pointwise(c) | LayerKind::Classifier(c) => {
                    if c.in_channels() != channels {
                        return Err(bad(format!(
                            "expects {} input channels, receives {channels}",
                            c.in_channels()
                        )));
                    }
                    channels = c.filters();
                    prev_weight = Some(node.kind.name());
                }
                LayerKind::Depthwise(c) => {
                    if c.filters() != channels || c.in_channels() != 1 {
                        return Err(bad(format!(
                            "{} filters for {channels} channels",
                            c.filters()
                        )));
                    }
                    if !matches!(prev_weight, Some("pointwise") | Some("conv")) {
                        return Err(bad(
                            "depthwise must follow a pointwise or stem convolution".into()
                        ));
                    }
                    prev_weight = Some("depthwise");
                }
                LayerKind::BatchNorm(b) => {
                    if b.channels() != channels {
                        return Err(bad(format!(
                            "{} channels, input has {channels}",
                            b.channels()
                        )));
                    }
                }
                LayerKind::Relu | LayerKind::MaxPool => {}
                LayerKind::ResidualBegin {
                    projection,
                    input_map,
                } => {
                    let mut branch = channels;
                    if let Some(m) = input_map {
                        m.validate()?;
                        if m.original != channels {
                            return Err(bad("input map extent differs from stream".into()));
                        }
                        branch = channels - m.pruned.len();
                    }
                    let shortcut = match projection {
                        Some(p) => {
                            if p.conv.in_channels() != branch || p.bn.channels() != p.conv.filters()
                            {
                                return Err(bad("projection wiring".into()));
                            }
                            p.conv.filters()
                        }
                        None => channels,
                    };
                    stack.push(shortcut);
                    channels = branch;
                }
                LayerKind::ResidualEnd => {
                    let shortcut = stack
                        .pop()
                        .ok_or_else(|| bad("unmatched residual end".into()))?;
                    if shortcut != channels {
                        return Err(bad(format!("adds {channels} channels to {shortcut}")));
                    }
                }
            }
            if let Some(m) = &node.map_to_zero {
                m.validate()?;
                if m.original - m.pruned.len() != channels {
                    return Err(bad("map-to-zero survivors differ from node output".into()));
                }
                channels = m.original;
            }
        }
        if !stack.is_empty() {
            return Err(Error::Model("unterminated residual block".into()));
        }
        if channels != self.spec.classes {
            return Err(Error::Model(format!(
                "network emits {channels} logits for {} classes",
                self.spec.classes
            )));
        }
        match self.nodes.last().map(|n| &n.kind) {
            Some(LayerKind::Classifier(_)) => Ok(()),
            _ => Err(Error::Model("last node must be the classifier".into())),
        }
    }

    /// Whether node `k` sits inside a residual block.
    pub fn in_residual_block(&self, k: usize) -> bool {
        let mut depth = 0usize;
        for (i, node) in self.nodes.iter().enumerate() {
            match node.kind {
                LayerKind::ResidualBegin { .. } => {
                    if i == k {
                        return true;
                    }
                    depth += 1
                }
                LayerKind::ResidualEnd => depth = depth.saturating_sub(1),
                _ => {}
            }
            if i == k {
                return depth > 0;
            }
        }
        false
    }

    /// Indices of nodes whose weights are regularized: every conv,
    /// pointwise and depthwise layer, never the classifier.
    pub fn regularized_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(
                    n.kind,
                    LayerKind::Conv(_) | LayerKind::Pointwise(_) | LayerKind::Depthwise(_)
                )
            })
            .map(|(k, _)| k)
            .collect()
    }

    pub fn conv(&self, k: usize) -> Option<&ConvLayer> {
        self.nodes.get(k)?.kind.conv()
    }
}
