use std::collections::{BTreeSet, HashMap};

use crate::engine::{update_running_stats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::units::MaskSite;
use super::{BatchNormLayer, FilterRef, LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Units zeroed in place during a forward pass.
pub type UnitMask = BTreeSet<FilterRef>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamSlot {
    Weight,
    Gamma,
    Beta,
    ProjWeight,
    ProjGamma,
    ProjBeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub node: usize,
    pub slot: ParamSlot,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub mask: Option<&'a UnitMask>,
    /// Register parameters as gradient-tracked leaves.
    pub track_params: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn train() -> Self {
        ForwardOptions {
            mode: Mode::Train,
            mask: None,
            track_params: true,
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            mask: None,
            track_params: false,
        }
    }

    pub fn with_mask(mut self, mask: &'a UnitMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn tracking(mut self, track: bool) -> Self {
        self.track_params = track;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Output of every node, after map-to-zero expansion.
    pub outputs: Vec<Var>,
    /// Stream entering each residual block, keyed by its begin node.
    pub block_inputs: Vec<(usize, Var)>,
    pub params: Vec<(ParamRef, Var)>,
    /// Batchnorm outputs in training mode, keyed by the gamma reference.
    pub bn_outputs: Vec<(ParamRef, Var)>,
}

impl ForwardTrace {
    pub fn param(&self, r: ParamRef) -> Option<Var> {
        self.params.iter().find(|(p, _)| *p == r).map(|(_, v)| *v)
    }
}

struct Sites {
    outputs: HashMap<usize, Vec<usize>>,
    block_inputs: HashMap<usize, Vec<usize>>,
}

impl Sites {
    fn resolve(model: &ModelGraph, mask: Option<&UnitMask>) -> Result<Self> {
        let mut sites = Sites {
            outputs: HashMap::new(),
            block_inputs: HashMap::new(),
        };
        let Some(mask) = mask.filter(|m| !m.is_empty()) else {
            return Ok(sites);
        };
        let mut found = 0;
        for u in model.units() {
            if mask.contains(&u.id) {
                found += 1;
                match u.site {
                    MaskSite::Output { node, channel } => {
                        sites.outputs.entry(node).or_default().push(channel)
                    }
                    MaskSite::BlockInput { node, channel } => {
                        sites.block_inputs.entry(node).or_default().push(channel)
                    }
                }
            }
        }
        if found != mask.len() {
            return Err(Error::Plan(
                "mask names units that do not exist in this model".into(),
            ));
        }
        Ok(sites)
    }
}

fn apply_zero(tape: &mut Tape, x: Var, zero: Option<&Vec<usize>>) -> Result<Var> {
    match zero {
        None => Ok(x),
        Some(channels) => {
            let c = tape.shape(x)[1];
            let mut m = vec![1.0; c];
            for &ch in channels {
                *m.get_mut(ch)
                    .ok_or_else(|| Error::Plan(format!("mask channel {ch} out of range")))? = 0.0;
            }
            tape.mask_channels(x, &m)
        }
    }
}

fn load(
    tape: &mut Tape,
    track: bool,
    r: ParamRef,
    t: &Tensor,
    params: &mut Vec<(ParamRef, Var)>,
) -> Result<Var> {
    let v = if track {
        tape.param(t)?
    } else {
        tape.constant(t.clone())?
    };
    params.push((r, v));
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn norm(
    tape: &mut Tape,
    mode: Mode,
    x: Var,
    bn: &BatchNormLayer,
    gamma_ref: ParamRef,
    beta_ref: ParamRef,
    track: bool,
    params: &mut Vec<(ParamRef, Var)>,
    bn_outputs: &mut Vec<(ParamRef, Var)>,
) -> Result<Var> {
    let g = load(tape, track, gamma_ref, &bn.gamma, params)?;
    let b = load(tape, track, beta_ref, &bn.beta, params)?;
    let bn_mode = match mode {
        Mode::Train => BnMode::Train,
        Mode::Eval => BnMode::Eval {
            mean: &bn.running_mean,
            var: &bn.running_var,
        },
    };
    let y = tape.batchnorm(x, g, b, bn_mode)?;
    if mode == Mode::Train {
        bn_outputs.push((gamma_ref, y));
    }
    Ok(y)
}

impl ModelGraph {
    pub fn param(&self, r: ParamRef) -> Option<&Tensor> {
        let node = self.nodes.get(r.node)?;
        match (&node.kind, r.slot) {
            (k, ParamSlot::Weight) => k.conv().map(|c| &c.weight),
            (LayerKind::BatchNorm(b), ParamSlot::Gamma) => Some(&b.gamma),
            (LayerKind::BatchNorm(b), ParamSlot::Beta) => Some(&b.beta),
            (
                LayerKind::ResidualBegin {
                    projection: Some(p),
                    ..
                },
                slot,
            ) => match slot {
                ParamSlot::ProjWeight => Some(&p.conv.weight),
                ParamSlot::ProjGamma => Some(&p.bn.gamma),
                ParamSlot::ProjBeta => Some(&p.bn.beta),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn param_mut(&mut self, r: ParamRef) -> Option<&mut Tensor> {
        let node = self.nodes.get_mut(r.node)?;
        match (&mut node.kind, r.slot) {
            (k, ParamSlot::Weight) => k.conv_mut().map(|c| &mut c.weight),
            (LayerKind::BatchNorm(b), ParamSlot::Gamma) => Some(&mut b.gamma),
            (LayerKind::BatchNorm(b), ParamSlot::Beta) => Some(&mut b.beta),
            (
                LayerKind::ResidualBegin {
                    projection: Some(p),
                    ..
                },
                slot,
            ) => match slot {
                ParamSlot::ProjWeight => Some(&mut p.conv.weight),
                ParamSlot::ProjGamma => Some(&mut p.bn.gamma),
                ParamSlot::ProjBeta => Some(&mut p.bn.beta),
                _ => None,
            },
            _ => None,
        }
    }

    /// Every trainable tensor in node order.
    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut out = Vec::new();
        for (k, node) in self.nodes.iter().enumerate() {
            let slots: &[ParamSlot] = match &node.kind {
                k if k.conv().is_some() => &[ParamSlot::Weight],
                LayerKind::BatchNorm(_) => &[ParamSlot::Gamma, ParamSlot::Beta],
                LayerKind::ResidualBegin {
                    projection: Some(_),
                    ..
                } => &[
                    ParamSlot::ProjWeight,
                    ParamSlot::ProjGamma,
                    ParamSlot::ProjBeta,
                ],
                _ => &[],
            };
            out.extend(slots.iter().map(|&slot| ParamRef { node: k, slot }));
        }
        out
    }

    fn bn_mut(&mut self, gamma: ParamRef) -> Option<&mut BatchNormLayer> {
        match (&mut self.nodes.get_mut(gamma.node)?.kind, gamma.slot) {
            (LayerKind::BatchNorm(b), ParamSlot::Gamma) => Some(b),
            (
                LayerKind::ResidualBegin {
                    projection: Some(p),
                    ..
                },
                ParamSlot::ProjGamma,
            ) => Some(&mut p.bn),
            _ => None,
        }
    }

    /// Folds the batch statistics of a training-mode pass into the
    /// running estimates.
    pub fn absorb_batch_stats(&mut self, tape: &Tape, trace: &ForwardTrace) {
        for &(r, v) in &trace.bn_outputs {
            if let Some((mean, var)) = tape.batch_stats(v) {
                let (mean, var) = (mean.to_vec(), var.to_vec());
                if let Some(bn) = self.bn_mut(r) {
                    update_running_stats(&mut bn.running_mean, &mut bn.running_var, &mean, &var);
                }
            }
        }
    }

    /// Records the network on `tape` for input `x` of shape `[N, C, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardTrace> {
        let in_shape = tape.shape(x).to_vec();
        if in_shape.len() != 4 || in_shape[1] != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected [N, {}, H, W], got {in_shape:?}",
                    self.spec.in_channels
                ),
            ));
        }
        let sites = Sites::resolve(self, opts.mask)?;
        let mut params = Vec::new();
        let mut bn_outputs = Vec::new();
        let mut outputs = Vec::with_capacity(self.nodes.len());
        let mut block_inputs = Vec::new();
        let mut stack: Vec<Var> = Vec::new();

        let mut h = x;
        for (k, node) in self.nodes.iter().enumerate() {
            let r = |slot| ParamRef { node: k, slot };
            h = match &node.kind {
                LayerKind::Conv(c) | LayerKind::Pointwise(c) | LayerKind::Classifier(c) => {
                    let w = load(
                        tape,
                        opts.track_params,
                        r(ParamSlot::Weight),
                        &c.weight,
                        &mut params,
                    )?;
                    tape.conv2d(h, w, c.stride, c.pad)?
                }
                LayerKind::Depthwise(c) => {
                    let w = load(
                        tape,
                        opts.track_params,
                        r(ParamSlot::Weight),
                        &c.weight,
                        &mut params,
                    )?;
                    tape.depthwise_conv2d(h, w, c.stride, c.pad)?
                }
                LayerKind::BatchNorm(bn) => norm(
                    tape,
                    opts.mode,
                    h,
                    bn,
                    r(ParamSlot::Gamma),
                    r(ParamSlot::Beta),
                    opts.track_params,
                    &mut params,
                    &mut bn_outputs,
                )?,
                LayerKind::Relu => tape.relu(h)?,
                LayerKind::MaxPool => tape.max_pool2(h)?,
                LayerKind::ResidualBegin {
                    projection,
                    input_map,
                } => {
                    let stream = apply_zero(tape, h, sites.block_inputs.get(&k))?;
                    block_inputs.push((k, stream));
                    let (branch, survivors) = match input_map {
                        Some(m) => {
                            let s = m.survivors();
                            (tape.gather_channels(stream, &s)?, Some(s))
                        }
                        None => (stream, None),
                    };
                    let shortcut = match projection {
                        Some(p) => {
                            let w = load(
                                tape,
                                opts.track_params,
                                r(ParamSlot::ProjWeight),
                                &p.conv.weight,
                                &mut params,
                            )?;
                            let y = tape.conv2d(branch, w, p.conv.stride, p.conv.pad)?;
                            norm(
                                tape,
                                opts.mode,
                                y,
                                &p.bn,
                                r(ParamSlot::ProjGamma),
                                r(ParamSlot::ProjBeta),
                                opts.track_params,
                                &mut params,
                                &mut bn_outputs,
                            )?
                        }
                        None => match (&survivors, input_map) {
                            (Some(s), Some(m)) => tape.scatter_channels(branch, s, m.original)?,
                            _ => stream,
                        },
                    };
                    stack.push(shortcut);
                    branch
                }
                LayerKind::ResidualEnd => {
                    let s = stack
                        .pop()
                        .ok_or_else(|| Error::Model(format!("node {k}: unmatched residual end")))?;
                    tape.add(h, s)?
                }
            };
            h = apply_zero(tape, h, sites.outputs.get(&k))?;
            if let Some(m) = &node.map_to_zero {
                h = tape.scatter_channels(h, &m.survivors(), m.original)?;
            }
            outputs.push(h);
        }
        let logits = tape.global_avg_pool(h)?;
        Ok(ForwardTrace {
            logits,
            outputs,
            block_inputs,
            params,
            bn_outputs,
        })
    }

    /// Eval-mode logits `[N, classes]`.
    pub fn predict(&self, x: &Tensor, mask: Option<&UnitMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let opts = ForwardOptions {
            mode: Mode::Eval,
            mask,
            track_params: false,
        };
        let trace = self.forward(&mut tape, xv, opts)?;
        Ok(tape.value(trace.logits).clone())
    }
}

/// Mean cross-entropy and accuracy in eval mode, processed in batches.
pub fn evaluate(
    model: &ModelGraph,
    inputs: &Tensor,
    labels: &[usize],
    batch: usize,
    mask: Option<&UnitMask>,
) -> Result<(f64, f64)> {
    let n = inputs.dim0();
    if n == 0 || labels.len() != n {
        return Err(Error::EmptyBatch);
    }
    let batch = batch.max(1);
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..n).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let x = inputs.select_axis0(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let opts = ForwardOptions {
            mode: Mode::Eval,
            mask,
            track_params: false,
        };
        let trace = model.forward(&mut tape, xv, opts)?;
        let l = tape.softmax_cross_entropy(trace.logits, &y)?;
        loss += tape.value(l).data()[0] * idx.len() as f64;
        let logits = tape.value(trace.logits);
        for (row, &label) in y.iter().enumerate() {
            if argmax(logits.row(row)) == label {
                correct += 1;
            }
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
