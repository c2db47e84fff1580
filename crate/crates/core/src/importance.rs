//! Filter importance estimates.
//!
//! First-order scores use the task loss only, with batchnorm in eval mode.
//! For a filter unit the first-order term is `wᵀg` over its convolution
//! weights; for a residual block input channel (which owns no weights) it
//! is the gate term `Σ x·∂L/∂x` of that channel at the block entrance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    FilterRef, ForwardOptions, ForwardTrace, LayerKind, MaskSite, Mode, ModelGraph, ParamRef,
    ParamSlot, Unit, UnitKind,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Squared first-order term, averaged over batches.
    Taylor,
    /// Taylor scores L2-normalized within each layer.
    Tfo,
    L1,
    BnScale,
    /// Per-example squared gate terms at the unit's output.
    Fisher,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Taylor => "taylor",
            Metric::Tfo => "tfo",
            Metric::L1 => "l1",
            Metric::BnScale => "bn_scale",
            Metric::Fisher => "fisher",
        }
    }

    pub fn needs_data(&self) -> bool {
        matches!(self, Metric::Taylor | Metric::Tfo | Metric::Fisher)
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "taylor" | "orthoreg" => Metric::Taylor,
            "tfo" => Metric::Tfo,
            "l1" => Metric::L1,
            "bn_scale" | "bn" => Metric::BnScale,
            "fisher" => Metric::Fisher,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown importance metric `{other}`"
                )))
            }
        })
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub metric: String,
    pub scores: BTreeMap<FilterRef, f64>,
    pub batches: usize,
    pub data_fraction: f64,
    /// Free-form metadata such as fallbacks and the batchnorm mode.
    pub notes: Vec<String>,
}

impl ImportanceTable {
    pub fn score(&self, r: FilterRef) -> Option<f64> {
        self.scores.get(&r).copied()
    }

    /// Whether the table names exactly the model's prunable units.
    pub fn covers(&self, model: &ModelGraph) -> bool {
        let units = model.enumerate_prunable();
        units.len() == self.scores.len() && units.iter().all(|u| self.scores.contains_key(u))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,filter,score,metric,batches,data_fraction")?;
        for (r, s) in &self.scores {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.layer, r.filter, s, self.metric, self.batches, self.data_fraction
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty importance file".into()))??;
        if header.trim() != "layer,filter,score,metric,batches,data_fraction" {
            return Err(Error::Format(format!(
                "unexpected importance header `{header}`"
            )));
        }
        let mut t = ImportanceTable {
            metric: String::new(),
            scores: BTreeMap::new(),
            batches: 0,
            data_fraction: 1.0,
            notes: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("importance row {}: `{line}`", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let r = FilterRef::new(
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
            );
            t.scores.insert(r, f[2].parse().map_err(|_| bad())?);
            t.metric = f[3].to_string();
            t.batches = f[4].parse().map_err(|_| bad())?;
            t.data_fraction = f[5].parse().map_err(|_| bad())?;
        }
        Ok(t)
    }
}

/// First-order terms of one batch.
#[derive(Debug, Clone)]
pub struct FirstOrder {
    pub units: Vec<Unit>,
    /// `wᵀg` (filters) or the gate term (block inputs), signed.
    pub terms: Vec<f64>,
    /// `Σ a·∂L/∂a` at each unit's mask site.
    pub gate_terms: Vec<f64>,
    /// `Σ_n (N · Σ_hw a·g)²` over examples at each unit's mask site.
    pub example_squares: Vec<f64>,
    pub examples: usize,
}

/// Variable and channel holding a unit's activation after masking.
fn site_channel(model: &ModelGraph, trace: &ForwardTrace, site: MaskSite) -> (Var, usize) {
    match site {
        MaskSite::Output { node, channel } => {
            let ch = match &model.nodes[node].map_to_zero {
                Some(m) => m.survivors()[channel],
                None => channel,
            };
            (trace.outputs[node], ch)
        }
        MaskSite::BlockInput { node, channel } => {
            let v = trace
                .block_inputs
                .iter()
                .find(|(k, _)| *k == node)
                .unwrap()
                .1;
            (v, channel)
        }
    }
}

/// Per-example gate sums `Σ_hw a·g` of one channel of `[N, C, ...]` tensors.
fn channel_gates(a: &Tensor, g: &[f64], ch: usize) -> Vec<f64> {
    let s = a.shape();
    let (n, c) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    (0..n)
        .map(|i| {
            let off = (i * c + ch) * plane;
            a.data()[off..off + plane]
                .iter()
                .zip(&g[off..off + plane])
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect()
}

pub fn first_order_terms(
    model: &ModelGraph,
    images: &Tensor,
    labels: &[usize],
) -> Result<FirstOrder> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let opts = ForwardOptions {
        mode: Mode::Eval,
        mask: None,
        track_params: true,
    };
    let trace = model.forward(&mut tape, x, opts)?;
    let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
    tape.backward(loss)?;
    let units = model.units();
    let n = labels.len() as f64;
    let mut terms = Vec::with_capacity(units.len());
    let mut example_squares = Vec::with_capacity(units.len());
    let mut gate_terms = Vec::with_capacity(units.len());
    for u in &units {
        let (v, ch) = site_channel(model, &trace, u.site);
        let a = tape.value(v);
        let ga = tape
            .grad(v)
            .ok_or(Error::Tape("activation gradient unavailable"))?;
        let gates = channel_gates(a, ga, ch);
        example_squares.push(gates.iter().map(|s| (n * s).powi(2)).sum());
        gate_terms.push(gates.iter().sum());
        let term = match u.kind {
            UnitKind::Filter => {
                let r = ParamRef {
                    node: u.id.layer,
                    slot: ParamSlot::Weight,
                };
                let wv = trace.param(r).unwrap();
                let w = tape.value(wv).row(u.id.filter);
                let g = tape
                    .grad(wv)
                    .ok_or(Error::Tape("weight gradient unavailable"))?;
                let len = w.len();
                let g = &g[u.id.filter * len..(u.id.filter + 1) * len];
                w.iter().zip(g).map(|(a, b)| a * b).sum()
            }
            UnitKind::BlockInput => gates.iter().sum(),
        };
        if !f64::is_finite(term) {
            return Err(Error::NonFinite { op: "importance" });
        }
        terms.push(term);
    }
    Ok(FirstOrder {
        units,
        terms,
        gate_terms,
        example_squares,
        examples: labels.len(),
    })
}

fn batch_indices(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Squared first-order terms averaged over consecutive batches of the
/// leading `data_fraction` of `data`.
pub fn taylor_importance(
    model: &ModelGraph,
    data: &Dataset,
    batch: usize,
    data_fraction: f64,
) -> Result<ImportanceTable> {
    let subset = data.head_fraction(data_fraction)?;
    let mut acc: Vec<f64> = Vec::new();
    let mut units = Vec::new();
    let batches = batch_indices(subset.len(), batch);
    for idx in &batches {
        let (x, y) = subset.batch(idx)?;
        let fo = first_order_terms(model, &x, &y)?;
        if acc.is_empty() {
            acc = vec![0.0; fo.terms.len()];
            units = fo.units.clone();
        }
        for (a, t) in acc.iter_mut().zip(&fo.terms) {
            *a += t * t;
        }
    }
    let nb = batches.len() as f64;
    Ok(ImportanceTable {
        metric: Metric::Taylor.name().into(),
        scores: units
            .iter()
            .zip(&acc)
            .map(|(u, a)| (u.id, a / nb))
            .collect(),
        batches: batches.len(),
        data_fraction,
        notes: vec![
            "bn_mode=eval".into(),
            "accumulation=mean_of_batch_squares".into(),
        ],
    })
}

/// Taylor scores divided by the L2 norm of their layer's score vector.
pub fn normalized_taylor_importance(
    model: &ModelGraph,
    data: &Dataset,
    batch: usize,
    data_fraction: f64,
) -> Result<ImportanceTable> {
    let mut t = taylor_importance(model, data, batch, data_fraction)?;
    normalize_per_layer(&mut t.scores);
    t.metric = Metric::Tfo.name().into();
    Ok(t)
}

pub fn normalize_per_layer(scores: &mut BTreeMap<FilterRef, f64>) {
    let mut norms: BTreeMap<usize, f64> = BTreeMap::new();
    for (r, s) in scores.iter() {
        *norms.entry(r.layer).or_insert(0.0) += s * s;
    }
    for (r, s) in scores.iter_mut() {
        let n = norms[&r.layer].sqrt();
        if n > 0.0 {
            *s /= n;
        }
    }
}

/// Fisher pruning signal: `(1 / 2N) Σ_n (N Σ_hw a·g)²` over the data.
pub fn fisher_importance(
    model: &ModelGraph,
    data: &Dataset,
    batch: usize,
    data_fraction: f64,
) -> Result<ImportanceTable> {
    let subset = data.head_fraction(data_fraction)?;
    let batches = batch_indices(subset.len(), batch);
    let mut acc: Vec<f64> = Vec::new();
    let mut units = Vec::new();
    for idx in &batches {
        let (x, y) = subset.batch(idx)?;
        let fo = first_order_terms(model, &x, &y)?;
        if acc.is_empty() {
            acc = vec![0.0; fo.terms.len()];
            units = fo.units.clone();
        }
        for (a, t) in acc.iter_mut().zip(&fo.example_squares) {
            *a += t;
        }
    }
    let n = subset.len() as f64;
    Ok(ImportanceTable {
        metric: Metric::Fisher.name().into(),
        scores: units
            .iter()
            .zip(&acc)
            .map(|(u, a)| (u.id, a / (2.0 * n)))
            .collect(),
        batches: batches.len(),
        data_fraction,
        notes: vec!["bn_mode=eval".into()],
    })
}

fn l1_of_unit(model: &ModelGraph, u: &Unit) -> f64 {
    match u.kind {
        UnitKind::Filter => model
            .conv(u.id.layer)
            .map(|c| c.weight.row(u.id.filter).iter().map(|v| v.abs()).sum())
            .unwrap_or(0.0),
        UnitKind::BlockInput => {
            // weights reading the channel: first branch conv and the projection
            let k = u.id.layer;
            let column = |w: &Tensor| -> f64 {
                let s = w.shape();
                let plane: usize = s[2..].iter().product();
                (0..s[0])
                    .map(|o| {
                        let off = (o * s[1] + u.id.filter) * plane;
                        w.data()[off..off + plane]
                            .iter()
                            .map(|v| v.abs())
                            .sum::<f64>()
                    })
                    .sum()
            };
            let mut total = model.conv(k + 1).map(|c| column(&c.weight)).unwrap_or(0.0);
            if let LayerKind::ResidualBegin {
                projection: Some(p),
                ..
            } = &model.nodes[k].kind
            {
                total += column(&p.conv.weight);
            }
            total
        }
    }
}

pub fn l1_importance(model: &ModelGraph) -> ImportanceTable {
    ImportanceTable {
        metric: Metric::L1.name().into(),
        scores: model
            .units()
            .iter()
            .map(|u| (u.id, l1_of_unit(model, u)))
            .collect(),
        batches: 1,
        data_fraction: 1.0,
        notes: Vec::new(),
    }
}

/// `|γ|` of the batchnorm channel that follows each filter; units without
/// one fall back to their L1 magnitude.
pub fn bn_scale_importance(model: &ModelGraph) -> ImportanceTable {
    let mut fallback = BTreeSet::new();
    let scores = model
        .units()
        .iter()
        .map(|u| {
            let gamma = match (u.kind, model.nodes.get(u.id.layer + 1).map(|n| &n.kind)) {
                (UnitKind::Filter, Some(LayerKind::BatchNorm(bn))) => {
                    Some(bn.gamma.data()[u.id.filter].abs())
                }
                _ => None,
            };
            let s = gamma.unwrap_or_else(|| {
                fallback.insert(u.id.layer);
                l1_of_unit(model, u)
            });
            (u.id, s)
        })
        .collect();
    ImportanceTable {
        metric: Metric::BnScale.name().into(),
        scores,
        batches: 1,
        data_fraction: 1.0,
        notes: fallback
            .iter()
            .map(|k| format!("fallback=l1:layer{k}"))
            .collect(),
    }
}

/// Dispatches on the metric. Data-driven metrics use `batch`-sized chunks
/// of the leading `data_fraction` of `data`.
pub fn compute(
    metric: Metric,
    model: &ModelGraph,
    data: &Dataset,
    batch: usize,
    data_fraction: f64,
) -> Result<ImportanceTable> {
    match metric {
        Metric::Taylor => taylor_importance(model, data, batch, data_fraction),
        Metric::Tfo => normalized_taylor_importance(model, data, batch, data_fraction),
        Metric::Fisher => fisher_importance(model, data, batch, data_fraction),
        Metric::L1 => Ok(l1_importance(model)),
        Metric::BnScale => Ok(bn_scale_importance(model)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupEstimate {
    pub group: Vec<FilterRef>,
    pub sum_of_individual: f64,
    pub joint: f64,
    pub correlation_term: f64,
}

/// Combines signed first-order terms of a group.
pub fn combine_group(group: &[FilterRef], terms: &[f64]) -> GroupEstimate {
    let sum: f64 = terms.iter().sum();
    let sum_of_individual = terms.iter().map(|t| t * t).sum();
    let mut correlation_term = 0.0;
    for i in 0..terms.len() {
        for j in i + 1..terms.len() {
            correlation_term += terms[i] * terms[j];
        }
    }
    GroupEstimate {
        group: group.to_vec(),
        sum_of_individual,
        joint: sum * sum,
        correlation_term,
    }
}

/// Looks up the group's first-order terms in a precomputed pass.
pub fn group_from_terms(fo: &FirstOrder, group: &[FilterRef]) -> Result<GroupEstimate> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("empty group".into()));
    }
    let distinct: BTreeSet<_> = group.iter().collect();
    if distinct.len() != group.len() {
        return Err(Error::InvalidArgument(
            "group contains duplicate units".into(),
        ));
    }
    let index: BTreeMap<FilterRef, usize> = fo
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id, i))
        .collect();
    let terms = group
        .iter()
        .map(|r| {
            index
                .get(r)
                .map(|&i| fo.terms[i])
                .ok_or_else(|| Error::InvalidArgument(format!("unit {r} not in model")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_group(group, &terms))
}

pub fn group_joint(
    model: &ModelGraph,
    images: &Tensor,
    labels: &[usize],
    group: &[FilterRef],
) -> Result<GroupEstimate> {
    let fo = first_order_terms(model, images, labels)?;
    group_from_terms(&fo, group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{build_model, Family, ModelSpec};

    fn toy(family: Family) -> (ModelGraph, Dataset) {
        let m = build_model(&ModelSpec::new(family, &[4, 8], 4, 5)).unwrap();
        let data = generate_synthetic(&SyntheticSpec {
            train: 32,
            val: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        (m, data.train)
    }

    #[test]
    fn dot_product_example() {
        let e = combine_group(&[FilterRef::new(0, 0)], &[1.0 * 3.0 + -2.0]);
        assert_eq!(e.joint, 1.0);
        assert_eq!(e.sum_of_individual, 1.0);
        assert_eq!(e.correlation_term, 0.0);
    }

    #[test]
    fn opposite_pair_cancels() {
        let g = [FilterRef::new(0, 0), FilterRef::new(0, 1)];
        let e = combine_group(&g, &[2.0, -2.0]);
        assert_eq!(
            (e.joint, e.sum_of_individual, e.correlation_term),
            (0.0, 8.0, -4.0)
        );
        assert_eq!(e.joint, e.sum_of_individual + 2.0 * e.correlation_term);
    }

    #[test]
    fn weight_terms_match_direct_dot_products() {
        let (m, data) = toy(Family::Plain);
        let (x, y) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let fo = first_order_terms(&m, &x, &y).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let opts = ForwardOptions {
            mode: Mode::Eval,
            mask: None,
            track_params: true,
        };
        let trace = m.forward(&mut tape, xv, opts).unwrap();
        let l = tape.softmax_cross_entropy(trace.logits, &y).unwrap();
        tape.backward(l).unwrap();
        let wv = trace
            .param(ParamRef {
                node: 0,
                slot: ParamSlot::Weight,
            })
            .unwrap();
        let g = tape.grad(wv).unwrap();
        let w = &m.conv(0).unwrap().weight;
        let d = w.row_len();
        for j in 0..w.dim0() {
            let expect: f64 = (0..d).map(|i| w.data()[j * d + i] * g[j * d + i]).sum();
            assert!((fo.terms[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_filter_scores_zero() {
        let (mut m, data) = toy(Family::Plain);
        m.nodes[0]
            .kind
            .conv_mut()
            .unwrap()
            .weight
            .row_mut(2)
            .fill(0.0);
        let t = taylor_importance(&m, &data, 16, 1.0).unwrap();
        assert_eq!(t.score(FilterRef::new(0, 2)), Some(0.0));
        assert_eq!(t.batches, 2);
        assert!(t.covers(&m));
        assert_eq!(l1_importance(&m).score(FilterRef::new(0, 2)), Some(0.0));
    }

    #[test]
    fn tables_cover_every_family() {
        for f in [Family::Plain, Family::Residual, Family::DepthSep] {
            let (m, data) = toy(f);
            for metric in [
                Metric::Taylor,
                Metric::Tfo,
                Metric::L1,
                Metric::BnScale,
                Metric::Fisher,
            ] {
                let t = compute(metric, &m, &data, 16, 0.5).unwrap();
                assert!(t.covers(&m), "{f} {metric}");
                assert!(t.scores.values().all(|&s| s >= 0.0 && s.is_finite()));
            }
        }
    }

    #[test]
    fn l1_example_and_scaling() {
        let spec = ModelSpec::new(Family::Plain, &[2], 2, 0).with_in_channels(1);
        let mut m = build_model(&spec).unwrap();
        let w = &mut m.nodes[0].kind.conv_mut().unwrap().weight;
        w.row_mut(0).fill(0.0);
        w.row_mut(0)[..3].copy_from_slice(&[1.0, -2.0, 3.0]);
        let a = l1_importance(&m);
        assert_eq!(a.score(FilterRef::new(0, 0)), Some(6.0));
        let mut scaled = m.clone();
        for k in [0, 3] {
            scaled.nodes[k]
                .kind
                .conv_mut()
                .unwrap()
                .weight
                .data_mut()
                .iter_mut()
                .for_each(|v| *v *= 2.5);
        }
        let b = l1_importance(&scaled);
        let rank = |t: &ImportanceTable| {
            let mut v: Vec<_> = t.scores.iter().collect();
            v.sort_by(|x, y| x.1.total_cmp(y.1));
            v.into_iter().map(|(r, _)| *r).collect::<Vec<_>>()
        };
        assert_eq!(rank(&a), rank(&b));
        for (r, s) in &a.scores {
            assert!((b.scores[r] - 2.5 * s).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_scale_and_fallback() {
        let (mut m, _) = toy(Family::Plain);
        if let LayerKind::BatchNorm(bn) = &mut m.nodes[1].kind {
            bn.gamma.data_mut()[..2].copy_from_slice(&[0.5, -0.7]);
        }
        let t = bn_scale_importance(&m);
        assert_eq!(t.score(FilterRef::new(0, 0)), Some(0.5));
        assert_eq!(t.score(FilterRef::new(0, 1)), Some(0.7));
        let head = m.nodes.len() - 1;
        assert!(t.notes.iter().any(|n| n.contains(&format!("layer{head}"))));
        assert_eq!(
            t.score(FilterRef::new(head, 0)),
            l1_importance(&m).score(FilterRef::new(head, 0))
        );
    }

    #[test]
    fn per_layer_normalization() {
        let mut s: BTreeMap<FilterRef, f64> = [
            (FilterRef::new(0, 0), 3.0),
            (FilterRef::new(0, 1), 4.0),
            (FilterRef::new(1, 0), 2.0),
            (FilterRef::new(1, 1), 2.0),
        ]
        .into_iter()
        .collect();
        normalize_per_layer(&mut s);
        assert!((s[&FilterRef::new(0, 0)] - 0.6).abs() < 1e-15);
        assert!((s[&FilterRef::new(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(s[&FilterRef::new(1, 0)], s[&FilterRef::new(1, 1)]);
    }

    #[test]
    fn random_groups_satisfy_decomposition() {
        let (m, data) = toy(Family::Residual);
        let (x, y) = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
        let fo = first_order_terms(&m, &x, &y).unwrap();
        let ids: Vec<FilterRef> = fo.units.iter().map(|u| u.id).collect();
        let e = group_from_terms(&fo, &ids[3..8]).unwrap();
        let rhs = e.sum_of_individual + 2.0 * e.correlation_term;
        assert!((e.joint - rhs).abs() <= 1e-6 * e.joint.abs().max(1e-300));
        let single = group_from_terms(&fo, &ids[..1]).unwrap();
        assert_eq!(single.joint, single.sum_of_individual);
        assert!(group_from_terms(&fo, &[ids[0], ids[0]]).is_err());
        assert!(group_from_terms(&fo, &[FilterRef::new(999, 0)]).is_err());
    }

    #[test]
    fn batch_order_invariance() {
        let (m, data) = toy(Family::Plain);
        let a = taylor_importance(&m, &data, 8, 1.0).unwrap();
        let rev: Vec<usize> = {
            let mut v: Vec<usize> = (0..data.len()).collect();
            // permute whole batches only
            let chunks: Vec<Vec<usize>> = v.chunks(8).map(|c| c.to_vec()).rev().collect();
            v = chunks.concat();
            v
        };
        let (images, labels) = data.batch(&rev).unwrap();
        let permuted = Dataset {
            images,
            labels,
            ..data.clone()
        };
        let b = taylor_importance(&m, &permuted, 8, 1.0).unwrap();
        for (r, s) in &a.scores {
            assert!((b.scores[r] - s).abs() <= 1e-12 * s.max(1e-30));
        }
    }

    #[test]
    fn csv_round_trip() {
        let (m, _) = toy(Family::DepthSep);
        let t = l1_importance(&m);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = ImportanceTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.scores, t.scores);
        assert_eq!(back.metric, "l1");
        assert!(ImportanceTable::read_csv(&b"nope\n"[..]).is_err());
    }

    #[test]
    fn first_order_error_is_quadratic_in_filter_scale() {
        let m0 = build_model(&ModelSpec::new(Family::Plain, &[2], 2, 3)).unwrap();
        let data = generate_synthetic(&SyntheticSpec {
            classes: 2,
            train: 16,
            val: 4,
            ..SyntheticSpec::default()
        })
        .unwrap()
        .train;
        let loss = |m: &ModelGraph| {
            crate::model::evaluate(m, &data.images, &data.labels, 16, None)
                .unwrap()
                .0
        };
        let gap = |scale: f64| {
            let mut m = m0.clone();
            m.nodes[0]
                .kind
                .conv_mut()
                .unwrap()
                .weight
                .row_mut(1)
                .iter_mut()
                .for_each(|v| *v *= scale);
            let fo = first_order_terms(&m, &data.images, &data.labels).unwrap();
            let mut z = m.clone();
            z.nodes[0]
                .kind
                .conv_mut()
                .unwrap()
                .weight
                .row_mut(1)
                .fill(0.0);
            (fo.terms[1] - (loss(&m) - loss(&z))).abs()
        };
        let (a, b) = (gap(0.02), gap(0.01));
        assert!(a < 1e-4, "{a}");
        assert!((b / a - 0.25).abs() < 0.05, "{a} {b}");
    }
}
