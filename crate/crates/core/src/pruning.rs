//! Victim selection, structural surgery and compression accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::importance::ImportanceTable;
use crate::model::{
    flops_count, param_count, FilterRef, LayerKind, MapToZeroRecord, ModelGraph, UnitKind,
};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioSchedule {
    pub total: f64,
    pub fractions: Vec<f64>,
}

impl RatioSchedule {
    /// `1 - Π(1 - p_k)` over the first `rounds` rounds.
    pub fn cumulative(&self, rounds: usize) -> f64 {
        1.0 - self.fractions[..rounds]
            .iter()
            .map(|p| 1.0 - p)
            .product::<f64>()
    }
}

/// Per-round fractions `p_k = (p/n) / ((1 - p) + k p/n)`, which remove an
/// equal share `p/n` of the original units each round.
pub fn schedule_ratios(p: f64, n: usize) -> Result<RatioSchedule> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "total pruning fraction must lie in (0, 1), got {p}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "at least one pruning round is required".into(),
        ));
    }
    let step = p / n as f64;
    Ok(RatioSchedule {
        total: p,
        fractions: (1..=n)
            .map(|k| step / ((1.0 - p) + k as f64 * step))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub victims: BTreeSet<FilterRef>,
    /// Units left in every prunable layer after the plan.
    pub survivors: BTreeMap<usize, usize>,
    pub metric: String,
    pub fraction: f64,
}

impl PrunePlan {
    pub fn empty(model: &ModelGraph) -> Self {
        PrunePlan {
            victims: BTreeSet::new(),
            survivors: model.layer_unit_counts(),
            metric: "none".into(),
            fraction: 0.0,
        }
    }

    pub fn from_victims(
        model: &ModelGraph,
        victims: BTreeSet<FilterRef>,
        metric: &str,
        fraction: f64,
    ) -> Result<Self> {
        let counts = model.layer_unit_counts();
        let mut survivors = counts.clone();
        for v in &victims {
            let c = survivors
                .get_mut(&v.layer)
                .ok_or_else(|| Error::Plan(format!("{v} is not a prunable unit")))?;
            if v.filter >= counts[&v.layer] {
                return Err(Error::Plan(format!("{v} is out of range")));
            }
            *c -= 1;
        }
        for (&layer, &count) in &counts {
            let removed = count - survivors[&layer];
            let cap = model.prune_cap(layer, count);
            if removed > cap {
                return Err(Error::Plan(format!(
                    "layer {layer}: removing {removed} of {count} units exceeds the cap of {cap}"
                )));
            }
        }
        Ok(PrunePlan {
            victims,
            survivors,
            metric: metric.to_string(),
            fraction,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.victims.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# metric={} fraction={}", self.metric, self.fraction)?;
        writeln!(w, "layer,filter")?;
        for v in &self.victims {
            writeln!(w, "{},{}", v.layer, v.filter)?;
        }
        Ok(())
    }

    /// Reads a plan file and validates it against `model`.
    pub fn read_csv<R: BufRead>(r: R, model: &ModelGraph) -> Result<Self> {
        let mut lines = r.lines();
        let meta = lines
            .next()
            .ok_or_else(|| Error::Format("empty plan file".into()))??;
        let (mut metric, mut fraction) = (String::from("manual"), 0.0);
        let meta = meta.strip_prefix('#').ok_or_else(|| {
            Error::Format("plan file must start with a `# metric=... fraction=...` line".into())
        })?;
        for field in meta.split_whitespace() {
            match field.split_once('=') {
                Some(("metric", v)) => metric = v.to_string(),
                Some(("fraction", v)) => {
                    fraction = v
                        .parse()
                        .map_err(|_| Error::Format(format!("bad fraction `{v}`")))?
                }
                _ => {
                    return Err(Error::Format(format!(
                        "unknown plan header field `{field}`"
                    )))
                }
            }
        }
        match lines.next() {
            Some(Ok(h)) if h.trim() == "layer,filter" => {}
            _ => {
                return Err(Error::Format(
                    "plan file lacks the `layer,filter` header".into(),
                ))
            }
        }
        let mut victims = BTreeSet::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad plan row `{line}`")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad plan row `{line}`")))
            };
            victims.insert(FilterRef::new(parse(a)?, parse(b)?));
        }
        PrunePlan::from_victims(model, victims, &metric, fraction)
    }
}

/// Number of victims for a fraction of `units`: floor, at least one.
pub fn victim_count(fraction: f64, units: usize) -> usize {
    ((fraction * units as f64 + 1e-9).floor() as usize).max(1)
}

/// Globally lowest-scoring units, skipping picks that would break a layer
/// cap. Ties are broken by `(layer, filter)`.
pub fn select_victims(
    table: &ImportanceTable,
    fraction: f64,
    model: &ModelGraph,
) -> Result<PrunePlan> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pruning fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if !table.covers(model) {
        return Err(Error::Plan(
            "importance table does not match the model's prunable units".into(),
        ));
    }
    let counts = model.layer_unit_counts();
    let total: usize = counts.values().sum();
    let want = victim_count(fraction, total);
    let mut ranked: Vec<(FilterRef, f64)> = table.scores.iter().map(|(r, s)| (*r, *s)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut removed: BTreeMap<usize, usize> = BTreeMap::new();
    let mut victims = BTreeSet::new();
    for (r, _) in ranked {
        if victims.len() == want {
            break;
        }
        let n = removed.entry(r.layer).or_insert(0);
        if *n < model.prune_cap(r.layer, counts[&r.layer]) {
            *n += 1;
            victims.insert(r);
        }
    }
    if victims.len() < want {
        return Err(Error::Plan(format!(
            "layer caps allow only {} of the {want} requested victims",
            victims.len()
        )));
    }
    PrunePlan::from_victims(model, victims, &table.metric, fraction)
}

/// A cap-respecting plan with uniformly random scores.
pub fn random_plan(model: &ModelGraph, fraction: f64, rng: &mut SeededRng) -> Result<PrunePlan> {
    use rand::Rng;
    let table = ImportanceTable {
        metric: "random".into(),
        scores: model
            .enumerate_prunable()
            .into_iter()
            .map(|r| (r, rng.random::<f64>()))
            .collect(),
        batches: 1,
        data_fraction: 1.0,
        notes: Vec::new(),
    };
    select_victims(&table, fraction, model)
}

fn next_consumer(model: &ModelGraph, after: usize) -> Result<usize> {
    (after + 1..model.nodes.len())
        .find(|&k| {
            matches!(
                model.nodes[k].kind,
                LayerKind::Conv(_)
                    | LayerKind::Pointwise(_)
                    | LayerKind::Classifier(_)
                    | LayerKind::Depthwise(_)
            )
        })
        .ok_or_else(|| Error::Plan(format!("no consumer after node {after}")))
}

fn expand(node: &mut crate::model::LayerNode, original: usize, victims: &[usize]) -> Result<()> {
    let rec = node
        .map_to_zero
        .get_or_insert_with(|| MapToZeroRecord::new(original));
    rec.prune_survivors(victims)
}

fn drop_rows(model: &mut ModelGraph, k: usize, keep: &[usize]) -> Result<()> {
    let conv = model.nodes[k]
        .kind
        .conv_mut()
        .ok_or_else(|| Error::Plan(format!("node {k} has no filters")))?;
    conv.weight = conv.weight.select_axis0(keep)?;
    Ok(())
}

fn drop_cols(model: &mut ModelGraph, k: usize, keep: &[usize]) -> Result<()> {
    let conv = model.nodes[k]
        .kind
        .conv_mut()
        .ok_or_else(|| Error::Plan(format!("node {k} has no filters")))?;
    conv.weight = conv.weight.select_axis1(keep)?;
    Ok(())
}

fn drop_bn(model: &mut ModelGraph, k: usize, keep: &[usize]) -> Result<()> {
    match &mut model.nodes[k].kind {
        LayerKind::BatchNorm(bn) => {
            *bn = bn.select(keep)?;
            Ok(())
        }
        _ => Err(Error::Plan(format!("node {k} is not a batchnorm"))),
    }
}

/// Materializes the pruned network. The input model is left untouched.
pub fn apply_plan(model: &ModelGraph, plan: &PrunePlan) -> Result<ModelGraph> {
    let checked =
        PrunePlan::from_victims(model, plan.victims.clone(), &plan.metric, plan.fraction)?;
    let counts = model.layer_unit_counts();
    let kinds: BTreeMap<usize, UnitKind> =
        model.units().iter().map(|u| (u.id.layer, u.kind)).collect();
    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for v in &checked.victims {
        by_layer.entry(v.layer).or_default().push(v.filter);
    }
    let mut out = model.clone();
    for (&k, victims) in &by_layer {
        let gone: BTreeSet<usize> = victims.iter().copied().collect();
        let keep: Vec<usize> = (0..counts[&k]).filter(|i| !gone.contains(i)).collect();
        if kinds[&k] == UnitKind::BlockInput {
            let stream = model.stream_channels_into(k);
            if let LayerKind::ResidualBegin {
                projection,
                input_map,
            } = &mut out.nodes[k].kind
            {
                input_map
                    .get_or_insert_with(|| MapToZeroRecord::new(stream))
                    .prune_survivors(victims)?;
                if let Some(p) = projection {
                    p.conv.weight = p.conv.weight.select_axis1(&keep)?;
                }
            }
            drop_cols(&mut out, k + 1, &keep)?;
            continue;
        }
        let filters = counts[&k];
        drop_rows(&mut out, k, &keep)?;
        match &model.nodes[k].kind {
            LayerKind::Classifier(_) => expand(&mut out.nodes[k], filters, victims)?,
            _ => {
                drop_bn(&mut out, k + 1, &keep)?;
                let residual = model.family() == crate::model::Family::Residual;
                if residual && model.in_residual_block(k) {
                    let conv1 = matches!(model.nodes[k - 1].kind, LayerKind::ResidualBegin { .. });
                    if conv1 {
                        drop_cols(&mut out, k + 3, &keep)?;
                    } else {
                        expand(&mut out.nodes[k + 1], filters, victims)?;
                    }
                } else if residual {
                    expand(&mut out.nodes[k + 2], filters, victims)?;
                } else {
                    let c = next_consumer(model, k)?;
                    if matches!(model.nodes[c].kind, LayerKind::Depthwise(_)) {
                        drop_rows(&mut out, c, &keep)?;
                        drop_bn(&mut out, c + 1, &keep)?;
                        let c2 = next_consumer(model, c)?;
                        drop_cols(&mut out, c2, &keep)?;
                    } else {
                        drop_cols(&mut out, c, &keep)?;
                    }
                }
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionReport {
    pub params_original: u64,
    pub params_pruned: u64,
    pub flops_original: u64,
    pub flops_pruned: u64,
    pub cr: f64,
    pub flops_reduction: f64,
    pub eff: f64,
}

/// `CR * (1 - FLOPs_pruned / FLOPs_original)`, with the reduction given
/// as a fraction.
pub fn eff(cr: f64, flops_reduction: f64) -> f64 {
    cr * flops_reduction
}

pub fn compression_report(
    original: &ModelGraph,
    pruned: &ModelGraph,
    input: [usize; 3],
) -> Result<CompressionReport> {
    let (po, pp) = (param_count(original).total, param_count(pruned).total);
    let (fo, fp) = (
        flops_count(original, input)?.total,
        flops_count(pruned, input)?.total,
    );
    if pp == 0 || fo == 0 {
        return Err(Error::Model(
            "degenerate model in compression report".into(),
        ));
    }
    let cr = po as f64 / pp as f64;
    let flops_reduction = 1.0 - fp as f64 / fo as f64;
    Ok(CompressionReport {
        params_original: po,
        params_pruned: pp,
        flops_original: fo,
        flops_pruned: fp,
        cr,
        flops_reduction,
        eff: eff(cr, flops_reduction),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, write_model, Family, ModelSpec, UnitMask};
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    fn table(scores: &[(FilterRef, f64)]) -> ImportanceTable {
        ImportanceTable {
            metric: "test".into(),
            scores: scores.iter().copied().collect(),
            batches: 1,
            data_fraction: 1.0,
            notes: vec![],
        }
    }

    #[test]
    fn worked_schedule() {
        let s = schedule_ratios(0.8, 2).unwrap();
        assert!((s.fractions[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.fractions[1] - 0.4).abs() < 1e-15);
        assert!((s.cumulative(2) - 0.8).abs() < 1e-12);
        assert_eq!(schedule_ratios(0.37, 1).unwrap().fractions, vec![0.37]);
        assert!(schedule_ratios(1.0, 2).is_err());
        assert!(schedule_ratios(0.0, 2).is_err());
        assert!(schedule_ratios(0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_telescopes(p in 0.05f64..0.95, n in 1usize..=10) {
            let s = schedule_ratios(p, n).unwrap();
            prop_assert!((s.cumulative(n) - p).abs() < 1e-12);
            for w in s.fractions.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            let step = p / n as f64;
            for k in 1..=n {
                let expect = k as f64 * step / ((1.0 - p) + k as f64 * step);
                prop_assert!((s.cumulative(k) - expect).abs() < 1e-12);
            }
        }
    }

    fn plain() -> ModelGraph {
        build_model(&ModelSpec::new(Family::Plain, &[4, 6], 2, 0)).unwrap()
    }

    #[test]
    fn lowest_scores_are_selected() {
        let m = plain();
        let refs = m.enumerate_prunable();
        // layer 1 holds the lowest scores, in reverse filter order
        let t = table(
            &refs
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    (
                        *r,
                        if r.layer == 4 {
                            10.0 - r.filter as f64
                        } else {
                            100.0 + i as f64
                        },
                    )
                })
                .collect::<Vec<_>>(),
        );
        let plan = select_victims(&t, 0.25, &m).unwrap();
        assert_eq!(plan.victims.len(), 3);
        let expect: BTreeSet<FilterRef> = [3, 4, 5].iter().map(|&f| FilterRef::new(4, f)).collect();
        assert_eq!(plan.victims, expect);
    }

    #[test]
    fn ties_follow_structural_order() {
        let m = plain();
        let refs = m.enumerate_prunable();
        let t = table(&refs.iter().map(|r| (*r, 1.0)).collect::<Vec<_>>());
        let plan = select_victims(&t, 0.3, &m).unwrap();
        assert_eq!(plan.victims, refs[..3].iter().copied().collect());
    }

    #[test]
    fn residual_floor_spares_last_filter() {
        let m = build_model(&ModelSpec::new(Family::Residual, &[4], 2, 0)).unwrap();
        let refs = m.enumerate_prunable();
        let conv1 = refs
            .iter()
            .find(|r| m.in_residual_block(r.layer) && m.conv(r.layer).is_some())
            .unwrap()
            .layer;
        // conv1 scores lowest everywhere
        let t = table(
            &refs
                .iter()
                .map(|r| {
                    (
                        *r,
                        if r.layer == conv1 {
                            r.filter as f64 * 1e-3
                        } else {
                            1.0 + r.filter as f64
                        },
                    )
                })
                .collect::<Vec<_>>(),
        );
        let plan = select_victims(&t, 0.3, &m).unwrap();
        assert_eq!(plan.survivors[&conv1], 1);
        assert!(!plan.victims.contains(&FilterRef::new(conv1, 3)));
        assert!(plan.victims.len() == victim_count(0.3, refs.len()));
    }

    #[test]
    fn unattainable_fraction_errors() {
        let m = build_model(&ModelSpec::new(Family::Plain, &[2], 2, 0)).unwrap();
        let t = table(
            &m.enumerate_prunable()
                .iter()
                .map(|r| (*r, 0.0))
                .collect::<Vec<_>>(),
        );
        assert!(select_victims(&t, 0.9, &m).is_err());
        assert!(select_victims(&t, 0.0, &m).is_err());
    }

    #[test]
    fn eff_anchors() {
        assert!((eff(15.7, 0.835) - 13.1).abs() < 0.05);
        assert!((eff(14.6, 0.724) - 10.6).abs() < 0.05);
        assert!((eff(27.3, 0.807) - 22.0).abs() < 0.05);
    }

    #[test]
    fn self_report_is_neutral() {
        let m = plain();
        let r = compression_report(&m, &m, [3, 16, 16]).unwrap();
        assert_eq!((r.cr, r.flops_reduction, r.eff), (1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_plan_is_bit_identical() {
        let m = plain();
        let p = apply_plan(&m, &PrunePlan::empty(&m)).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_model(&mut a, &m).unwrap();
        write_model(&mut b, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn halving_isolated_layer_halves_macs() {
        let m = build_model(&ModelSpec::new(Family::Plain, &[4], 2, 0)).unwrap();
        let victims = [FilterRef::new(0, 0), FilterRef::new(0, 2)]
            .into_iter()
            .collect();
        let p = apply_plan(&m, &PrunePlan::from_victims(&m, victims, "t", 0.5).unwrap()).unwrap();
        let (a, b) = (
            flops_count(&m, [3, 8, 8]).unwrap(),
            flops_count(&p, [3, 8, 8]).unwrap(),
        );
        assert_eq!(a.per_layer[0].1, 2 * b.per_layer[0].1);
        assert_eq!(p.conv(3).unwrap().in_channels(), 2);
    }

    #[test]
    fn plan_file_round_trip() {
        let m = plain();
        let plan = random_plan(&m, 0.3, &mut seeded(1)).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        let back = PrunePlan::read_csv(buf.as_slice(), &m).unwrap();
        assert_eq!(back, plan);
        assert!(PrunePlan::read_csv(&b"layer,filter\n"[..], &m).is_err());
        let over = "# metric=m fraction=0.5\nlayer,filter\n0,0\n0,1\n0,2\n0,3\n";
        assert!(PrunePlan::read_csv(over.as_bytes(), &m).is_err());
    }

    #[test]
    fn depthsep_coupling_removes_dependents() {
        let m = build_model(&ModelSpec::new(Family::DepthSep, &[4, 8], 2, 0)).unwrap();
        let pw = m
            .nodes
            .iter()
            .position(|n| n.kind.name() == "pointwise")
            .unwrap();
        let victims = [FilterRef::new(pw, 1)].into_iter().collect();
        let p = apply_plan(&m, &PrunePlan::from_victims(&m, victims, "t", 0.1).unwrap()).unwrap();
        assert_eq!(p.conv(pw + 3).unwrap().filters(), 3);
        assert_eq!(p.conv(pw + 6).unwrap().in_channels(), 3);
    }

    fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
            .fold(0.0, f64::max)
    }

    fn check_equivalence(model: &ModelGraph, plan: &PrunePlan, seed: u64) -> f64 {
        let pruned = apply_plan(model, plan).unwrap();
        let x = normal_tensor(&[2, 3, 16, 16], 1.0, &mut seeded(seed));
        let mask: UnitMask = plan.victims.clone();
        let a = pruned.predict(&x, None).unwrap();
        let b = model.predict(&x, Some(&mask)).unwrap();
        max_rel_diff(a.data(), b.data())
    }

    fn perturbed(family: Family, seed: u64) -> ModelGraph {
        // non-trivial batchnorm state so dropping channels is visible
        let mut m = build_model(&ModelSpec::new(family, &[4, 8], 3, seed)).unwrap();
        let mut rng = seeded(seed + 100);
        for node in &mut m.nodes {
            if let LayerKind::BatchNorm(bn) = &mut node.kind {
                let c = bn.channels();
                bn.beta = normal_tensor(&[c], 0.5, &mut rng);
                bn.gamma = normal_tensor(&[c], 1.0, &mut rng);
                bn.running_mean = normal_tensor(&[c], 0.3, &mut rng).into_data();
                bn.running_var = normal_tensor(&[c], 0.3, &mut rng)
                    .data()
                    .iter()
                    .map(|v| 0.5 + v.abs())
                    .collect();
            }
        }
        m
    }

    #[test]
    fn zero_masking_equivalence_all_families() {
        for family in [Family::Plain, Family::Residual, Family::DepthSep] {
            for seed in 0..8 {
                let m = perturbed(family, seed);
                let plan = random_plan(&m, 0.2 + 0.05 * seed as f64, &mut seeded(seed)).unwrap();
                let d = check_equivalence(&m, &plan, seed);
                assert!(d < 1e-9, "{family} seed {seed}: {d}");
            }
        }
    }

    #[test]
    fn repeated_surgery_stays_equivalent() {
        for family in [Family::Plain, Family::Residual, Family::DepthSep] {
            let m = perturbed(family, 3);
            let first = apply_plan(&m, &random_plan(&m, 0.3, &mut seeded(1)).unwrap()).unwrap();
            let plan = random_plan(&first, 0.3, &mut seeded(2)).unwrap();
            assert!(check_equivalence(&first, &plan, 5) < 1e-9, "{family}");
            let second = apply_plan(&first, &plan).unwrap();
            assert!(param_count(&second).total < param_count(&first).total);
            assert!(
                flops_count(&second, [3, 16, 16]).unwrap().total
                    < flops_count(&first, [3, 16, 16]).unwrap().total
            );
        }
    }
}
