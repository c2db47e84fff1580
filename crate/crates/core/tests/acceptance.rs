//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.
//!
//! `cargo test --test acceptance -- 4 9` runs only the listed criteria.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use orthoprune::data::{generate_synthetic, Split, SyntheticSpec};
use orthoprune::engine::Tape;
use orthoprune::experiments::{
    gram_offdiag_stats, partial_correlation_stats, reliability_experiment, ReliabilityConfig,
    ReliabilityResult,
};
use orthoprune::gradcheck::{standard_suite, DEFAULT_TOLERANCE};
use orthoprune::importance::{first_order_terms, group_from_terms, taylor_importance};
use orthoprune::model::{
    build_model, evaluate, Family, ForwardOptions, LayerKind, ModelGraph, ModelSpec, ParamRef,
    ParamSlot, UnitKind, UnitMask,
};
use orthoprune::ortho::{self, OrthoConfig};
use orthoprune::pruning::{apply_plan, compression_report, eff, random_plan, schedule_ratios};
use orthoprune::rng::{normal_tensor, seeded};
use orthoprune::trainer::{early_bird_extract, train, EarlyBirdConfig, TicketMetric, TrainConfig};
use rand::seq::index::sample;
use rand::Rng;

const SEEDS: u64 = 5;
const NOISE: f64 = 1.0;
const WIDTHS: [usize; 3] = [8, 16, 32];
const CLASSES: usize = 4;
const LAMBDA: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn task(seed: u64) -> Split {
    generate_synthetic(&SyntheticSpec {
        seed,
        noise: NOISE,
        classes: CLASSES,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn toy_spec(seed: u64) -> ModelSpec {
    ModelSpec::new(Family::Plain, &WIDTHS, CLASSES, seed)
}

/// A base model and its two fine-tuned continuations.
struct Twins {
    split: Split,
    base: ModelGraph,
    plain: ModelGraph,
    ortho: ModelGraph,
}

fn twins_for(seed: u64) -> Twins {
    let split = task(seed);
    let mut base = build_model(&toy_spec(seed)).unwrap();
    let base_cfg = TrainConfig {
        epochs: 15,
        seed,
        ..TrainConfig::default()
    };
    train(&mut base, &split, &base_cfg, "base").unwrap();
    let ft = TrainConfig {
        epochs: 40,
        tail_epochs: 2,
        seed: seed + 100,
        ..TrainConfig::default()
    };
    let mut plain = base.clone();
    train(&mut plain, &split, &ft, "finetune").unwrap();
    let mut reg = base.clone();
    train(
        &mut reg,
        &split,
        &ft.with_ortho(OrthoConfig::new(LAMBDA)),
        "finetune",
    )
    .unwrap();
    Twins {
        split,
        base,
        plain,
        ortho: reg,
    }
}

fn twins() -> &'static [Twins] {
    static CELL: OnceLock<Vec<Twins>> = OnceLock::new();
    CELL.get_or_init(|| {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..SEEDS)
                .map(|seed| s.spawn(move || twins_for(seed)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    })
}

fn c1_eff_anchors() -> Outcome {
    let anchors = [
        (15.7, 0.835, 13.1),
        (14.6, 0.724, 10.6),
        (27.3, 0.807, 22.0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (cr, fr, expect) in anchors {
        let got = eff(cr, fr);
        pass &= (got - expect).abs() <= 0.05;
        parts.push(format!("{got:.3}/{expect}"));
    }
    // the report itself, against hand-counted totals
    let m = build_model(&ModelSpec::new(Family::Plain, &[4, 8], 3, 0)).unwrap();
    let plan = random_plan(&m, 0.4, &mut seeded(1)).unwrap();
    let p = apply_plan(&m, &plan).unwrap();
    let r = compression_report(&m, &p, [3, 8, 8]).unwrap();
    let (po, pp) = (count_params(&m), count_params(&p));
    let (fo, fp) = (count_macs(&m, 8), count_macs(&p, 8));
    let oracle = (po as f64 / pp as f64) * (1.0 - fp as f64 / fo as f64);
    pass &= r.params_original == po
        && r.params_pruned == pp
        && r.flops_original == fo
        && r.flops_pruned == fp;
    pass &= (r.eff - oracle).abs() < 1e-12;
    parts.push(format!("report eff {:.4} oracle {oracle:.4}", r.eff));
    outcome(pass, parts.join(" "))
}

/// Conv weights plus batchnorm affine pairs of a plain network.
fn count_params(m: &ModelGraph) -> u64 {
    let mut n = 0;
    for node in &m.nodes {
        match &node.kind {
            LayerKind::BatchNorm(bn) => n += 2 * bn.channels() as u64,
            k => {
                if let Some(c) = k.conv() {
                    n += c.weight.numel() as u64;
                }
            }
        }
    }
    n
}

/// Multiply-accumulates of a plain network with 2x2 pooling between
/// stages and a global-pooled classifier.
fn count_macs(m: &ModelGraph, extent: usize) -> u64 {
    let mut hw = extent;
    let mut total = 0;
    for node in &m.nodes {
        match &node.kind {
            LayerKind::MaxPool => hw /= 2,
            k => {
                if let Some(c) = k.conv() {
                    let s = c.weight.shape();
                    let out = (hw + 2 * c.pad - s[2]) / c.stride + 1;
                    total += (s[0] * s[1] * s[2] * s[3] * out * out) as u64;
                    hw = out;
                }
            }
        }
    }
    total
}

fn c2_schedule() -> Outcome {
    let mut worst: f64 = 0.0;
    for pi in 1..20 {
        let p = pi as f64 * 0.05;
        for n in 1..=12 {
            let s = schedule_ratios(p, n).unwrap();
            let step = p / n as f64;
            let remaining = |k: usize| (1.0 - p) + k as f64 * step;
            let mut kept = 1.0;
            for (k, &f) in s.fractions.iter().enumerate() {
                let oracle = 1.0 - remaining(k) / remaining(k + 1);
                worst = worst.max((f - oracle).abs());
                kept *= 1.0 - f;
            }
            worst = worst.max((1.0 - kept - p).abs());
        }
    }
    let w = schedule_ratios(0.8, 2).unwrap().fractions;
    let worked = (w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12;
    outcome(
        worst < 1e-12 && worked,
        format!(
            "max deviation {worst:.2e}, (0.8, 2) -> ({:.6}, {:.6})",
            w[0], w[1]
        ),
    )
}

/// `wᵀg` per filter straight from the tape, independent of the
/// importance module.
fn oracle_terms(
    m: &ModelGraph,
    x: &orthoprune::Tensor,
    y: &[usize],
) -> Vec<(orthoprune::model::FilterRef, f64)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let trace = m
        .forward(&mut tape, xv, ForwardOptions::eval().tracking(true))
        .unwrap();
    let loss = tape.softmax_cross_entropy(trace.logits, y).unwrap();
    tape.backward(loss).unwrap();
    let mut out = Vec::new();
    for u in m.units() {
        if u.kind != UnitKind::Filter {
            continue;
        }
        let r = ParamRef {
            node: u.id.layer,
            slot: ParamSlot::Weight,
        };
        let v = trace.param(r).unwrap();
        let w = tape.value(v);
        let g = tape.grad(v).unwrap();
        let len = w.row_len();
        let off = u.id.filter * len;
        let dot: f64 = w.data()[off..off + len]
            .iter()
            .zip(&g[off..off + len])
            .map(|(a, b)| a * b)
            .sum();
        out.push((u.id, dot));
    }
    out
}

fn c3_group_identity() -> Outcome {
    let split = task(7);
    let m = build_model(&ModelSpec::new(Family::Plain, &WIDTHS, CLASSES, 7)).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, y) = split.train.batch(&idx).unwrap();
    let fo = first_order_terms(&m, &x, &y).unwrap();
    let oracle = oracle_terms(&m, &x, &y);
    let mut rng = seeded(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let size = rng.random_range(2..=oracle.len() / 2);
        let picks = sample(&mut rng, oracle.len(), size).into_vec();
        let group: Vec<_> = picks.iter().map(|&i| oracle[i].0).collect();
        let e = group_from_terms(&fo, &group).unwrap();
        let t: Vec<f64> = picks.iter().map(|&i| oracle[i].1).collect();
        let joint = t.iter().sum::<f64>().powi(2);
        let identity = e.sum_of_individual + 2.0 * e.correlation_term;
        let scale = joint.abs().max(e.sum_of_individual).max(1e-300);
        worst = worst
            .max((e.joint - identity).abs() / scale)
            .max((e.joint - joint).abs() / scale);
    }
    outcome(
        worst <= 1e-6,
        format!("max relative deviation {worst:.2e} over 1000 groups"),
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn c4_first_order_oracle() -> Outcome {
    let t = &twins()[0];
    let data = &t.split.train;
    let batch = ReliabilityConfig::default().importance_batch;
    let scores = taylor_importance(&t.base, data, batch, 1.0).unwrap();
    let (l0, _) = evaluate(&t.base, &data.images, &data.labels, 512, None).unwrap();
    let (mut est, mut brute) = (Vec::new(), Vec::new());
    for (r, s) in &scores.scores {
        let mask: UnitMask = [*r].into_iter().collect();
        let (l1, _) = evaluate(&t.base, &data.images, &data.labels, 512, Some(&mask)).unwrap();
        est.push(*s);
        brute.push((l1 - l0).powi(2));
    }
    let r = pearson(&est, &brute);
    outcome(
        r > 0.9,
        format!(
            "pearson r = {r:.4} over {} filters, base loss {l0:.3}",
            est.len()
        ),
    )
}

fn r_at(grid: &[ReliabilityResult], gf: f64) -> f64 {
    grid.iter()
        .find(|c| (c.group_fraction - gf).abs() < 1e-12)
        .and_then(|c| c.pearson_r)
        .unwrap_or(f64::NAN)
}

fn c5_reliability() -> Outcome {
    let rows: Vec<(f64, f64, f64, f64, f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = twins()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                s.spawn(move || {
                    let cfg = ReliabilityConfig {
                        seed: 1000 * i as u64,
                        ..ReliabilityConfig::default()
                    };
                    let u = reliability_experiment(&t.plain, &t.split.train, &cfg).unwrap();
                    let r = reliability_experiment(&t.ortho, &t.split.train, &cfg).unwrap();
                    (
                        r_at(&u, 0.1),
                        r_at(&u, 0.2),
                        r_at(&u, 0.4),
                        r_at(&r, 0.1),
                        r_at(&r, 0.2),
                        r_at(&r, 0.4),
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let ahead = rows.iter().filter(|r| r.4 > r.1 && r.5 > r.2).count();
    let shape = rows.iter().filter(|r| r.2 < 0.5 && r.5 > 0.5).count();
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "[{:.2} {:.2} {:.2} | {:.2} {:.2} {:.2}]",
                r.0, r.1, r.2, r.3, r.4, r.5
            )
        })
        .collect();
    outcome(
        ahead >= 4 && shape * 2 > rows.len(),
        format!(
            "regularized ahead at 0.2 and 0.4 in {ahead}/5, split around 0.5 at 0.4 in {shape}/5; r unreg|reg at 0.1 0.2 0.4: {}",
            table.join(" ")
        ),
    )
}

fn c6_partial_correlation() -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for t in &twins()[..3] {
        let idx: Vec<usize> = (0..128).collect();
        let probe = t.split.val.images.select_axis0(&idx).unwrap();
        let u = partial_correlation_stats(&t.plain, &probe).unwrap();
        let r = partial_correlation_stats(&t.ortho, &probe).unwrap();
        let all = u.len() == r.len()
            && u.iter()
                .zip(&r)
                .all(|(a, b)| b.summary.median < a.summary.median);
        wins += all as usize;
        parts.push(
            u.iter()
                .zip(&r)
                .map(|(a, b)| format!("{:.3}>{:.3}", a.summary.median, b.summary.median))
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    outcome(
        wins >= 2,
        format!(
            "{wins}/3 seeds lower in every layer; medians {}",
            parts.join(" ")
        ),
    )
}

fn perturbed(family: Family, seed: u64) -> ModelGraph {
    let mut m = build_model(&ModelSpec::new(family, &[6, 12], 3, seed)).unwrap();
    let mut rng = seeded(seed ^ 0x5eed);
    for node in &mut m.nodes {
        if let LayerKind::BatchNorm(bn) = &mut node.kind {
            let c = bn.channels();
            bn.gamma = normal_tensor(&[c], 1.0, &mut rng);
            bn.beta = normal_tensor(&[c], 0.5, &mut rng);
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

fn c7_surgery() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut effect: f64 = 0.0;
    let mut features = BTreeSet::new();
    for family in [Family::Plain, Family::Residual, Family::DepthSep] {
        for trial in 0..50u64 {
            let m = perturbed(family, trial);
            let mut rng = seeded(trial + 77);
            let fraction = rng.random_range(0.05..0.7);
            let plan = random_plan(&m, fraction, &mut rng).unwrap();
            let pruned = apply_plan(&m, &plan).unwrap();
            if pruned.nodes.iter().any(|n| n.map_to_zero.is_some()) {
                features.insert("map-to-zero");
            }
            let depthwise = |g: &ModelGraph| -> usize {
                g.nodes
                    .iter()
                    .filter_map(|n| match &n.kind {
                        LayerKind::Depthwise(c) => Some(c.weight.dim0()),
                        _ => None,
                    })
                    .sum()
            };
            if depthwise(&pruned) < depthwise(&m) {
                features.insert("coupling");
            }
            let x = normal_tensor(&[2, 3, 16, 16], 1.0, &mut rng);
            let a = pruned.predict(&x, None).unwrap();
            let b = m.predict(&x, Some(&plan.victims)).unwrap();
            let c = m.predict(&x, None).unwrap();
            for ((p, q), r) in a.data().iter().zip(b.data()).zip(c.data()) {
                worst = worst.max((p - q).abs() / q.abs().max(1.0));
                effect = effect.max((r - q).abs());
            }
        }
    }
    outcome(
        worst <= 1e-5 && effect > 1e-3 && features.len() == 2,
        format!(
            "150 plans, max deviation {worst:.2e}, masking moves outputs by up to {effect:.2}, exercised {:?}",
            features
        ),
    )
}

fn c8_gradients() -> Outcome {
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in [0, 1] {
        for c in standard_suite(seed).unwrap() {
            count += 1;
            worst = worst.max(c.max_error());
            if !c.passed(DEFAULT_TOLERANCE) {
                failed.push(format!("{}@{seed}", c.name));
            }
        }
    }
    outcome(
        failed.is_empty(),
        format!(
            "{count} checks, max relative error {worst:.2e}, failed {:?}",
            failed
        ),
    )
}

fn c9_orthonormality() -> Outcome {
    let t = &twins()[0];
    let stats = gram_offdiag_stats(&t.ortho).unwrap();
    let mut pass = !stats.is_empty();
    let mut parts = Vec::new();
    for g in &stats {
        let before = ortho::gram_penalty(&t.base.conv(g.layer).unwrap().weight).unwrap();
        let after = ortho::gram_penalty(&t.ortho.conv(g.layer).unwrap().weight).unwrap();
        let ratio = after / before;
        pass &= ratio < 0.1 && (0.8..=1.2).contains(&g.sigma_median);
        parts.push(format!(
            "layer {}: {ratio:.4} sigma {:.3}",
            g.layer, g.sigma_median
        ));
    }
    outcome(pass, parts.join(", "))
}

fn ticket(seed: u64, metric: TicketMetric, fraction: f64) -> orthoprune::Result<f64> {
    let split = task(seed);
    let cfg = TrainConfig {
        epochs: 20,
        tail_epochs: 2,
        seed,
        ..TrainConfig::default()
    };
    let ebt = EarlyBirdConfig {
        pretrain_fraction: 0.15,
        prune_fraction: fraction,
        metric,
        ..EarlyBirdConfig::default()
    };
    let out = early_bird_extract(&toy_spec(seed), &split, &cfg, &ebt)?;
    out.model.validate()?;
    Ok(out.val_acc)
}

fn c10_early_bird() -> Outcome {
    let runs: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..SEEDS)
            .map(|seed| {
                s.spawn(move || {
                    (
                        ticket(seed, TicketMetric::Orthoreg, 0.5),
                        ticket(seed, TicketMetric::BnScale, 0.5),
                        ticket(seed, TicketMetric::Orthoreg, 0.75),
                        ticket(seed, TicketMetric::BnScale, 0.75),
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut wins = 0;
    let mut extreme_ok = true;
    let mut parts = Vec::new();
    for (o, b, o75, b75) in &runs {
        match (o, b) {
            (Ok(o), Ok(b)) => {
                wins += (o >= b) as usize;
                parts.push(format!("{o:.3}/{b:.3}"));
            }
            _ => parts.push("error".into()),
        }
        extreme_ok &= o75.is_ok() && b75.is_ok();
    }
    outcome(
        wins >= 3 && extreme_ok,
        format!(
            "orthoreg >= bn_scale in {wins}/5 at 50% ({}), 75% tickets trained: {extreme_ok}",
            parts.join(" ")
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("eff_anchors", c1_eff_anchors),
        ("schedule_closed_form", c2_schedule),
        ("group_importance_identity", c3_group_identity),
        ("first_order_oracle", c4_first_order_oracle),
        ("reliability_separation", c5_reliability),
        ("redundancy_reduction", c6_partial_correlation),
        ("surgery_exactness", c7_surgery),
        ("gradient_suite", c8_gradients),
        ("orthonormality_attainment", c9_orthonormality),
        ("early_bird_sanity", c10_early_bird),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        failures += !o.pass as usize;
        println!(
            "criterion {id:>2} {name}: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
