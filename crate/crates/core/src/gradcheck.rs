//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it verifies.

use crate::engine::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{build_model, Family, ForwardOptions, LayerKind, ModelGraph, ModelSpec};
use crate::ortho;
use crate::pruning::{apply_plan, PrunePlan};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Step for whole networks. Entries that straddle a kink are skipped, so
/// this only has to stay above roundoff for near-zero gradients.
pub const OBJECTIVE_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    /// One relative error per checked input tensor.
    pub relative_errors: Vec<f64>,
    /// Entries left out because the perturbation crossed a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Analytic gradients of `f` with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central differences of the scalar `f` with step `h`.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].numel()];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = evaluate(&work, f)?;
            work[t].data_mut()[k] = orig - h;
            let minus = evaluate(&work, f)?;
            work[t].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn check<F>(name: &str, inputs: &[Tensor], f: F, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, h)?;
    Ok(GradCheck {
        name: name.to_string(),
        relative_errors: analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(a, n))
            .collect(),
        skipped: 0,
    })
}

fn push<F>(out: &mut Vec<GradCheck>, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    out.push(check(name, &inputs, f, DEFAULT_STEP)?);
    Ok(())
}

/// Every differentiable tape op, each behind a random projection.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    let x4 = normal_tensor(&[2, 3, 5, 5], 1.0, &mut rng);
    let w = normal_tensor(&[4, 3, 3, 3], 0.5, &mut rng);
    let proj = normal_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
    push(
        &mut out,
        "conv2d",
        vec![x4.clone(), w.clone(), proj.clone()],
        |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        },
    )?;

    let dw = normal_tensor(&[3, 1, 3, 3], 0.5, &mut rng);
    let proj = normal_tensor(&[2, 3, 5, 5], 1.0, &mut rng);
    push(
        &mut out,
        "depthwise_conv2d",
        vec![x4.clone(), dw, proj],
        |t, v| {
            let y = t.depthwise_conv2d(v[0], v[1], 1, 1)?;
            let p = t.mul(y, v[2])?;
            t.sum(p)
        },
    )?;

    let gamma = normal_tensor(&[3], 1.0, &mut rng);
    let beta = normal_tensor(&[3], 1.0, &mut rng);
    let proj = normal_tensor(&[2, 3, 5, 5], 1.0, &mut rng);
    push(
        &mut out,
        "batchnorm(train)",
        vec![x4.clone(), gamma.clone(), beta.clone(), proj.clone()],
        |t, v| {
            let y = t.batchnorm(v[0], v[1], v[2], BnMode::Train)?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        },
    )?;
    push(
        &mut out,
        "batchnorm(eval)",
        vec![x4.clone(), gamma, beta, proj.clone()],
        |t, v| {
            let y = t.batchnorm(
                v[0],
                v[1],
                v[2],
                BnMode::Eval {
                    mean: &[0.1, -0.2, 0.3],
                    var: &[0.5, 1.5, 2.0],
                },
            )?;
            let p = t.mul(y, v[3])?;
            t.sum(p)
        },
    )?;

    push(&mut out, "relu + max_pool2", vec![x4.clone()], |t, v| {
        let r = t.relu(v[0])?;
        let sq = t.mul(r, r)?;
        let p = t.max_pool2(sq)?;
        t.sum(p)
    })?;

    let labels = [2usize, 0];
    push(
        &mut out,
        "global_avg_pool + softmax_cross_entropy",
        vec![x4.clone()],
        |t, v| {
            let g = t.global_avg_pool(v[0])?;
            t.softmax_cross_entropy(g, &labels)
        },
    )?;

    let x2 = normal_tensor(&[3, 4], 1.0, &mut rng);
    let wd = normal_tensor(&[5, 4], 1.0, &mut rng);
    push(&mut out, "dense", vec![x2, wd], |t, v| {
        let y = t.dense(v[0], v[1])?;
        t.softmax_cross_entropy(y, &[4, 1, 0])
    })?;

    let a = normal_tensor(&[2, 3, 5, 5], 1.0, &mut rng);
    push(&mut out, "gather/scatter/mask/add", vec![x4, a], |t, v| {
        let g = t.gather_channels(v[0], &[0, 2])?;
        let s = t.scatter_channels(g, &[2, 0], 3)?;
        let m = t.mask_channels(v[1], &[1.0, 0.0, 2.0])?;
        let sum = t.add(s, m)?;
        let sq = t.mul(sum, sum)?;
        t.sum(sq)
    })?;

    for shape in [[3usize, 2, 2, 2], [12, 1, 2, 2]] {
        let w = normal_tensor(&shape, 0.6, &mut rng);
        push(&mut out, "gram_penalty", vec![w], |t, v| {
            t.gram_penalty(v[0])
        })?;
    }
    Ok(out)
}

/// Branch decisions of every non-smooth op: ReLU input signs, max-pool
/// winners and the signs of `G - I` entries in the penalty.
fn kink_signature(model: &ModelGraph, tape: &Tape, trace: &crate::model::ForwardTrace) -> Vec<u32> {
    let mut sig = Vec::new();
    for (k, node) in model.nodes.iter().enumerate() {
        if k == 0 {
            continue;
        }
        match node.kind {
            LayerKind::Relu => sig.extend(
                tape.value(trace.outputs[k - 1])
                    .data()
                    .iter()
                    .map(|v| (*v > 0.0) as u32),
            ),
            LayerKind::MaxPool => {
                let x = tape.value(trace.outputs[k - 1]);
                let s = x.shape();
                let (h, w) = (s[2], s[3]);
                for plane in x.data().chunks(h * w) {
                    for i in (0..h - h % 2).step_by(2) {
                        for j in (0..w - w % 2).step_by(2) {
                            let cand = [
                                i * w + j,
                                i * w + j + 1,
                                (i + 1) * w + j,
                                (i + 1) * w + j + 1,
                            ];
                            let best = (0..4).fold(0, |b, c| {
                                if plane[cand[c]] > plane[cand[b]] {
                                    c
                                } else {
                                    b
                                }
                            });
                            sig.push(best as u32);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    for k in model.regularized_layers() {
        if let Some(c) = model.conv(k) {
            let (m, d) = (c.weight.dim0(), c.weight.row_len());
            let gram = crate::engine::kernels::gram_rows(c.weight.data(), m, d);
            sig.extend(gram.iter().enumerate().map(|(i, v)| {
                let target = if i / m == i % m { 1.0 } else { 0.0 };
                (*v > target) as u32
            }));
        }
    }
    sig
}

struct Objective {
    value: f64,
    grads: Vec<Vec<f64>>,
    signature: Vec<u32>,
}

fn objective(
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    grads: bool,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let trace = model.forward(&mut tape, xv, ForwardOptions::train().tracking(grads))?;
    let task = tape.softmax_cross_entropy(trace.logits, labels)?;
    let reg = ortho::ortho_loss(&mut tape, model, &trace)?;
    let scaled = tape.scale(reg, lambda)?;
    let loss = tape.add(task, scaled)?;
    let value = tape.value(loss).data()[0];
    let signature = kink_signature(model, &tape, &trace);
    if !grads {
        return Ok(Objective {
            value,
            grads: Vec::new(),
            signature,
        });
    }
    tape.backward(loss)?;
    let mut out = Vec::new();
    for r in model.param_refs() {
        let v = trace.param(r).ok_or(Error::Tape("parameter not traced"))?;
        let n = model.param(r).map(|t| t.numel()).unwrap_or(0);
        out.push(
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; n]),
        );
    }
    Ok(Objective {
        value,
        grads: out,
        signature,
    })
}

/// Task loss plus `lambda` times the orthonormality penalty, checked with
/// respect to every parameter tensor of `model` in train mode. Entries
/// whose perturbation flips a ReLU, pooling or penalty sign are left out
/// and counted in `skipped`.
pub fn objective_check(
    name: &str,
    model: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    h: f64,
) -> Result<GradCheck> {
    let base = objective(model, x, labels, lambda, true)?;
    let mut work = model.clone();
    let mut errors = Vec::new();
    let mut skipped = 0;
    for (r, a) in model.param_refs().into_iter().zip(&base.grads) {
        let (mut kept_a, mut kept_n) = (Vec::new(), Vec::new());
        for (k, &ak) in a.iter().enumerate() {
            let orig = work.param(r).unwrap().data()[k];
            work.param_mut(r).unwrap().data_mut()[k] = orig + h;
            let plus = objective(&work, x, labels, lambda, false)?;
            work.param_mut(r).unwrap().data_mut()[k] = orig - h;
            let minus = objective(&work, x, labels, lambda, false)?;
            work.param_mut(r).unwrap().data_mut()[k] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                skipped += 1;
                continue;
            }
            kept_a.push(ak);
            kept_n.push((plus.value - minus.value) / (2.0 * h));
        }
        errors.push(relative_error(&kept_a, &kept_n));
    }
    Ok(GradCheck {
        name: name.to_string(),
        relative_errors: errors,
        skipped,
    })
}

/// Per-op checks followed by the full regularized objective on a small
/// network of every family, plus a pruned residual network.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = op_suite(seed)?;
    let mut rng = seeded(seed.wrapping_add(1));
    let x = normal_tensor(&[4, 3, 6, 6], 1.0, &mut rng);
    let labels = [0usize, 1, 2, 1];
    let specs = [
        (
            "objective(plain)",
            ModelSpec::new(Family::Plain, &[3, 4], 3, seed),
        ),
        (
            "objective(residual)",
            ModelSpec::new(Family::Residual, &[3, 4], 3, seed),
        ),
        (
            "objective(depthsep)",
            ModelSpec::new(Family::DepthSep, &[3, 4], 3, seed),
        ),
    ];
    for (name, spec) in &specs {
        let model = build_model(spec)?;
        out.push(objective_check(
            name,
            &model,
            &x,
            &labels,
            0.01,
            OBJECTIVE_STEP,
        )?);
    }
    let model = build_model(&ModelSpec::new(Family::Residual, &[4, 4], 3, seed))?;
    let victims = model
        .enumerate_prunable()
        .into_iter()
        .filter(|u| u.filter == 1)
        .take(3)
        .collect();
    let plan = PrunePlan::from_victims(&model, victims, "gradcheck", 0.0)?;
    let pruned = apply_plan(&model, &plan)?;
    out.push(objective_check(
        "objective(residual, pruned)",
        &pruned,
        &x,
        &labels,
        0.01,
        OBJECTIVE_STEP,
    )?);
    Ok(out)
}
