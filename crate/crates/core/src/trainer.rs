//! Optimizers, training loops, the iterative prune-retrain pipeline and
//! early single-shot ticket extraction.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, shuffled_batches, Split};
use crate::engine::Tape;
use crate::error::{Error, Result};
use crate::importance::{self, Metric};
use crate::model::{
    build_model, evaluate, forward::argmax, ForwardOptions, ModelGraph, ModelSpec, ParamRef,
};
use crate::ortho::{self, OrthoConfig};
use crate::pruning::{
    apply_plan, compression_report, schedule_ratios, select_victims, CompressionReport,
};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// `(epoch, lr)` pairs; from each listed epoch on the given rate applies.
    pub milestones: Vec<(usize, f64)>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ortho: OrthoConfig,
    pub epochs: usize,
    /// Extra epochs at `tail_lr` after the schedule.
    pub tail_epochs: usize,
    pub tail_lr: f64,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            milestones: Vec::new(),
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            ortho: OrthoConfig::disabled(),
            epochs: 30,
            tail_epochs: 0,
            tail_lr: 1e-6,
            batch_size: 32,
            eval_batch: 256,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self, section: &str) -> Vec<String> {
        let mut p = Vec::new();
        if self.weight_decay > 0.0 && self.ortho.enabled {
            p.push(format!(
                "{section}: weight_decay > 0 cannot be combined with the orthonormality regularizer"
            ));
        }
        if self.weight_decay < 0.0 {
            p.push(format!("{section}.weight_decay must be >= 0"));
        }
        if !(self.lr > 0.0) || self.milestones.iter().any(|&(_, lr)| !(lr > 0.0)) {
            p.push(format!("{section}: learning rates must be > 0"));
        }
        if self.milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
            p.push(format!("{section}.milestones must have increasing epochs"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            p.push(format!("{section}: batch sizes must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            p.push(format!("{section}: momentum and betas must lie in [0, 1)"));
        }
        p.extend(
            self.ortho
                .problems()
                .into_iter()
                .map(|m| format!("{section}: {m}")),
        );
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("train");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.tail_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.epochs {
            return self.tail_lr;
        }
        self.milestones
            .iter()
            .rfind(|&&(e, _)| e <= epoch)
            .map(|&(_, lr)| lr)
            .unwrap_or(self.lr)
    }

    pub fn with_ortho(mut self, ortho: OrthoConfig) -> Self {
        self.ortho = ortho;
        self
    }
}

/// First and second moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
    state: HashMap<ParamRef, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            state: HashMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.steps = 0;
        self.state.clear();
    }

    /// Advances the shared step counter; call once per batch before the
    /// per-parameter updates.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, key: ParamRef, w: &mut [f64], grad: &[f64], lr: f64) {
        let n = w.len();
        let (m, v) = self
            .state
            .entry(key)
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            *m = vec![0.0; n];
            *v = vec![0.0; n];
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..n {
                    let g = grad[i] + self.weight_decay * w[i];
                    m[i] = self.momentum * m[i] + g;
                    w[i] -= lr * m[i];
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps.max(1) as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..n {
                    let g = grad[i] + self.weight_decay * w[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    w[i] -= lr * mh / (vh.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub task_loss: f64,
    pub ortho_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const RUN_LOG_HEADER: &str = "stage,epoch,lr,loss,task_loss,ortho_loss,train_acc,val_acc";

pub fn write_run_log<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    writeln!(w, "{RUN_LOG_HEADER}")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            e.stage, e.epoch, e.lr, e.loss, e.task_loss, e.ortho_loss, e.train_acc, e.val_acc
        )?;
    }
    Ok(())
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct BatchResult {
    loss: f64,
    task: f64,
    ortho: f64,
    correct: usize,
}

fn train_batch(
    model: &mut ModelGraph,
    x: crate::Tensor,
    y: &[usize],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let trace = model.forward(&mut tape, xv, ForwardOptions::train())?;
    let task = tape.softmax_cross_entropy(trace.logits, y)?;
    let (loss, ortho_var) = if cfg.ortho.active() {
        let o = ortho::ortho_loss(&mut tape, model, &trace)?;
        let scaled = tape.scale(o, cfg.ortho.lambda)?;
        (tape.add(task, scaled)?, Some(o))
    } else {
        (task, None)
    };
    let logits = tape.value(trace.logits);
    let correct = y
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    let result = BatchResult {
        loss: tape.value(loss).data()[0],
        task: tape.value(task).data()[0],
        ortho: ortho_var.map(|v| tape.value(v).data()[0]).unwrap_or(0.0),
        correct,
    };
    tape.backward(loss)?;
    opt.begin_step();
    for &(r, v) in &trace.params {
        let g = tape
            .grad(v)
            .ok_or(Error::Tape("parameter gradient missing"))?
            .to_vec();
        let w = model
            .param_mut(r)
            .ok_or_else(|| Error::Model("parameter vanished".into()))?;
        opt.update(r, w.data_mut(), &g, lr);
        if !w.is_finite() {
            return Err(Error::NonFinite {
                op: "optimizer step",
            });
        }
    }
    model.absorb_batch_stats(&tape, &trace);
    Ok(result)
}

/// Trains over `epochs` (indices into the schedule of `cfg`), mutating
/// `model` in place and reusing `opt`. On divergence the model is rolled
/// back to the end of the last completed epoch and an error is returned.
pub fn train_epochs(
    model: &mut ModelGraph,
    split: &Split,
    cfg: &TrainConfig,
    epochs: Range<usize>,
    opt: &mut Optimizer,
    stage: &str,
) -> Result<Vec<EpochLog>> {
    train_epochs_with(model, split, cfg, epochs, opt, stage, &mut |_, _| Ok(()))
}

/// As [`train_epochs`], calling `on_epoch` after every completed epoch.
pub fn train_epochs_with(
    model: &mut ModelGraph,
    split: &Split,
    cfg: &TrainConfig,
    epochs: Range<usize>,
    opt: &mut Optimizer,
    stage: &str,
    on_epoch: &mut dyn FnMut(&ModelGraph, &EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut log = Vec::new();
    for epoch in epochs {
        let good = model.clone();
        let lr = cfg.lr_at(epoch);
        let mut rng = seeded(epoch_seed(cfg.seed, epoch));
        let batches = shuffled_batches(split.train.len(), cfg.batch_size, &mut rng);
        let (mut loss, mut task, mut orth, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut failed = None;
        for idx in &batches {
            let (mut x, y) = split.train.batch(idx)?;
            if cfg.augment {
                augment_batch(&mut x, 4, &mut rng);
            }
            match train_batch(model, x, &y, cfg, opt, lr) {
                Ok(b) if b.loss.is_finite() => {
                    let w = idx.len() as f64;
                    loss += b.loss * w;
                    task += b.task * w;
                    orth += b.ortho * w;
                    correct += b.correct;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    failed = Some(epoch);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(epoch) = failed {
            *model = good;
            return Err(Error::Diverged { epoch });
        }
        let n = split.train.len() as f64;
        let (_, val_acc) = evaluate(
            model,
            &split.val.images,
            &split.val.labels,
            cfg.eval_batch,
            None,
        )?;
        let entry = EpochLog {
            stage: stage.to_string(),
            epoch,
            lr,
            loss: loss / n,
            task_loss: task / n,
            ortho_loss: orth / n,
            train_acc: correct as f64 / n,
            val_acc,
        };
        on_epoch(model, &entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Full schedule of `cfg` with a fresh optimizer.
pub fn train(
    model: &mut ModelGraph,
    split: &Split,
    cfg: &TrainConfig,
    stage: &str,
) -> Result<Vec<EpochLog>> {
    let mut opt = Optimizer::new(cfg);
    train_epochs(model, split, cfg, 0..cfg.total_epochs(), &mut opt, stage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rounds: usize,
    /// Total fraction split across rounds by the closed-form schedule.
    pub total_fraction: f64,
    /// Explicit per-round fractions; overrides `total_fraction` when set.
    pub fractions: Vec<f64>,
    pub metric: Metric,
    /// Unset means the family default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub finetune_epochs: usize,
    pub retrain_epochs: usize,
    pub tail_epochs: usize,
    pub importance_batch: usize,
    pub data_fraction: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rounds: 1,
            total_fraction: 0.5,
            fractions: Vec::new(),
            metric: Metric::Taylor,
            lambda: None,
            finetune_epochs: 8,
            retrain_epochs: 12,
            tail_epochs: 2,
            importance_batch: 128,
            data_fraction: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.rounds == 0 {
            p.push("pipeline.rounds must be >= 1".into());
        }
        if !self.fractions.is_empty() {
            if self.fractions.len() != self.rounds {
                p.push(format!(
                    "pipeline.fractions has {} entries for {} rounds",
                    self.fractions.len(),
                    self.rounds
                ));
            }
            if self.fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
                p.push("pipeline.fractions entries must lie in [0, 1)".into());
            }
        } else if !(0.0..1.0).contains(&self.total_fraction) {
            p.push("pipeline.total_fraction must lie in [0, 1)".into());
        }
        if self.lambda.is_some_and(|l| !(0.0..=1.0).contains(&l)) {
            p.push("pipeline.lambda must lie in [0, 1]".into());
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            p.push("pipeline.data_fraction must lie in (0, 1]".into());
        }
        if self.importance_batch == 0 {
            p.push("pipeline.importance_batch must be >= 1".into());
        }
        p
    }

    /// Per-round fractions, manual ones verbatim.
    pub fn round_fractions(&self) -> Result<Vec<f64>> {
        if !self.fractions.is_empty() {
            return Ok(self.fractions.clone());
        }
        if self.total_fraction == 0.0 {
            return Ok(vec![0.0; self.rounds]);
        }
        Ok(schedule_ratios(self.total_fraction, self.rounds)?.fractions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub fraction: f64,
    /// `1 - Π(1 - p_j)` over rounds so far.
    pub cumulative: f64,
    pub report: CompressionReport,
    pub val_acc: f64,
    pub ortho_in_retrain: bool,
}

pub const ROUND_REPORT_HEADER: &str = "round,fraction,CR,flops_reduction,eff,val_acc";

pub fn write_round_reports<W: Write>(mut w: W, rounds: &[RoundReport]) -> Result<()> {
    writeln!(w, "{ROUND_REPORT_HEADER}")?;
    for r in rounds {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.round, r.fraction, r.report.cr, r.report.flops_reduction, r.report.eff, r.val_acc
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: ModelGraph,
    pub rounds: Vec<RoundReport>,
    pub log: Vec<EpochLog>,
    pub plans: Vec<crate::pruning::PrunePlan>,
}

/// Fine-tune with the regularizer, then `rounds` of prune + retrain; the
/// regularizer stays on in every retrain except the last.
pub fn orthoreg_pipeline(
    base: &ModelGraph,
    split: &Split,
    train_cfg: &TrainConfig,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    let problems: Vec<String> = cfg
        .problems()
        .into_iter()
        .chain(train_cfg.problems("train"))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let fractions = cfg.round_fractions()?;
    let input = split.train.extents();
    let ortho_on = OrthoConfig::new(
        cfg.lambda
            .unwrap_or_else(|| ortho::default_lambda(base.family())),
    );
    let mut model = base.clone();
    let mut log = Vec::new();
    if cfg.finetune_epochs > 0 {
        let ft = TrainConfig {
            epochs: cfg.finetune_epochs,
            tail_epochs: cfg.tail_epochs,
            weight_decay: 0.0,
            ..train_cfg.clone()
        }
        .with_ortho(ortho_on);
        log.extend(train(&mut model, split, &ft, "finetune")?);
    }
    let mut rounds = Vec::new();
    let mut plans = Vec::new();
    let mut remaining = 1.0;
    for (k, &p) in fractions.iter().enumerate() {
        let last = k + 1 == fractions.len();
        if p > 0.0 {
            let table = importance::compute(
                cfg.metric,
                &model,
                &split.train,
                cfg.importance_batch,
                cfg.data_fraction,
            )?;
            let plan = select_victims(&table, p, &model)?;
            model = apply_plan(&model, &plan)?;
            plans.push(plan);
        }
        remaining *= 1.0 - p;
        let rt = TrainConfig {
            epochs: cfg.retrain_epochs,
            tail_epochs: if last { 0 } else { cfg.tail_epochs },
            weight_decay: if last { train_cfg.weight_decay } else { 0.0 },
            seed: train_cfg.seed.wrapping_add(k as u64 + 1),
            ..train_cfg.clone()
        }
        .with_ortho(if last {
            OrthoConfig::disabled()
        } else {
            ortho_on
        });
        log.extend(train(&mut model, split, &rt, &format!("retrain{}", k + 1))?);
        let (_, val_acc) = evaluate(
            &model,
            &split.val.images,
            &split.val.labels,
            train_cfg.eval_batch,
            None,
        )?;
        rounds.push(RoundReport {
            round: k + 1,
            fraction: p,
            cumulative: 1.0 - remaining,
            report: compression_report(base, &model, input)?,
            val_acc,
            ortho_in_retrain: !last && ortho_on.active(),
        });
    }
    Ok(PipelineOutcome {
        model,
        rounds,
        log,
        plans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketMetric {
    /// Regularized fine-tune, Taylor prune, plain retrain.
    Orthoreg,
    BnScale,
    Fisher,
}

impl std::str::FromStr for TicketMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthoreg" => Ok(TicketMetric::Orthoreg),
            "bn_scale" | "bn" => Ok(TicketMetric::BnScale),
            "fisher" => Ok(TicketMetric::Fisher),
            other => Err(Error::InvalidArgument(format!(
                "unknown ticket metric `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyBirdConfig {
    pub pretrain_fraction: f64,
    pub prune_fraction: f64,
    pub metric: TicketMetric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Regularized epochs taken out of the post-pruning budget.
    pub finetune_epochs: usize,
    pub importance_batch: usize,
    pub data_fraction: f64,
}

impl Default for EarlyBirdConfig {
    fn default() -> Self {
        EarlyBirdConfig {
            pretrain_fraction: 0.15,
            prune_fraction: 0.5,
            metric: TicketMetric::Orthoreg,
            lambda: None,
            finetune_epochs: 2,
            importance_batch: 128,
            data_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TicketOutcome {
    pub model: ModelGraph,
    pub pretrain_epochs: usize,
    pub log: Vec<EpochLog>,
    pub report: CompressionReport,
    pub val_acc: f64,
}

/// Trains briefly, prunes once, then trains the ticket over the rest of
/// the epoch budget of `train_cfg`.
pub fn early_bird_extract(
    spec: &ModelSpec,
    split: &Split,
    train_cfg: &TrainConfig,
    cfg: &EarlyBirdConfig,
) -> Result<TicketOutcome> {
    let mut problems = train_cfg.problems("train");
    if !(cfg.pretrain_fraction > 0.0 && cfg.pretrain_fraction <= 0.5) {
        problems.push("ebt.pretrain_fraction must lie in (0, 0.5]".into());
    }
    if !(0.0..1.0).contains(&cfg.prune_fraction) {
        problems.push("ebt.prune_fraction must lie in [0, 1)".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let total = train_cfg.epochs;
    let pre = ((cfg.pretrain_fraction * total as f64).ceil() as usize).min(total);
    let mut model = build_model(spec)?;
    let base_cfg = TrainConfig {
        tail_epochs: 0,
        ..train_cfg.clone()
    };
    let mut opt = Optimizer::new(&base_cfg);
    let mut log = train_epochs(&mut model, split, &base_cfg, 0..pre, &mut opt, "pretrain")?;
    let dense = model.clone();
    if cfg.prune_fraction == 0.0 {
        log.extend(train_epochs(
            &mut model,
            split,
            &base_cfg,
            pre..total,
            &mut opt,
            "train",
        )?);
    } else {
        let rest = total - pre;
        let mut ticket = match cfg.metric {
            TicketMetric::Orthoreg => {
                let pc = PipelineConfig {
                    rounds: 1,
                    total_fraction: cfg.prune_fraction,
                    fractions: Vec::new(),
                    metric: Metric::Taylor,
                    lambda: cfg.lambda,
                    finetune_epochs: cfg.finetune_epochs.min(rest),
                    retrain_epochs: 0,
                    tail_epochs: 0,
                    importance_batch: cfg.importance_batch,
                    data_fraction: cfg.data_fraction,
                };
                let out = orthoreg_pipeline(&model, split, &base_cfg, &pc)?;
                log.extend(out.log);
                out.model
            }
            TicketMetric::BnScale | TicketMetric::Fisher => {
                let metric = if cfg.metric == TicketMetric::BnScale {
                    Metric::BnScale
                } else {
                    Metric::Fisher
                };
                let table = importance::compute(
                    metric,
                    &model,
                    &split.train,
                    cfg.importance_batch,
                    cfg.data_fraction,
                )?;
                apply_plan(&model, &select_victims(&table, cfg.prune_fraction, &model)?)?
            }
        };
        let used = if cfg.metric == TicketMetric::Orthoreg {
            cfg.finetune_epochs.min(rest)
        } else {
            0
        };
        let retrain = TrainConfig {
            ortho: OrthoConfig::disabled(),
            ..base_cfg.clone()
        };
        let mut opt = Optimizer::new(&retrain);
        log.extend(train_epochs(
            &mut ticket,
            split,
            &retrain,
            pre + used..total,
            &mut opt,
            "ticket",
        )?);
        model = ticket;
    }
    let (_, val_acc) = evaluate(
        &model,
        &split.val.images,
        &split.val.labels,
        train_cfg.eval_batch,
        None,
    )?;
    Ok(TicketOutcome {
        report: compression_report(&dense, &model, split.train.extents())?,
        model,
        pretrain_epochs: pre,
        log,
        val_acc,
    })
}
