//! Command-line surface. Every subcommand reads one config file plus
//! `--set section.key=value` overrides and writes its artifacts and a
//! `manifest.json` into the output directory.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{one_line, Config, DataSource, Manifest};
use crate::error::{Error, Result};
use crate::experiments::{
    gram_offdiag_stats, partial_correlation_stats, reliability_experiment, write_gram_stats,
    write_parcorr, write_reliability_grid, write_reliability_trials,
};
use crate::gradcheck::{standard_suite, DEFAULT_TOLERANCE};
use crate::model::{build_model, load_model, save_model, ModelGraph};
use crate::ortho::{self, OrthoConfig, DIAGNOSTIC_HEADER};
use crate::pruning::{apply_plan, compression_report, PrunePlan};
use crate::trainer::{
    early_bird_extract, orthoreg_pipeline, train_epochs_with, write_round_reports, write_run_log,
    EpochLog, Optimizer,
};

#[derive(Debug, Parser)]
#[command(
    name = "orthoprune",
    version,
    about = "Orthonormality-regularized structured pruning lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a base model, or fine-tune one with `--init`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Enable the orthonormality regularizer (family default strength
        /// unless `train.ortho.lambda` is set).
        #[arg(long)]
        ortho: bool,
        /// Continue from `checkpoint.omdl` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Iterative fine-tune / prune / retrain pipeline.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Replay a saved plan instead of running the pipeline.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Early single-shot ticket extraction.
    Ebt {
        #[command(flatten)]
        common: Common,
    },
    /// Group-estimate reliability grid.
    ExpReliability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-layer activation partial correlations.
    ExpParcorr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Per-layer filter Gram and singular value summaries.
    ExpGram {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compression ratio, FLOPs reduction and Eff. of a pruned checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
    },
    /// Finite-difference checks of every op and the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Prune { .. } => "prune",
            Command::Ebt { .. } => "ebt",
            Command::ExpReliability { .. } => "exp-reliability",
            Command::ExpParcorr { .. } => "exp-parcorr",
            Command::ExpGram { .. } => "exp-gram",
            Command::Report { .. } => "report",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Prune { common, .. }
            | Command::Ebt { common }
            | Command::ExpReliability { common, .. }
            | Command::ExpParcorr { common, .. }
            | Command::ExpGram { common, .. }
            | Command::Report { common, .. }
            | Command::Gradcheck { common } => common,
        }
    }
}

struct Run {
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.manifest.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn save(&mut self, name: &str, model: &ModelGraph) -> Result<()> {
        self.manifest.outputs.push(name.to_string());
        save_model(&self.out.join(name), model)
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.outputs.sort();
        self.manifest.outputs.dedup();
        self.manifest.write(&self.out.join("manifest.json"))
    }
}

fn input_extents(cfg: &Config) -> [usize; 3] {
    match (&cfg.data.source, &cfg.data.binary) {
        (DataSource::Binary, Some(b)) => [b.layout.channels, b.layout.height, b.layout.width],
        _ => {
            let s = &cfg.data.synthetic;
            [s.channels, s.extent, s.extent]
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    stage: String,
    epoch: usize,
}

fn train_cmd(
    run: &mut Run,
    cfg: &Config,
    init: Option<&Path>,
    ortho_flag: bool,
    resume: bool,
) -> Result<String> {
    let split = cfg.load_data()?;
    let mut tc = cfg.train.clone();
    if ortho_flag {
        let lambda = if tc.ortho.lambda > 0.0 {
            tc.ortho.lambda
        } else {
            ortho::default_lambda(cfg.model.family)
        };
        tc.ortho = OrthoConfig::new(lambda);
    }
    tc.validate()?;
    let ckpt = run.out.join("checkpoint.omdl");
    let state_path = run.out.join("checkpoint.json");
    let (mut model, start) = if resume {
        let state: CheckpointState = serde_json::from_reader(File::open(&state_path)?)
            .map_err(|e| Error::Format(format!("checkpoint state: {e}")))?;
        (load_model(&ckpt)?, state.epoch + 1)
    } else if let Some(p) = init {
        (load_model(p)?, 0)
    } else {
        (build_model(&cfg.model)?, 0)
    };
    let stage = if tc.ortho.active() {
        "finetune"
    } else {
        "train"
    };
    let diag_path = run.out.join("diagnostics.csv");
    let mut diag = if resume && diag_path.exists() {
        BufWriter::new(std::fs::OpenOptions::new().append(true).open(&diag_path)?)
    } else {
        let mut f = BufWriter::new(File::create(&diag_path)?);
        writeln!(f, "{DIAGNOSTIC_HEADER}")?;
        f
    };
    run.manifest.outputs.push("diagnostics.csv".into());
    let mut opt = Optimizer::new(&tc);
    let result = train_epochs_with(
        &mut model,
        &split,
        &tc,
        start..tc.total_epochs(),
        &mut opt,
        stage,
        &mut |m: &ModelGraph, e: &EpochLog| {
            ortho::write_diagnostics(&mut diag, e.epoch, &ortho::diagnostics(m)?)?;
            diag.flush()?;
            save_model(&ckpt, m)?;
            let state = CheckpointState {
                stage: e.stage.clone(),
                epoch: e.epoch,
            };
            std::fs::write(
                &state_path,
                serde_json::to_string(&state).map_err(|e| Error::Format(e.to_string()))?,
            )?;
            Ok(())
        },
    );
    run.manifest
        .outputs
        .extend(["checkpoint.omdl".into(), "checkpoint.json".into()]);
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            run.save("last_good.omdl", &model)?;
            return Err(e);
        }
    };
    write_run_log(run.create("run_log.csv")?, &log)?;
    run.save("model.omdl", &model)?;
    let last = log.last();
    Ok(format!(
        "epochs={} val_acc={}",
        log.len(),
        last.map(|e| e.val_acc).unwrap_or(f64::NAN)
    ))
}

fn prune_cmd(
    run: &mut Run,
    cfg: &Config,
    model_path: &Path,
    plan: Option<&Path>,
) -> Result<String> {
    let base = load_model(model_path)?;
    let input = input_extents(cfg);
    if let Some(p) = plan {
        let plan = PrunePlan::read_csv(BufReader::new(File::open(p)?), &base)?;
        let pruned = apply_plan(&base, &plan)?;
        run.save("pruned.omdl", &pruned)?;
        let r = compression_report(&base, &pruned, input)?;
        return Ok(format!(
            "victims={} CR={} eff={}",
            plan.victims.len(),
            r.cr,
            r.eff
        ));
    }
    let split = cfg.load_data()?;
    let out = orthoreg_pipeline(&base, &split, &cfg.train, &cfg.pipeline)?;
    for (k, plan) in out.plans.iter().enumerate() {
        plan.write_csv(run.create(&format!("plan_round{}.csv", k + 1))?)?;
    }
    write_round_reports(run.create("rounds.csv")?, &out.rounds)?;
    write_run_log(run.create("run_log.csv")?, &out.log)?;
    run.save("pruned.omdl", &out.model)?;
    let last = out
        .rounds
        .last()
        .ok_or_else(|| Error::Config(vec!["pipeline ran no rounds".into()]))?;
    Ok(format!(
        "rounds={} CR={} flops_reduction={} eff={} val_acc={}",
        out.rounds.len(),
        last.report.cr,
        last.report.flops_reduction,
        last.report.eff,
        last.val_acc
    ))
}

fn ebt_cmd(run: &mut Run, cfg: &Config) -> Result<String> {
    let split = cfg.load_data()?;
    let out = early_bird_extract(&cfg.model, &split, &cfg.train, &cfg.ebt)?;
    write_run_log(run.create("run_log.csv")?, &out.log)?;
    let mut w = run.create("ebt.csv")?;
    writeln!(
        w,
        "metric,pretrain_epochs,prune_fraction,CR,flops_reduction,eff,val_acc"
    )?;
    let metric = serde_json::to_string(&cfg.ebt.metric).unwrap_or_default();
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        metric.trim_matches('"'),
        out.pretrain_epochs,
        cfg.ebt.prune_fraction,
        out.report.cr,
        out.report.flops_reduction,
        out.report.eff,
        out.val_acc
    )?;
    w.flush()?;
    run.save("ticket.omdl", &out.model)?;
    Ok(format!(
        "CR={} eff={} val_acc={}",
        out.report.cr, out.report.eff, out.val_acc
    ))
}

fn execute(cmd: &Command, cfg: &Config, run: &mut Run) -> Result<String> {
    match cmd {
        Command::Train {
            init,
            ortho,
            resume,
            ..
        } => train_cmd(run, cfg, init.as_deref(), *ortho, *resume),
        Command::Prune { model, plan, .. } => prune_cmd(run, cfg, model, plan.as_deref()),
        Command::Ebt { .. } => ebt_cmd(run, cfg),
        Command::ExpReliability { model, .. } => {
            let m = load_model(model)?;
            let split = cfg.load_data()?;
            let grid = reliability_experiment(&m, &split.train, &cfg.experiments.reliability())?;
            write_reliability_grid(run.create("reliability_grid.csv")?, &grid)?;
            write_reliability_trials(run.create("reliability_trials.csv")?, &grid)?;
            Ok(format!("cells={}", grid.len()))
        }
        Command::ExpParcorr { model, .. } => {
            let m = load_model(model)?;
            let split = cfg.load_data()?;
            let n = cfg.experiments.probe.min(split.val.len());
            let probe = split.val.images.select_axis0(&(0..n).collect::<Vec<_>>())?;
            let rows = partial_correlation_stats(&m, &probe)?;
            write_parcorr(run.create("parcorr.csv")?, &rows)?;
            Ok(format!("layers={}", rows.len()))
        }
        Command::ExpGram { model, .. } => {
            let rows = gram_offdiag_stats(&load_model(model)?)?;
            write_gram_stats(run.create("gram.csv")?, &rows)?;
            Ok(format!("layers={}", rows.len()))
        }
        Command::Report {
            original, pruned, ..
        } => {
            let r = compression_report(
                &load_model(original)?,
                &load_model(pruned)?,
                input_extents(cfg),
            )?;
            let mut w = run.create("report.csv")?;
            writeln!(
                w,
                "params_original,params_pruned,flops_original,flops_pruned,CR,flops_reduction,eff"
            )?;
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.params_original,
                r.params_pruned,
                r.flops_original,
                r.flops_pruned,
                r.cr,
                r.flops_reduction,
                r.eff
            )?;
            w.flush()?;
            Ok(format!(
                "CR={} flops_reduction={} eff={}",
                r.cr, r.flops_reduction, r.eff
            ))
        }
        Command::Gradcheck { .. } => {
            let reports = standard_suite(cfg.train.seed)?;
            let mut w = run.create("gradcheck.csv")?;
            writeln!(w, "name,max_relative_error,skipped,passed")?;
            let mut failed = Vec::new();
            for r in &reports {
                let ok = r.passed(DEFAULT_TOLERANCE);
                writeln!(w, "{},{},{},{}", r.name, r.max_error(), r.skipped, ok)?;
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            w.flush()?;
            if failed.is_empty() {
                Ok(format!("checks={} failed=0", reports.len()))
            } else {
                Err(Error::Linalg(format!(
                    "gradient checks failed: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn run_command(cmd: &Command) -> Result<String> {
    let common = cmd.common();
    let base = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)?;
    let mut run = Run {
        out: common.out.clone(),
        manifest: Manifest::new(cmd.name(), &cfg, &common.overrides)?,
    };
    let summary = execute(cmd, &cfg, &mut run)?;
    run.finish()?;
    Ok(summary)
}

/// One machine-parsable line: `error kind=<kind> message="<text>"`.
pub fn error_line(kind: &str, message: &str) -> String {
    let quoted = serde_json::to_string(&one_line(message)).unwrap_or_else(|_| "\"\"".into());
    format!("error kind={kind} message={quoted}")
}

/// Parses `args` and runs one subcommand; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run_command(&cli.command) {
        Ok(summary) => {
            println!("ok command={} {summary}", cli.command.name());
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}
