use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fgmoe_core::data::{generate_splits, read_dataset, write_dataset, TaskSample};
use fgmoe_core::harness::{
    ablate, evaluate, grad_check_config, load_checkpoint, model_grad_check, save_checkpoint, train, EvalReport,
    ExperimentConfig, GradCheckOptions, Mode, RunReport,
};
use fgmoe_core::tasks::TaskId;
use serde_json::json;

#[derive(Parser)]
#[command(name = "fgmoe", version, about = "Fine-grained mixture-of-experts multi-task decoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// full, decoder-only or single:<task>.
    #[arg(long)]
    mode: Option<Mode>,
    /// Routed experts per MoE layer.
    #[arg(long)]
    experts: Option<usize>,
    /// Shared (always active) experts per MoE layer.
    #[arg(long)]
    shared: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(n) = self.experts {
            cfg.moe.routed = n;
        }
        if let Some(n) = self.shared {
            cfg.moe.shared = n;
        }
        if let Some(k) = self.topk {
            cfg.moe.top_k = k;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/eval splits into <out>/train.fgmd and <out>/eval.fgmd.
    GenData {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train, evaluate, and write log.jsonl, checkpoint.fgmc and report.json.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Directory holding train.fgmd/eval.fgmd; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON object of single-task baseline metrics, enabling Δm.
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// Expert-count and top-k sweeps, one JSON line per cell.
    Ablate {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// End-to-end finite-difference gradient check on sampled parameters.
    GradCheck {
        /// Config file; defaults to the small 32×32 all-task model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Summarize a run directory, or print the census of a config.
    Report {
        #[arg(long)]
        run: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
}

fn print_line(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    match dir {
        Some(d) => Ok((
            read_dataset(d.join("train.fgmd")).with_context(|| format!("reading {}/train.fgmd", d.display()))?,
            read_dataset(d.join("eval.fgmd")).with_context(|| format!("reading {}/eval.fgmd", d.display()))?,
        )),
        None => Ok(generate_splits(&cfg.scene(), cfg.train_samples, cfg.eval_samples)?),
    }
}

fn load_baselines(path: Option<&Path>) -> Result<Option<BTreeMap<TaskId, f64>>> {
    path.map(|p| {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing baselines in {}", p.display()))
    })
    .transpose()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { o } => {
            let cfg = o.resolve()?;
            let out = PathBuf::from(&cfg.out);
            fs::create_dir_all(&out)?;
            let (tr, ev) = generate_splits(&cfg.scene(), cfg.train_samples, cfg.eval_samples)?;
            write_dataset(&tr, out.join("train.fgmd"))?;
            write_dataset(&ev, out.join("eval.fgmd"))?;
            print_line(&json!({"train": tr.len(), "eval": ev.len(), "out": cfg.out}))?;
        }
        Command::Train { o, data, baselines } => {
            let cfg = o.resolve()?;
            let (tr, ev) = load_data(&cfg, data.as_deref())?;
            let baselines = load_baselines(baselines.as_deref())?;
            let out = PathBuf::from(&cfg.out);
            fs::create_dir_all(&out)?;
            let mut log = fs::File::create(out.join("log.jsonl"))?;
            let (model, steps) = train(&cfg, &tr, |s| {
                let line = serde_json::to_string(s).map_err(fgmoe_core::Error::from)?;
                writeln!(log, "{line}")?;
                println!("{line}");
                Ok(())
            })?;
            save_checkpoint(&model, out.join("checkpoint.fgmc"))?;
            let report = RunReport {
                config: cfg.to_text(),
                census: model.census(),
                initial_loss: steps.first().map_or(f64::NAN, |s| s.total),
                final_loss: steps.last().map_or(f64::NAN, |s| s.total),
                eval: evaluate(&model, &ev, baselines.as_ref())?,
            };
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            print_line(&report)?;
        }
        Command::Eval {
            checkpoint,
            data,
            baselines,
        } => {
            let model = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (_, ev) = load_data(&model.cfg, data.as_deref())?;
            let baselines = load_baselines(baselines.as_deref())?;
            let report: EvalReport = evaluate(&model, &ev, baselines.as_ref())?;
            print_line(&report)?;
        }
        Command::Ablate { o, data, baselines } => {
            let cfg = o.resolve()?;
            let (tr, ev) = load_data(&cfg, data.as_deref())?;
            let baselines = load_baselines(baselines.as_deref())?;
            let summary = ablate(&cfg, &tr, &ev, baselines.as_ref(), |cell| {
                print_line(cell).map_err(|e| fgmoe_core::Error::Contract(e.to_string()))
            })?;
            print_line(&json!({"trends": summary.trends}))?;
        }
        Command::GradCheck {
            config,
            samples,
            seed,
            step,
            tol,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => grad_check_config(),
            };
            let opts = GradCheckOptions {
                samples,
                seed,
                step,
                tol,
                ..GradCheckOptions::default()
            };
            let r = model_grad_check(&cfg, &opts)?;
            for p in &r.probes {
                print_line(p)?;
            }
            print_line(&json!({
                "passed": r.passed,
                "pass_fraction": r.pass_fraction,
                "required_fraction": r.required_fraction,
                "max_rel_error": r.report.max_rel_error,
                "worst_index": r.report.worst_index,
                "min_margin": r.min_margin,
                "rerouted": r.rerouted,
            }))?;
            if !r.passed {
                std::process::exit(1);
            }
        }
        Command::Report { run, o } => match run {
            Some(dir) => {
                let text = fs::read_to_string(dir.join("report.json"))
                    .with_context(|| format!("reading {}/report.json", dir.display()))?;
                let report: RunReport = serde_json::from_str(&text)?;
                print_line(&json!({
                    "trainable": report.census.trainable,
                    "total": report.census.total,
                    "trainable_fraction": report.census.trainable_fraction(),
                    "initial_loss": report.initial_loss,
                    "final_loss": report.final_loss,
                    "metrics": report.eval.metrics,
                }))?;
            }
            None => {
                let cfg = o.resolve()?;
                let model = fgmoe_core::harness::Model::build(&cfg)?;
                let census = model.census();
                print_line(&json!({
                    "census": census,
                    "trainable_fraction": census.trainable_fraction(),
                }))?;
            }
        },
    }
    Ok(())
}
