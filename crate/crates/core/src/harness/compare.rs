//! Multi-task decoder versus a parameter-matched shared MLP, both scored by
//! Δm against single-task baselines trained with the same budget.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::encoder::PyramidValues;
use crate::error::{Error, Result};
use crate::tasks::{MetricsReport, TaskId};

use super::config::{DecoderKind, ExperimentConfig, Mode};
use super::eval::evaluate_cached;
use super::train::{shared_pyramids, train_cached};

/// Frozen-encoder pyramids of the train and eval splits.
pub type Cache<'a> = Option<(&'a [PyramidValues], &'a [PyramidValues])>;

/// Train one single-task model per configured task and return each task's
/// metric on `eval_data`.
pub fn single_task_baselines(
    cfg: &ExperimentConfig,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
) -> Result<BTreeMap<TaskId, f64>> {
    let tr = shared_pyramids(cfg, train_data)?;
    let ev = shared_pyramids(cfg, eval_data)?;
    baselines_cached(cfg, train_data, eval_data, tr.as_deref().zip(ev.as_deref()))
}

fn baselines_cached(
    cfg: &ExperimentConfig,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
    cache: Cache<'_>,
) -> Result<BTreeMap<TaskId, f64>> {
    let mut out = BTreeMap::new();
    for &t in &cfg.tasks {
        let single = ExperimentConfig {
            mode: Mode::Single(t),
            decoder: DecoderKind::FgMoe,
            ..cfg.clone()
        };
        let (model, _) = train_cached(&single, train_data, cache.map(|c| c.0), |_| Ok(()))?;
        let report = evaluate_cached(&model, eval_data, cache.map(|c| c.1), None)?;
        let v = report
            .metrics
            .get(t)
            .ok_or_else(|| Error::Contract(format!("single-task run produced no {t} metric")))?;
        out.insert(t, v);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderResult {
    pub decoder: DecoderKind,
    pub trainable: usize,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlComparison {
    pub seed: u64,
    pub baselines: BTreeMap<TaskId, f64>,
    pub fgmoe: DecoderResult,
    pub shared_mlp: DecoderResult,
    /// `Δm(FGMoE) − Δm(shared MLP)`.
    pub margin: f64,
}

fn run(
    cfg: &ExperimentConfig,
    decoder: DecoderKind,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
    baselines: &BTreeMap<TaskId, f64>,
    cache: Cache<'_>,
) -> Result<DecoderResult> {
    let cfg = ExperimentConfig { decoder, ..cfg.clone() };
    let (model, log) = train_cached(&cfg, train_data, cache.map(|c| c.0), |_| Ok(()))?;
    let report = evaluate_cached(&model, eval_data, cache.map(|c| c.1), Some(baselines))?;
    Ok(DecoderResult {
        decoder,
        trainable: model.census().trainable,
        final_loss: log.last().map_or(f64::NAN, |l| l.total),
        metrics: report.metrics,
    })
}

pub fn compare_decoders(
    cfg: &ExperimentConfig,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
) -> Result<MtlComparison> {
    let tr = shared_pyramids(cfg, train_data)?;
    let ev = shared_pyramids(cfg, eval_data)?;
    compare_decoders_cached(cfg, train_data, eval_data, tr.as_deref().zip(ev.as_deref()))
}

/// [`compare_decoders`] on precomputed pyramids (see [`shared_pyramids`]).
pub fn compare_decoders_cached(
    cfg: &ExperimentConfig,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
    cache: Cache<'_>,
) -> Result<MtlComparison> {
    let baselines = baselines_cached(cfg, train_data, eval_data, cache)?;
    let fgmoe = run(cfg, DecoderKind::FgMoe, train_data, eval_data, &baselines, cache)?;
    let shared_mlp = run(cfg, DecoderKind::SharedMlp, train_data, eval_data, &baselines, cache)?;
    let dm = |r: &DecoderResult| r.metrics.delta_m.unwrap_or(f64::NAN);
    Ok(MtlComparison {
        seed: cfg.seed,
        margin: dm(&fgmoe) - dm(&shared_mlp),
        baselines,
        fgmoe,
        shared_mlp,
    })
}
