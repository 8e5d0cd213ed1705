//! Evaluation: one forward pass per batch serves every task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{batch_images, TaskSample};
use crate::encoder::PyramidValues;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::moe::RoutingStats;
use crate::tasks::{MetricAccumulator, MetricsReport, TaskId, TaskMetric};
use crate::tensor::{Graph, Tensor};

use super::model::{Model, ParamCensus};
use super::train::{check_cache, forward_batch, BatchInput, LayerRouting};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Decoder forward passes; each pass produced every task's output.
    pub forward_passes: usize,
    pub metrics: MetricsReport,
    pub routing: Vec<LayerRouting>,
}

/// Metrics on `data` in eval mode (BatchNorm running statistics). With
/// `baselines`, Δm is computed against them.
pub fn evaluate(model: &Model, data: &[TaskSample], baselines: Option<&BTreeMap<TaskId, f64>>) -> Result<EvalReport> {
    evaluate_cached(model, data, None, baselines)
}

/// [`evaluate`] reading encoder outputs from `cache` when given.
pub fn evaluate_cached(
    model: &Model,
    data: &[TaskSample],
    cache: Option<&[PyramidValues]>,
    baselines: Option<&BTreeMap<TaskId, f64>>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    check_cache(model, data, cache)?;
    let specs = model.specs();
    let mut accs: Vec<MetricAccumulator> = specs.iter().map(MetricAccumulator::new).collect();
    let mut gates: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let (h, w) = (data[0].height, data[0].width);
    let batch = model.cfg.batch_size.max(1);
    let mut passes = 0;
    for (ci, chunk) in data.chunks(batch).enumerate() {
        let samples: Vec<&TaskSample> = chunk.iter().collect();
        let input = match cache {
            Some(c) => BatchInput::Cached(c[ci * batch..ci * batch + chunk.len()].iter().collect()),
            None => BatchInput::Images(batch_images(&samples)?),
        };
        let mut ctx = ForwardCtx::eval().with_gate_records();
        let mut g = Graph::new();
        let outputs = forward_batch(model, &mut g, input, h, w, &mut ctx)?;
        passes += 1;
        for (spec, acc) in specs.iter().zip(accs.iter_mut()) {
            let pred = g.value(outputs[&spec.id]);
            let target = crate::data::batch_target(&samples, spec.id);
            acc.update(spec.id, pred, &target)?;
        }
        for r in ctx.gates {
            gates.entry(r.layer).or_default().push(r.gates);
        }
    }
    let metrics = specs
        .iter()
        .zip(&accs)
        .map(|(s, a)| {
            Ok(TaskMetric {
                task: s.id,
                metric: s.id.metric_name().into(),
                value: a.value(s.id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let routing = gates
        .into_iter()
        .map(|(layer, mats)| {
            let n = mats[0].last_dim();
            let data: Vec<f64> = mats.iter().flat_map(|m| m.data().iter().copied()).collect();
            let rows = data.len() / n;
            let all = Tensor::new(&[rows, n], data)?;
            Ok(LayerRouting {
                layer,
                stats: RoutingStats::from_gates(&all),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        samples: data.len(),
        forward_passes: passes,
        metrics: MetricsReport::new(metrics, baselines)?,
        routing,
    })
}

/// Final run summary written after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: String,
    pub census: ParamCensus,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub eval: EvalReport,
}
