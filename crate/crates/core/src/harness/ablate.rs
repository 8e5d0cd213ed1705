//! Expert-count and top-k sweeps: one trained and evaluated model per cell.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskSample;
use crate::encoder::PyramidValues;
use crate::error::Result;
use crate::moe::MoEConfig;
use crate::tasks::{MetricsReport, TaskId};

use super::config::ExperimentConfig;
use super::eval::evaluate_cached;
use super::train::{shared_pyramids, train_cached, LayerRouting};

pub const EXPERT_GRID: [usize; 5] = [2, 4, 6, 8, 16];
pub const TOPK_GRID: [usize; 4] = [2, 3, 4, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Experts,
    TopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis: Axis,
    pub shared: usize,
    pub routed: usize,
    pub top_k: usize,
    pub trainable: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
    pub routing: Vec<LayerRouting>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
    Mixed,
}

/// Direction of a sequence, ignoring exact repeats.
pub fn trend(values: &[f64]) -> Trend {
    let (mut up, mut down) = (false, false);
    for w in values.windows(2) {
        if w[1] > w[0] {
            up = true;
        } else if w[1] < w[0] {
            down = true;
        }
    }
    match (up, down) {
        (false, false) => Trend::Flat,
        (true, false) => Trend::Increasing,
        (false, true) => Trend::Decreasing,
        (true, true) => Trend::Mixed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisTrend {
    pub axis: Axis,
    /// `"final_loss"`, `"delta_m"` or a task name.
    pub quantity: String,
    pub values: Vec<f64>,
    pub trend: Trend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub cells: Vec<AblationCell>,
    pub trends: Vec<AxisTrend>,
}

/// `(axis, moe config)` for every cell: routed experts over [`EXPERT_GRID`]
/// with `K = min(base K, N)`, then K over [`TOPK_GRID`] with the base N.
pub fn ablation_grid(base: &MoEConfig) -> Vec<(Axis, MoEConfig)> {
    let experts = EXPERT_GRID.iter().map(|&n| {
        (
            Axis::Experts,
            MoEConfig {
                routed: n,
                top_k: base.top_k.min(n),
                ..base.clone()
            },
        )
    });
    let topk = TOPK_GRID.iter().map(|&k| {
        (
            Axis::TopK,
            MoEConfig {
                top_k: k,
                ..base.clone()
            },
        )
    });
    experts.chain(topk).collect()
}

pub fn run_cell(
    cfg: &ExperimentConfig,
    axis: Axis,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
    baselines: Option<&BTreeMap<TaskId, f64>>,
    cache: Option<(&[PyramidValues], &[PyramidValues])>,
) -> Result<AblationCell> {
    let (model, log) = train_cached(cfg, train_data, cache.map(|c| c.0), |_| Ok(()))?;
    let report = evaluate_cached(&model, eval_data, cache.map(|c| c.1), baselines)?;
    Ok(AblationCell {
        axis,
        shared: cfg.moe.shared,
        routed: cfg.moe.routed,
        top_k: cfg.moe.top_k,
        trainable: model.census().trainable,
        initial_loss: log.first().map_or(f64::NAN, |l| l.total),
        final_loss: log.last().map_or(f64::NAN, |l| l.total),
        metrics: report.metrics,
        routing: report.routing,
    })
}

fn axis_trends(cells: &[AblationCell], axis: Axis) -> Vec<AxisTrend> {
    let cells: Vec<&AblationCell> = cells.iter().filter(|c| c.axis == axis).collect();
    let Some(first) = cells.first() else { return Vec::new() };
    let mut out = Vec::new();
    let mut push = |quantity: String, values: Vec<f64>| {
        out.push(AxisTrend {
            axis,
            trend: trend(&values),
            quantity,
            values,
        })
    };
    push("final_loss".into(), cells.iter().map(|c| c.final_loss).collect());
    for m in &first.metrics.metrics {
        push(
            m.task.name().into(),
            cells.iter().map(|c| c.metrics.get(m.task).unwrap_or(f64::NAN)).collect(),
        );
    }
    if first.metrics.delta_m.is_some() {
        push(
            "delta_m".into(),
            cells.iter().map(|c| c.metrics.delta_m.unwrap_or(f64::NAN)).collect(),
        );
    }
    out
}

/// Run every grid cell of `base`, reporting each to `sink` as it finishes.
pub fn ablate(
    base: &ExperimentConfig,
    train_data: &[TaskSample],
    eval_data: &[TaskSample],
    baselines: Option<&BTreeMap<TaskId, f64>>,
    mut sink: impl FnMut(&AblationCell) -> Result<()>,
) -> Result<AblationSummary> {
    let tr = shared_pyramids(base, train_data)?;
    let ev = shared_pyramids(base, eval_data)?;
    let cache = tr.as_deref().zip(ev.as_deref());
    let mut cells = Vec::new();
    for (axis, moe) in ablation_grid(&base.moe) {
        let cfg = ExperimentConfig { moe, ..base.clone() };
        let cell = run_cell(&cfg, axis, train_data, eval_data, baselines, cache)?;
        sink(&cell)?;
        cells.push(cell);
    }
    let trends = [Axis::Experts, Axis::TopK]
        .into_iter()
        .flat_map(|a| axis_trends(&cells, a))
        .collect();
    Ok(AblationSummary { cells, trends })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_both_axes() {
        let grid = ablation_grid(&MoEConfig::default());
        assert_eq!(grid.len(), 9);
        let experts: Vec<(usize, usize)> = grid[..5].iter().map(|(_, m)| (m.routed, m.top_k)).collect();
        assert_eq!(experts, vec![(2, 2), (4, 3), (6, 3), (8, 3), (16, 3)]);
        let ks: Vec<(usize, usize)> = grid[5..].iter().map(|(_, m)| (m.routed, m.top_k)).collect();
        assert_eq!(ks, vec![(6, 2), (6, 3), (6, 4), (6, 6)]);
        assert!(grid.iter().all(|(_, m)| m.validate().is_ok()));
    }

    #[test]
    fn trend_labels() {
        assert_eq!(trend(&[1.0, 2.0, 2.0, 3.0]), Trend::Increasing);
        assert_eq!(trend(&[3.0, 1.0]), Trend::Decreasing);
        assert_eq!(trend(&[1.0, 1.0]), Trend::Flat);
        assert_eq!(trend(&[1.0, 2.0, 1.5]), Trend::Mixed);
        assert_eq!(trend(&[]), Trend::Flat);
    }
}
