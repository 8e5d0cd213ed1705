//! Task heads, losses, the weighted objective, evaluation metrics and Δm.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregator::UpsampleMode;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::mixer::unflatten;
use crate::params::ParamStore;
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// Segmentation ignore label.
pub const IGNORE: u16 = 255;
/// Output stride of the decoder relative to the image.
pub const HEAD_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Seg,
    PartSeg,
    Sal,
    Depth,
    Normal,
    Bound,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Seg,
        TaskId::PartSeg,
        TaskId::Sal,
        TaskId::Depth,
        TaskId::Normal,
        TaskId::Bound,
    ];
    pub const NYUD: [TaskId; 4] = [TaskId::Seg, TaskId::Depth, TaskId::Normal, TaskId::Bound];
    pub const PASCAL: [TaskId; 5] = [TaskId::Seg, TaskId::PartSeg, TaskId::Sal, TaskId::Normal, TaskId::Bound];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Seg => "seg",
            TaskId::PartSeg => "partseg",
            TaskId::Sal => "sal",
            TaskId::Depth => "depth",
            TaskId::Normal => "normal",
            TaskId::Bound => "bound",
        }
    }

    pub fn default_beta(self) -> f64 {
        match self {
            TaskId::Seg => 1.0,
            TaskId::PartSeg => 2.0,
            TaskId::Sal => 5.0,
            TaskId::Depth => 1.0,
            TaskId::Normal => 10.0,
            TaskId::Bound => 50.0,
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            TaskId::Depth | TaskId::Normal => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            TaskId::Seg | TaskId::PartSeg => "mIoU",
            TaskId::Sal => "maxF",
            TaskId::Depth => "rmse",
            TaskId::Normal => "mErr",
            TaskId::Bound => "odsF-simplified",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::HigherBetter => 1.0,
            Direction::LowerBetter => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub channels: usize,
    pub beta: f64,
}

impl TaskSpec {
    /// `classes` sizes seg; `parts` sizes partseg.
    pub fn new(id: TaskId, classes: usize, parts: usize) -> Self {
        let channels = match id {
            TaskId::Seg => classes,
            TaskId::PartSeg => parts,
            TaskId::Normal => 3,
            _ => 1,
        };
        Self {
            id,
            channels,
            beta: id.default_beta(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("loss weight for {} must be > 0", self.id)));
        }
        if self.channels == 0 {
            return Err(Error::Config(format!("{} head needs at least one channel", self.id)));
        }
        Ok(())
    }

    pub fn direction(&self) -> Direction {
        self.id.direction()
    }
}

/// Reject task lists that mix the two benchmark families or repeat a task.
pub fn validate_task_set(tasks: &[TaskId]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("task set is empty".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(Error::Config(format!("task {t} listed twice")));
        }
    }
    let nyud = tasks.iter().all(|t| TaskId::NYUD.contains(t));
    let pascal = tasks.iter().all(|t| TaskId::PASCAL.contains(t));
    if !nyud && !pascal {
        return Err(Error::Config(
            "task set mixes depth with partseg/sal; use NYUD-style or PASCAL-style tasks".into(),
        ));
    }
    Ok(())
}

/// 1×1 projection from decoder tokens to task channels, then upsampling
/// back to image resolution.
#[derive(Clone, Debug)]
pub struct Head {
    pub spec: TaskSpec,
    pub proj: Linear,
    pub upsample: UpsampleMode,
}

impl Head {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, spec: &TaskSpec, upsample: UpsampleMode) -> Self {
        Self {
            spec: spec.clone(),
            proj: Linear::new(store, &format!("{prefix}.proj"), c, spec.channels, true),
            upsample,
        }
    }

    pub fn param_count(&self) -> usize {
        self.proj.param_count()
    }

    /// `features[B×N×C]` with `N = (H/4)(W/4)` to `[B×H×W×out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var, h: usize, w: usize) -> Result<Var> {
        let n = g.shape(features)[g.shape(features).len() - 2];
        let (fh, fw) = (h / HEAD_STRIDE, w / HEAD_STRIDE);
        if !h.is_multiple_of(HEAD_STRIDE) || !w.is_multiple_of(HEAD_STRIDE) || n != fh * fw {
            return Err(Error::Shape(format!(
                "{} head: {n} tokens do not match a {h}×{w} output at stride {HEAD_STRIDE}",
                self.spec.id
            )));
        }
        let y = self.proj.forward(g, store, features)?;
        let y = unflatten(g, y, fh, fw)?;
        let y = match self.upsample {
            UpsampleMode::Nearest => crate::aggregator::upsample_nearest(g, y, HEAD_STRIDE)?,
            UpsampleMode::Bilinear => crate::aggregator::upsample_bilinear(g, y, HEAD_STRIDE)?,
        };
        Ok(if self.spec.id == TaskId::Normal { g.l2_normalize(y) } else { y })
    }
}

/// Ground truth for one task over a batch, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTarget {
    /// Class index per pixel, [`IGNORE`] skipped.
    Labels(Vec<u16>),
    /// One or more reals per pixel (depth, unit normals, binary maps).
    Dense(Vec<f64>),
}

impl TaskTarget {
    fn labels(&self, task: TaskId) -> Result<&[u16]> {
        match self {
            TaskTarget::Labels(l) => Ok(l),
            TaskTarget::Dense(_) => Err(Error::Config(format!("{task} expects class-index targets"))),
        }
    }

    fn dense(&self, task: TaskId) -> Result<&[f64]> {
        match self {
            TaskTarget::Dense(d) => Ok(d),
            TaskTarget::Labels(_) => Err(Error::Config(format!("{task} expects real-valued targets"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub loss: Var,
    /// Counted pixels; zero means every pixel was ignored and `loss` is 0.
    pub valid: usize,
}

impl TaskLoss {
    pub fn all_ignored(&self) -> bool {
        self.valid == 0
    }
}

/// Per-task loss on a head output `pred[B×H×W×out]`.
pub fn task_loss(g: &mut Graph, pred: Var, target: &TaskTarget, spec: &TaskSpec) -> Result<TaskLoss> {
    let out = *g.shape(pred).last().unwrap();
    let pixels = g.value(pred).numel() / out;
    match spec.id {
        TaskId::Seg | TaskId::PartSeg => {
            let labels = target.labels(spec.id)?;
            let flat = g.reshape(pred, &[pixels, out])?;
            let t: Vec<Option<usize>> = labels.iter().map(|&l| (l != IGNORE).then_some(l as usize)).collect();
            let (loss, valid) = g.cross_entropy(flat, &t)?;
            Ok(TaskLoss { loss, valid })
        }
        TaskId::Depth => {
            let loss = g.l1_loss(pred, target.dense(spec.id)?)?;
            Ok(TaskLoss { loss, valid: pixels })
        }
        TaskId::Normal => {
            let t = target.dense(spec.id)?;
            if t.len() != g.value(pred).numel() {
                return Err(Error::dim("normal_loss", g.shape(pred), &[t.len()]));
            }
            let tv = g.constant(Tensor::new(g.shape(pred), t.to_vec())?);
            let dots = g.mul(pred, tv)?;
            let total = g.sum(dots);
            let mean = g.scale(total, -1.0 / pixels as f64);
            Ok(TaskLoss {
                loss: g.add_scalar(mean, 1.0),
                valid: pixels,
            })
        }
        TaskId::Sal | TaskId::Bound => {
            let loss = g.bce_with_logits(pred, target.dense(spec.id)?)?;
            Ok(TaskLoss { loss, valid: pixels })
        }
    }
}

fn check_keys<A, B>(a: &BTreeMap<TaskId, A>, b: &BTreeMap<TaskId, B>) -> Result<()> {
    if !a.keys().eq(b.keys()) {
        let ka: Vec<_> = a.keys().map(|t| t.name()).collect();
        let kb: Vec<_> = b.keys().map(|t| t.name()).collect();
        return Err(Error::Config(format!("loss tasks {ka:?} do not match weight tasks {kb:?}")));
    }
    Ok(())
}

/// `Σ_t β_t·L_t`, summed in task order.
pub fn total_loss(g: &mut Graph, losses: &BTreeMap<TaskId, Var>, betas: &BTreeMap<TaskId, f64>) -> Result<Var> {
    check_keys(losses, betas)?;
    let mut acc: Option<Var> = None;
    for (t, &l) in losses {
        let term = g.scale(l, betas[t]);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Config("no task losses".into()))
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(losses: &BTreeMap<TaskId, f64>, betas: &BTreeMap<TaskId, f64>) -> Result<f64> {
    check_keys(losses, betas)?;
    Ok(losses.iter().map(|(t, l)| betas[t] * l).sum())
}

/// Thresholds of the best-threshold F-measure.
pub fn f_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// Additive metric state. Partial states over disjoint data merge exactly
/// because only integer counts and sums are stored; division happens once
/// in [`MetricAccumulator::value`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetricAccumulator {
    Iou {
        intersection: Vec<u64>,
        union: Vec<u64>,
        present: Vec<u64>,
    },
    Rmse {
        sq_err: f64,
        count: u64,
    },
    Angle {
        deg_sum: f64,
        count: u64,
    },
    FMeasure {
        tp: Vec<u64>,
        fp: Vec<u64>,
        fn_: Vec<u64>,
    },
}

impl MetricAccumulator {
    pub fn new(spec: &TaskSpec) -> Self {
        match spec.id {
            TaskId::Seg | TaskId::PartSeg => MetricAccumulator::Iou {
                intersection: vec![0; spec.channels],
                union: vec![0; spec.channels],
                present: vec![0; spec.channels],
            },
            TaskId::Depth => MetricAccumulator::Rmse { sq_err: 0.0, count: 0 },
            TaskId::Normal => MetricAccumulator::Angle { deg_sum: 0.0, count: 0 },
            TaskId::Sal | TaskId::Bound => {
                let n = f_thresholds().len();
                MetricAccumulator::FMeasure {
                    tp: vec![0; n],
                    fp: vec![0; n],
                    fn_: vec![0; n],
                }
            }
        }
    }

    /// Fold in predictions. `pred` is the head output: class scores for
    /// segmentation, depth, unit normals, or logits for binary maps.
    pub fn update(&mut self, task: TaskId, pred: &Tensor, target: &TaskTarget) -> Result<()> {
        let out = pred.last_dim();
        match self {
            MetricAccumulator::Iou {
                intersection,
                union,
                present,
            } => {
                let labels = target.labels(task)?;
                if labels.len() * out != pred.numel() {
                    return Err(Error::dim("miou", pred.shape(), &[labels.len()]));
                }
                for (row, &l) in pred.data().chunks(out).zip(labels) {
                    if l == IGNORE {
                        continue;
                    }
                    let l = l as usize;
                    let p = argmax(row);
                    present[l] += 1;
                    if p == l {
                        intersection[l] += 1;
                        union[l] += 1;
                    } else {
                        union[l] += 1;
                        union[p] += 1;
                    }
                }
            }
            MetricAccumulator::Rmse { sq_err, count } => {
                let t = target.dense(task)?;
                if t.len() != pred.numel() {
                    return Err(Error::dim("rmse", pred.shape(), &[t.len()]));
                }
                for (p, t) in pred.data().iter().zip(t) {
                    if *t > 0.0 {
                        *sq_err += (p - t).powi(2);
                        *count += 1;
                    }
                }
            }
            MetricAccumulator::Angle { deg_sum, count } => {
                let t = target.dense(task)?;
                if t.len() != pred.numel() || out != 3 {
                    return Err(Error::dim("mean_angle", pred.shape(), &[t.len()]));
                }
                for (p, t) in pred.data().chunks(3).zip(t.chunks(3)) {
                    let np = norm(p);
                    let nt = norm(t);
                    if nt == 0.0 || np == 0.0 {
                        continue;
                    }
                    let cos = (p[0] * t[0] + p[1] * t[1] + p[2] * t[2]) / (np * nt);
                    *deg_sum += cos.clamp(-1.0, 1.0).acos().to_degrees();
                    *count += 1;
                }
            }
            MetricAccumulator::FMeasure { tp, fp, fn_ } => {
                let t = target.dense(task)?;
                if t.len() != pred.numel() {
                    return Err(Error::dim("f_measure", pred.shape(), &[t.len()]));
                }
                let th = f_thresholds();
                for (&logit, &truth) in pred.data().iter().zip(t) {
                    let prob = sigmoid(logit);
                    let positive = truth >= 0.5;
                    for (k, &thr) in th.iter().enumerate() {
                        match (prob >= thr, positive) {
                            (true, true) => tp[k] += 1,
                            (true, false) => fp[k] += 1,
                            (false, true) => fn_[k] += 1,
                            (false, false) => {}
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        fn add(a: &mut [u64], b: &[u64]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        match (self, other) {
            (
                MetricAccumulator::Iou {
                    intersection,
                    union,
                    present,
                },
                MetricAccumulator::Iou {
                    intersection: i2,
                    union: u2,
                    present: p2,
                },
            ) if intersection.len() == i2.len() => {
                add(intersection, i2);
                add(union, u2);
                add(present, p2);
            }
            (MetricAccumulator::Rmse { sq_err, count }, MetricAccumulator::Rmse { sq_err: s2, count: c2 }) => {
                *sq_err += s2;
                *count += c2;
            }
            (MetricAccumulator::Angle { deg_sum, count }, MetricAccumulator::Angle { deg_sum: d2, count: c2 }) => {
                *deg_sum += d2;
                *count += c2;
            }
            (MetricAccumulator::FMeasure { tp, fp, fn_ }, MetricAccumulator::FMeasure { tp: t2, fp: f2, fn_: n2 }) => {
                add(tp, t2);
                add(fp, f2);
                add(fn_, n2);
            }
            _ => return Err(Error::Config("cannot merge accumulators of different metrics".into())),
        }
        Ok(())
    }

    pub fn value(&self, task: TaskId) -> Result<f64> {
        let empty = || Error::Metric {
            task: task.name().into(),
            reason: "no valid pixels".into(),
        };
        match self {
            MetricAccumulator::Iou {
                intersection,
                union,
                present,
            } => {
                let ious: Vec<f64> = (0..present.len())
                    .filter(|&c| present[c] > 0)
                    .map(|c| intersection[c] as f64 / union[c] as f64)
                    .collect();
                if ious.is_empty() {
                    return Err(empty());
                }
                Ok(ious.iter().sum::<f64>() / ious.len() as f64)
            }
            MetricAccumulator::Rmse { sq_err, count } => {
                if *count == 0 {
                    return Err(empty());
                }
                Ok((sq_err / *count as f64).sqrt())
            }
            MetricAccumulator::Angle { deg_sum, count } => {
                if *count == 0 {
                    return Err(empty());
                }
                Ok(deg_sum / *count as f64)
            }
            MetricAccumulator::FMeasure { tp, fp, fn_ } => {
                if tp[0] + fn_[0] == 0 {
                    return Err(Error::Metric {
                        task: task.name().into(),
                        reason: "no positive pixels in targets".into(),
                    });
                }
                Ok((0..tp.len())
                    .map(|k| 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64)
                    .fold(0.0, f64::max))
            }
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One-shot metric over a whole dataset.
pub fn compute_metric(spec: &TaskSpec, preds: &[Tensor], targets: &[TaskTarget]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Metric {
            task: spec.id.name().into(),
            reason: format!("{} predictions for {} targets", preds.len(), targets.len()),
        });
    }
    let mut acc = MetricAccumulator::new(spec);
    for (p, t) in preds.iter().zip(targets) {
        acc.update(spec.id, p, t)?;
    }
    acc.value(spec.id)
}

/// `(1/T) Σ sign_t·(F_m − F_s)/F_s · 100`.
pub fn delta_m(f_m: &[f64], f_s: &[f64], directions: &[Direction]) -> Result<f64> {
    if f_m.len() != f_s.len() || f_m.len() != directions.len() || f_m.is_empty() {
        return Err(Error::dim("delta_m", &[f_m.len(), f_s.len()], &[directions.len()]));
    }
    let mut total = 0.0;
    for i in 0..f_m.len() {
        if f_s[i] == 0.0 {
            return Err(Error::Division(format!("baseline entry {i} is zero")));
        }
        total += directions[i].sign() * (f_m[i] - f_s[i]) / f_s[i] * 100.0;
    }
    Ok(total / f_m.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetric {
    pub task: TaskId,
    pub metric: String,
    pub value: f64,
}

/// Metrics, optional Δm against single-task baselines, and the values used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metrics: Vec<TaskMetric>,
    pub delta_m: Option<f64>,
    pub f_m: Vec<f64>,
    pub f_s: Option<Vec<f64>>,
    pub directions: Vec<Direction>,
}

impl MetricsReport {
    pub fn new(metrics: Vec<TaskMetric>, baselines: Option<&BTreeMap<TaskId, f64>>) -> Result<Self> {
        let f_m: Vec<f64> = metrics.iter().map(|m| m.value).collect();
        let directions: Vec<Direction> = metrics.iter().map(|m| m.task.direction()).collect();
        let f_s = match baselines {
            Some(b) => Some(
                metrics
                    .iter()
                    .map(|m| {
                        b.get(&m.task)
                            .copied()
                            .ok_or_else(|| Error::Config(format!("missing single-task baseline for {}", m.task)))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
            None => None,
        };
        let delta_m = f_s.as_ref().map(|s| delta_m(&f_m, s, &directions)).transpose()?;
        Ok(Self {
            metrics,
            delta_m,
            f_m,
            f_s,
            directions,
        })
    }

    pub fn get(&self, task: TaskId) -> Option<f64> {
        self.metrics.iter().find(|m| m.task == task).map(|m| m.value)
    }

    pub fn recompute_delta_m(&self) -> Option<Result<f64>> {
        self.f_s.as_ref().map(|s| delta_m(&self.f_m, s, &self.directions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: [f64; 4] = [56.77, 0.5141, 18.56, 78.93];
    const DIRS: [Direction; 4] = [
        Direction::HigherBetter,
        Direction::LowerBetter,
        Direction::LowerBetter,
        Direction::HigherBetter,
    ];

    #[test]
    fn delta_m_published_rows() {
        let a = delta_m(&[55.30, 0.5152, 18.47, 78.20], &FS, &DIRS).unwrap();
        assert!((a + 0.81).abs() < 0.01, "{a}");
        let b = delta_m(&[55.96, 0.5076, 18.33, 78.43], &FS, &DIRS).unwrap();
        assert!((b - 0.11).abs() < 0.01, "{b}");
        assert_eq!(delta_m(&FS, &FS, &DIRS).unwrap(), 0.0);
    }

    #[test]
    fn delta_m_zero_baseline_is_division_error() {
        let err = delta_m(&[1.0], &[0.0], &[Direction::HigherBetter]).unwrap_err();
        assert!(matches!(err, Error::Division(_)));
    }

    #[test]
    fn total_loss_default_weights() {
        let betas: BTreeMap<_, _> = TaskId::NYUD.iter().map(|&t| (t, t.default_beta())).collect();
        let ones: BTreeMap<_, _> = TaskId::NYUD.iter().map(|&t| (t, 1.0)).collect();
        assert_eq!(total_loss_value(&ones, &betas).unwrap(), 62.0);
        let zeros: BTreeMap<_, _> = TaskId::NYUD.iter().map(|&t| (t, 0.0)).collect();
        assert_eq!(total_loss_value(&zeros, &betas).unwrap(), 0.0);
        let doubled: BTreeMap<_, _> = betas.iter().map(|(&t, &b)| (t, 2.0 * b)).collect();
        assert_eq!(total_loss_value(&ones, &doubled).unwrap(), 124.0);

        let mut g = Graph::new();
        let vars: BTreeMap<_, _> = TaskId::NYUD.iter().map(|&t| (t, g.constant(Tensor::scalar(1.0)))).collect();
        let tot = total_loss(&mut g, &vars, &betas).unwrap();
        assert_eq!(g.value(tot).item(), 62.0);
    }

    #[test]
    fn total_loss_key_mismatch() {
        let betas: BTreeMap<_, _> = [(TaskId::Seg, 1.0)].into();
        let losses: BTreeMap<_, _> = [(TaskId::Depth, 1.0)].into();
        assert!(matches!(total_loss_value(&losses, &betas), Err(Error::Config(_))));
    }

    #[test]
    fn task_set_rules() {
        assert!(validate_task_set(&TaskId::NYUD).is_ok());
        assert!(validate_task_set(&TaskId::PASCAL).is_ok());
        assert!(validate_task_set(&[TaskId::Depth, TaskId::Sal]).is_err());
        assert!(validate_task_set(&[TaskId::Seg, TaskId::Seg]).is_err());
        assert_eq!("partseg".parse::<TaskId>().unwrap(), TaskId::PartSeg);
        assert!("edges".parse::<TaskId>().is_err());
    }

    fn head(id: TaskId, c: usize) -> (ParamStore, Head) {
        let mut store = ParamStore::new(1);
        let spec = TaskSpec::new(id, 6, 5);
        let h = Head::new(&mut store, "head", c, &spec, UpsampleMode::Nearest);
        (store, h)
    }

    fn tokens(b: usize, n: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[b, n, c], |i| ((i * 7919) % 23) as f64 / 23.0 - 0.5)
    }

    #[test]
    fn depth_head_shape() {
        let (store, h) = head(TaskId::Depth, 4);
        let mut g = Graph::new();
        let x = g.constant(tokens(2, 16, 4));
        let y = h.forward(&mut g, &store, x, 16, 16).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 16, 1]);
        let bad = g.constant(tokens(1, 15, 4));
        assert!(matches!(h.forward(&mut g, &store, bad, 16, 16), Err(Error::Shape(_))));
    }

    #[test]
    fn normal_head_outputs_unit_vectors() {
        let (store, h) = head(TaskId::Normal, 4);
        let mut g = Graph::new();
        let x = g.constant(tokens(1, 4, 4));
        let y = h.forward(&mut g, &store, x, 8, 8).unwrap();
        for px in g.value(y).data().chunks(3) {
            assert!((norm(px) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_head_weights_give_bias_map() {
        let (mut store, h) = head(TaskId::Depth, 4);
        store.get_mut(h.proj.weight).value = Tensor::zeros(&[4, 1]);
        store.get_mut(h.proj.bias.unwrap()).value = Tensor::full(&[1], 0.7);
        let mut g = Graph::new();
        let x = g.constant(tokens(1, 4, 4));
        let y = h.forward(&mut g, &store, x, 8, 8).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn loss_limits() {
        let spec = TaskSpec::new(TaskId::Seg, 3, 1);
        let mut g = Graph::new();
        let logits = Tensor::from_fn(&[1, 1, 2, 3], |i| if i == 1 || i == 5 { 60.0 } else { -60.0 });
        let p = g.constant(logits);
        let l = task_loss(&mut g, p, &TaskTarget::Labels(vec![1, 2]), &spec).unwrap();
        assert!(g.value(l.loss).item() < 1e-40);
        let none = task_loss(&mut g, p, &TaskTarget::Labels(vec![IGNORE, IGNORE]), &spec).unwrap();
        assert!(none.all_ignored());
        assert_eq!(g.value(none.loss).item(), 0.0);

        let d = TaskSpec::new(TaskId::Depth, 0, 0);
        let t = vec![1.0, 2.0, 3.0, 4.0];
        let p = g.constant(Tensor::new(&[1, 2, 2, 1], t.clone()).unwrap());
        let l = task_loss(&mut g, p, &TaskTarget::Dense(t), &d).unwrap();
        assert_eq!(g.value(l.loss).item(), 0.0);

        let n = TaskSpec::new(TaskId::Normal, 0, 0);
        let t = vec![0.0, 0.0, 1.0, 0.6, 0.0, 0.8];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let p = g.constant(Tensor::new(&[1, 1, 2, 3], neg).unwrap());
        let l = task_loss(&mut g, p, &TaskTarget::Dense(t), &n).unwrap();
        assert!((g.value(l.loss).item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_target_kind_is_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let spec = TaskSpec::new(TaskId::Depth, 0, 0);
        assert!(task_loss(&mut g, p, &TaskTarget::Labels(vec![0]), &spec).is_err());
    }

    #[test]
    fn perfect_predictions_are_perfect() {
        let seg = TaskSpec::new(TaskId::Seg, 3, 0);
        let labels = vec![0u16, 2, 1, 2];
        let scores = Tensor::from_fn(&[1, 2, 2, 3], |i| if labels[i / 3] as usize == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(compute_metric(&seg, &[scores], &[TaskTarget::Labels(labels)]).unwrap(), 1.0);

        let depth = TaskSpec::new(TaskId::Depth, 0, 0);
        let t = Tensor::new(&[1, 1, 2, 1], vec![1.0, 4.0]).unwrap();
        assert_eq!(compute_metric(&depth, std::slice::from_ref(&t), &[TaskTarget::Dense(t.data().to_vec())]).unwrap(), 0.0);
        let p = Tensor::new(&[1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let r = compute_metric(&depth, &[p], &[TaskTarget::Dense(vec![1.0, 4.0])]).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);

        let normal = TaskSpec::new(TaskId::Normal, 0, 0);
        let t = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let same = Tensor::new(&[1, 1, 2, 3], t.clone()).unwrap();
        assert_eq!(compute_metric(&normal, &[same], &[TaskTarget::Dense(t.clone())]).unwrap(), 0.0);
        let anti = Tensor::new(&[1, 1, 2, 3], t.iter().map(|v| -v).collect()).unwrap();
        assert!((compute_metric(&normal, &[anti], &[TaskTarget::Dense(t)]).unwrap() - 180.0).abs() < 1e-9);

        let bound = TaskSpec::new(TaskId::Bound, 0, 0);
        let t = vec![1.0, 0.0, 0.0, 1.0];
        let logits = Tensor::new(&[1, 2, 2, 1], vec![9.0, -9.0, -9.0, 9.0]).unwrap();
        assert_eq!(compute_metric(&bound, &[logits], &[TaskTarget::Dense(t)]).unwrap(), 1.0);
    }

    #[test]
    fn metric_errors_name_the_task() {
        let depth = TaskSpec::new(TaskId::Depth, 0, 0);
        let err = compute_metric(&depth, &[Tensor::zeros(&[1, 1, 1, 1])], &[TaskTarget::Dense(vec![0.0])]).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
        let seg = TaskSpec::new(TaskId::Seg, 2, 0);
        let err = compute_metric(&seg, &[Tensor::zeros(&[1, 1, 1, 2])], &[TaskTarget::Labels(vec![IGNORE])]).unwrap_err();
        assert!(matches!(err, Error::Metric { .. }));
    }

    #[test]
    fn miou_counts_only_present_classes() {
        // Class 2 never appears in targets; a stray prediction of it still
        // enlarges the union of class 0.
        let seg = TaskSpec::new(TaskId::Seg, 3, 0);
        let labels = vec![0u16, 0, 1, 1];
        let pred_cls = [0usize, 2, 1, 1];
        let scores = Tensor::from_fn(&[1, 2, 2, 3], |i| if pred_cls[i / 3] == i % 3 { 1.0 } else { 0.0 });
        let v = compute_metric(&seg, &[scores], &[TaskTarget::Labels(labels)]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn metrics_report_checks_baselines() {
        let m = vec![
            TaskMetric {
                task: TaskId::Seg,
                metric: "mIoU".into(),
                value: 0.5,
            },
            TaskMetric {
                task: TaskId::Depth,
                metric: "rmse".into(),
                value: 0.2,
            },
        ];
        let own: BTreeMap<_, _> = [(TaskId::Seg, 0.5), (TaskId::Depth, 0.2)].into();
        let r = MetricsReport::new(m.clone(), Some(&own)).unwrap();
        assert_eq!(r.delta_m, Some(0.0));
        assert_eq!(r.recompute_delta_m().unwrap().unwrap(), 0.0);
        let partial: BTreeMap<_, _> = [(TaskId::Seg, 0.5)].into();
        assert!(matches!(MetricsReport::new(m, Some(&partial)), Err(Error::Config(_))));
    }
}
