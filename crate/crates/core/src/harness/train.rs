//! SGD training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, batch_target, TaskSample};
use crate::encoder::PyramidValues;
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::moe::RoutingStats;
use crate::params::ParamStore;
use crate::tasks::{task_loss, total_loss, TaskId};
use crate::tensor::kernels::map_range;
use crate::tensor::{Graph, Var};

use super::config::ExperimentConfig;
use super::model::{check_outputs, Model};

/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v` for every trainable parameter
/// holding a gradient. Frozen weights and buffers are never touched.
pub fn sgd_step(store: &mut ParamStore, lr: f64, weight_decay: f64, momentum: f64) {
    for p in store.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let Some(grad) = p.grad.take() else { continue };
        let v = p.velocity.get_or_insert_with(|| crate::tensor::Tensor::zeros(grad.shape()));
        for ((vi, gi), ti) in v.data_mut().iter_mut().zip(grad.data()).zip(p.value.data()) {
            *vi = momentum * *vi + (gi + weight_decay * ti);
        }
        for (ti, vi) in p.value.data_mut().iter_mut().zip(v.data()) {
            *ti -= lr * vi;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRouting {
    pub layer: String,
    pub stats: RoutingStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Weighted objective at the parameters before this step's update.
    pub total: f64,
    pub losses: BTreeMap<TaskId, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub routing: Option<Vec<LayerRouting>>,
}

/// Pyramids of a frozen encoder, one per sample, computed in parallel.
pub fn encode_samples(model: &Model, samples: &[TaskSample]) -> Result<Vec<PyramidValues>> {
    map_range(samples.len(), |i| model.encoder.encode(&model.store, &samples[i].image_tensor()))
        .into_iter()
        .collect()
}

pub(crate) fn check_cache(model: &Model, data: &[TaskSample], cache: Option<&[PyramidValues]>) -> Result<()> {
    match cache {
        Some(c) if c.len() != data.len() => Err(Error::Contract(format!(
            "{} cached pyramids for {} samples",
            c.len(),
            data.len()
        ))),
        Some(_) if !model.cfg.mode.encoder_frozen() => {
            Err(Error::Contract("cached pyramids need a frozen encoder".into()))
        }
        _ => Ok(()),
    }
}

/// Frozen-encoder pyramids for `data`, reusable by every run whose encoder
/// config matches `cfg`'s; `None` when the encoder trains.
pub fn shared_pyramids(cfg: &ExperimentConfig, data: &[TaskSample]) -> Result<Option<Vec<PyramidValues>>> {
    if !cfg.mode.encoder_frozen() {
        return Ok(None);
    }
    let mut store = ParamStore::new(cfg.seed);
    let encoder = crate::encoder::Encoder::new(&mut store, &cfg.encoder_config())?;
    map_range(data.len(), |i| encoder.encode(&store, &data[i].image_tensor()))
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Input side of a batch: cached pyramids when the encoder is frozen,
/// raw images otherwise.
pub(crate) enum BatchInput<'a> {
    Cached(Vec<&'a PyramidValues>),
    Images(crate::tensor::Tensor),
}

pub(crate) fn forward_batch(
    model: &Model,
    g: &mut Graph,
    input: BatchInput<'_>,
    h: usize,
    w: usize,
    ctx: &mut ForwardCtx,
) -> Result<BTreeMap<TaskId, Var>> {
    match input {
        BatchInput::Cached(p) => {
            let stacked = PyramidValues::stack(&p)?;
            let pyr = stacked.to_graph(g);
            model.decode(g, &pyr, h, w, ctx)
        }
        BatchInput::Images(t) => {
            let x = g.constant(t);
            model.forward(g, x, ctx)
        }
    }
}

/// Weighted loss graph for one batch, with per-task values.
pub(crate) fn batch_loss(
    model: &Model,
    g: &mut Graph,
    outputs: &BTreeMap<TaskId, Var>,
    samples: &[&TaskSample],
    step: usize,
) -> Result<(Var, BTreeMap<TaskId, f64>)> {
    let specs = model.specs();
    check_outputs(outputs, &specs)?;
    let mut losses = BTreeMap::new();
    let mut values = BTreeMap::new();
    let mut betas = BTreeMap::new();
    for spec in &specs {
        let target = batch_target(samples, spec.id);
        let l = task_loss(g, outputs[&spec.id], &target, spec)?;
        let v = g.value(l.loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: spec.id.name().into(),
            });
        }
        losses.insert(spec.id, l.loss);
        values.insert(spec.id, v);
        betas.insert(spec.id, spec.beta);
    }
    Ok((total_loss(g, &losses, &betas)?, values))
}

/// Deterministic batch order: reshuffle every epoch from the run seed.
pub(crate) struct Batches {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    size: usize,
}

impl Batches {
    pub(crate) fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c),
            size,
        };
        if size >= n {
            b.pos = 0;
        }
        b
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.size >= n {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Run `cfg.steps` SGD steps of `model` on `data`, reporting each step to `sink`.
pub fn train_model(model: &mut Model, data: &[TaskSample], sink: impl FnMut(&StepLog) -> Result<()>) -> Result<Vec<StepLog>> {
    let cache = if model.cfg.mode.encoder_frozen() && !data.is_empty() {
        Some(encode_samples(model, data)?)
    } else {
        None
    };
    train_model_cached(model, data, cache.as_deref(), sink)
}

/// [`train_model`] with precomputed pyramids of a frozen encoder, one per
/// sample of `data`. Runs that share the encoder config can share them.
pub fn train_model_cached(
    model: &mut Model,
    data: &[TaskSample],
    cache: Option<&[PyramidValues]>,
    mut sink: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let cfg = model.cfg.clone();
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_cache(model, data, cache)?;
    let (h, w) = (data[0].height, data[0].width);
    let mut batches = Batches::new(data.len(), cfg.batch_size, cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let samples: Vec<&TaskSample> = idx.iter().map(|&i| &data[i]).collect();
        let input = match cache {
            Some(c) => BatchInput::Cached(idx.iter().map(|&i| &c[i]).collect()),
            None => BatchInput::Images(batch_images(&samples)?),
        };
        let record = cfg.log_routing_every > 0 && step % cfg.log_routing_every == 0;
        let mut ctx = ForwardCtx::train();
        ctx.record_gates = record;
        let mut g = Graph::new();
        let outputs = forward_batch(model, &mut g, input, h, w, &mut ctx)?;
        let (loss, values) = batch_loss(model, &mut g, &outputs, &samples, step)?;
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::NonFinite {
                step,
                task: "total".into(),
            });
        }
        let grads = g.backward(loss)?;
        model.store.zero_grads();
        model.store.accumulate(&g, &grads);
        drop(grads);
        drop(g);
        sgd_step(&mut model.store, cfg.lr, cfg.weight_decay, cfg.momentum);
        ctx.apply_stat_updates(&mut model.store);
        let entry = StepLog {
            step,
            total,
            losses: values,
            routing: record.then(|| {
                ctx.gates
                    .iter()
                    .map(|r| LayerRouting {
                        layer: r.layer.clone(),
                        stats: RoutingStats::from_gates(&r.gates),
                    })
                    .collect()
            }),
        };
        sink(&entry)?;
        log.push(entry);
    }
    Ok(log)
}

/// Build from `cfg` and train on `data`.
pub fn train(cfg: &ExperimentConfig, data: &[TaskSample], sink: impl FnMut(&StepLog) -> Result<()>) -> Result<(Model, Vec<StepLog>)> {
    let mut model = Model::build(cfg)?;
    let log = train_model(&mut model, data, sink)?;
    Ok((model, log))
}

pub fn train_cached(
    cfg: &ExperimentConfig,
    data: &[TaskSample],
    cache: Option<&[PyramidValues]>,
    sink: impl FnMut(&StepLog) -> Result<()>,
) -> Result<(Model, Vec<StepLog>)> {
    let mut model = Model::build(cfg)?;
    let log = train_model_cached(&mut model, data, cache, sink)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_cases() {
        let mut s = ParamStore::new(0);
        let id = s.constant("w", &[1], 1.0);
        s.get_mut(id).grad = Some(crate::tensor::Tensor::full(&[1], 1.0));
        sgd_step(&mut s, 0.0, 0.0005, 0.9);
        assert_eq!(s.get(id).value.data()[0], 1.0);

        let mut s = ParamStore::new(0);
        let id = s.constant("w", &[1], 1.0);
        s.get_mut(id).grad = Some(crate::tensor::Tensor::full(&[1], 1.0));
        sgd_step(&mut s, 0.1, 0.0, 0.0);
        assert!((s.get(id).value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (lr, wd, mu, g) = (0.1, 0.01, 0.9, 0.5);
        let mut s = ParamStore::new(0);
        let id = s.constant("w", &[1], 2.0);
        let (mut theta, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            s.get_mut(id).grad = Some(crate::tensor::Tensor::full(&[1], g));
            sgd_step(&mut s, lr, wd, mu);
            v = mu * v + (g + wd * theta);
            theta -= lr * v;
        }
        assert!((s.get(id).value.data()[0] - theta).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut s = ParamStore::new(0);
        let id = s.constant("encoder.w", &[2], 1.0);
        s.set_frozen(id, true);
        s.get_mut(id).grad = Some(crate::tensor::Tensor::full(&[2], 1.0));
        sgd_step(&mut s, 1.0, 1.0, 0.9);
        assert!(s.get(id).value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn batch_schedule_covers_each_epoch() {
        let mut b = Batches::new(5, 2, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next_batch()).collect();
        seen.truncate(10);
        let mut first: Vec<usize> = seen[..5].to_vec();
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut full = Batches::new(3, 8, 0);
        assert_eq!(full.next_batch(), vec![0, 1, 2]);
    }
}
