//! Model assembly and parameter accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregator::Aggregator;
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, LayerNorm, Linear};
use crate::mixer::{flatten, MixerParams};
use crate::moe::{combine, expert_params, global_moe_forward, MoELayer};
use crate::params::{ParamKind, ParamStore};
use crate::tasks::{Head, TaskId, TaskSpec};
use crate::tensor::{Graph, Var};

use super::config::{DecoderKind, ExperimentConfig};

/// One task's path: mixer, task MoE stack, head.
#[derive(Clone, Debug)]
pub struct Branch {
    pub spec: TaskSpec,
    pub mixer: MixerParams,
    pub moe: Vec<MoELayer>,
    pub head: Head,
}

/// Pre-LN residual block `x + W₂·gelu(W₁·LN(x))`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

/// Stack of [`MlpBlock`]s shared by every task, each at most `D_h` wide,
/// and a final LayerNorm in front of the heads.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub blocks: Vec<MlpBlock>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum Decoder {
    FgMoe {
        aggregator: Aggregator,
        global: MoELayer,
        branches: Vec<Branch>,
    },
    SharedMlp {
        aggregator: Aggregator,
        mlp: SharedMlp,
        heads: Vec<Head>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

fn build_fgmoe(store: &mut ParamStore, cfg: &ExperimentConfig) -> Result<Decoder> {
    let c = cfg.decoder_channels();
    let aggregator = Aggregator::new(store, cfg.encoder.base_channels, c, cfg.aggregator_upsample);
    let global = MoELayer::new(store, "global_moe", c, &cfg.moe)?;
    let mut branches = Vec::new();
    for spec in cfg.task_specs() {
        let p = format!("task.{}", spec.id);
        let mixer = MixerParams::new(store, &format!("{p}.mixer"), c, cfg.heads)?;
        let moe = (0..cfg.moe.layers_per_task)
            .map(|l| MoELayer::new(store, &format!("{p}.moe{l}"), c, &cfg.moe))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(store, &format!("{p}.head"), c, &spec, cfg.head_upsample);
        branches.push(Branch { spec, mixer, moe, head });
    }
    Ok(Decoder::FgMoe {
        aggregator,
        global,
        branches,
    })
}

/// Block widths giving the shared-MLP decoder the trainable count of the
/// mixture decoder built from the same config: the fewest blocks of width
/// at most `D_h`, with the hidden units spread evenly over them.
fn matched_widths(cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    let mut scratch = ParamStore::new(0);
    build_fgmoe(&mut scratch, cfg)?;
    let target = scratch.weight_count();
    let c = cfg.decoder_channels();
    let heads: usize = cfg.task_specs().iter().map(|s| c * s.channels + s.channels).sum();
    let budget = target.saturating_sub(15 * cfg.encoder.base_channels * c + c + heads + 2 * c);
    let (per_block, per_hidden) = (3 * c, 2 * c + 1);
    let full = per_block + per_hidden * cfg.moe.hidden;
    let blocks = budget.div_ceil(full).max(1);
    let hidden = (budget.saturating_sub(blocks * per_block) as f64 / per_hidden as f64).round() as usize;
    let hidden = hidden.max(blocks);
    Ok((0..blocks).map(|i| hidden / blocks + usize::from(i < hidden % blocks)).collect())
}

fn build_shared_mlp(store: &mut ParamStore, cfg: &ExperimentConfig) -> Result<Decoder> {
    let c = cfg.decoder_channels();
    let widths = matched_widths(cfg)?;
    let aggregator = Aggregator::new(store, cfg.encoder.base_channels, c, cfg.aggregator_upsample);
    let blocks = widths
        .iter()
        .enumerate()
        .map(|(i, &h)| MlpBlock {
            norm: LayerNorm::new(store, &format!("shared_mlp.block{i}.norm"), c),
            up: Linear::new(store, &format!("shared_mlp.block{i}.up"), c, h, true),
            down: Linear::new(store, &format!("shared_mlp.block{i}.down"), h, c, true),
        })
        .collect();
    let heads = cfg
        .task_specs()
        .iter()
        .map(|s| Head::new(store, &format!("task.{}.head", s.id), c, s, cfg.head_upsample))
        .collect();
    Ok(Decoder::SharedMlp {
        aggregator,
        mlp: SharedMlp {
            blocks,
            norm: LayerNorm::new(store, "shared_mlp.norm", c),
        },
        heads,
    })
}

impl Model {
    /// Seeded construction. Configuration errors surface before any
    /// parameter is allocated.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let encoder = Encoder::new(&mut store, &cfg.encoder_config())?;
        let decoder = match cfg.decoder {
            DecoderKind::FgMoe => build_fgmoe(&mut store, cfg)?,
            DecoderKind::SharedMlp => build_shared_mlp(&mut store, cfg)?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
        })
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.specs().iter().map(|s| s.id).collect()
    }

    pub fn specs(&self) -> Vec<TaskSpec> {
        match &self.decoder {
            Decoder::FgMoe { branches, .. } => branches.iter().map(|b| b.spec.clone()).collect(),
            Decoder::SharedMlp { heads, .. } => heads.iter().map(|h| h.spec.clone()).collect(),
        }
    }

    /// All MoE layers, global first.
    pub fn moe_layers(&self) -> Vec<&MoELayer> {
        match &self.decoder {
            Decoder::FgMoe { global, branches, .. } => std::iter::once(global)
                .chain(branches.iter().flat_map(|b| b.moe.iter()))
                .collect(),
            Decoder::SharedMlp { .. } => Vec::new(),
        }
    }

    /// Decoder forward from a pyramid to every task's head output
    /// `[B×H×W×out]`, in task order.
    pub fn decode(
        &self,
        g: &mut Graph,
        pyramid: &FeaturePyramid,
        h: usize,
        w: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<BTreeMap<TaskId, Var>> {
        let store = &self.store;
        let mut out = BTreeMap::new();
        match &self.decoder {
            Decoder::FgMoe {
                aggregator,
                global,
                branches,
            } => {
                let x = aggregator.forward(g, store, pyramid)?;
                let s = g.shape(x).to_vec();
                let rows = s[0] * s[1] * s[2];
                let c = s[3];
                let tokens = flatten(g, x)?;
                let tokens = g.reshape(tokens, &[rows, c])?;
                let y_g = global_moe_forward(g, store, global, tokens, ctx)?;
                for b in branches {
                    let xa = b.mixer.forward(g, store, x, ctx)?;
                    let mut y = g.reshape(xa, &[rows, c])?;
                    for layer in &b.moe {
                        y = layer.forward(g, store, y, ctx)?;
                    }
                    let y = combine(g, y_g, y)?;
                    let y = g.reshape(y, &[s[0], s[1] * s[2], c])?;
                    out.insert(b.spec.id, b.head.forward(g, store, y, h, w)?);
                }
            }
            Decoder::SharedMlp { aggregator, mlp, heads } => {
                let x = aggregator.forward(g, store, pyramid)?;
                let mut y = flatten(g, x)?;
                for b in &mlp.blocks {
                    let n = b.norm.forward(g, store, y)?;
                    let hdn = b.up.forward(g, store, n)?;
                    let hdn = g.gelu(hdn);
                    let d = b.down.forward(g, store, hdn)?;
                    y = g.add(y, d)?;
                }
                let y = mlp.norm.forward(g, store, y)?;
                for head in heads {
                    out.insert(head.spec.id, head.forward(g, store, y, h, w)?);
                }
            }
        }
        Ok(out)
    }

    /// Encoder and decoder on images `[B×H×W×3]`.
    pub fn forward(&self, g: &mut Graph, images: Var, ctx: &mut ForwardCtx) -> Result<BTreeMap<TaskId, Var>> {
        let s = g.shape(images).to_vec();
        let p = self.encoder.forward(g, &self.store, images)?;
        self.decode(g, &p, s[1], s[2], ctx)
    }

    pub fn census(&self) -> ParamCensus {
        ParamCensus::of(&self.store, &self.cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub total: usize,
    pub trainable: usize,
    /// Scalars per expert, on MoE components.
    pub per_expert: Option<usize>,
}

/// Exact weight counts (BatchNorm running buffers reported separately).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub buffers: usize,
    pub components: Vec<ComponentCount>,
}

fn component_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    if first == "task" {
        let task = parts.next().unwrap_or_default();
        let part = parts.next().unwrap_or_default();
        let kind = part.trim_end_matches(|c: char| c.is_ascii_digit());
        format!("task.{task}.{kind}")
    } else {
        first.to_string()
    }
}

impl ParamCensus {
    pub fn of(store: &ParamStore, cfg: &ExperimentConfig) -> Self {
        let mut comps: Vec<ComponentCount> = Vec::new();
        let (mut total, mut trainable, mut buffers) = (0, 0, 0);
        for (_, p) in store.iter() {
            let n = p.value.numel();
            if p.kind == ParamKind::Buffer {
                buffers += n;
                continue;
            }
            total += n;
            let name = component_of(&p.name);
            let idx = match comps.iter().position(|c| c.name == name) {
                Some(i) => i,
                None => {
                    let moe = name == "global_moe" || name.ends_with(".moe");
                    comps.push(ComponentCount {
                        per_expert: moe.then(|| expert_params(cfg.decoder_channels(), cfg.moe.hidden)),
                        name,
                        total: 0,
                        trainable: 0,
                    });
                    comps.len() - 1
                }
            };
            comps[idx].total += n;
            if p.requires_grad() {
                comps[idx].trainable += n;
                trainable += n;
            }
        }
        Self {
            total,
            trainable,
            frozen: total - trainable,
            buffers,
            components: comps,
        }
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn component(&self, name: &str) -> Option<&ComponentCount> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn reconciles(&self) -> bool {
        self.components.iter().map(|c| c.total).sum::<usize>() == self.total
            && self.components.iter().map(|c| c.trainable).sum::<usize>() == self.trainable
            && self.trainable <= self.total
    }
}

/// Reject incompatible decoder outputs before building a loss.
pub(crate) fn check_outputs(outputs: &BTreeMap<TaskId, Var>, specs: &[TaskSpec]) -> Result<()> {
    if outputs.len() != specs.len() {
        return Err(Error::Contract("decoder produced the wrong set of task outputs".into()));
    }
    Ok(())
}
