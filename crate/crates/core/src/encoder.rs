//! Frozen multi-scale convolutional backbone.
//!
//! Produces the four-stage pyramid at strides 4, 8, 16 and 32 with channel
//! counts C', 2C', 4C', 8C'. Each stage is a stride-2 3×3 convolution (two of
//! them for stage 1) followed by GELU and a residual pointwise block
//! `x + W₂·gelu(W₁·x)` whose hidden width is `expansion × channels`. The
//! pointwise block carries most of the backbone's parameters at low spatial
//! cost, which keeps the decoder a small fraction of the whole model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// C', the stage-1 channel count.
    pub base_channels: usize,
    /// Hidden width multiplier of each stage's pointwise block; 0 disables it.
    pub expansion: usize,
    pub seed: u64,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            expansion: 384,
            seed: 0,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("encoder base_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// Encoder outputs, one graph node per stage, each `[B×h×w×c]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; 4],
}

/// Stage outputs detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidValues {
    pub stages: [Tensor; 4],
}

impl PyramidValues {
    pub fn bit_eq(&self, other: &PyramidValues) -> bool {
        self.stages.iter().zip(&other.stages).all(|(a, b)| a.bit_eq(b))
    }

    /// Insert as constants on a graph.
    pub fn to_graph(&self, g: &mut Graph) -> FeaturePyramid {
        FeaturePyramid {
            stages: std::array::from_fn(|i| g.constant(self.stages[i].clone())),
        }
    }

    /// Stack per-sample pyramids along the batch axis.
    pub fn stack(items: &[&PyramidValues]) -> Result<PyramidValues> {
        let stages = std::array::from_fn(|s| {
            let first = items[0].stages[s].shape();
            let mut shape = first.to_vec();
            shape[0] = items.iter().map(|p| p.stages[s].shape()[0]).sum();
            let data = items.iter().flat_map(|p| p.stages[s].data().iter().copied()).collect();
            Tensor::new(&shape, data)
        });
        let [a, b, c, d] = stages;
        Ok(PyramidValues {
            stages: [a?, b?, c?, d?],
        })
    }

    /// Split a batched pyramid into per-sample pyramids.
    pub fn unstack(&self) -> Vec<PyramidValues> {
        let batch = self.stages[0].shape()[0];
        (0..batch)
            .map(|bi| PyramidValues {
                stages: std::array::from_fn(|s| {
                    let t = &self.stages[s];
                    let per = t.numel() / batch;
                    let mut shape = t.shape().to_vec();
                    shape[0] = 1;
                    Tensor::new(&shape, t.data()[bi * per..(bi + 1) * per].to_vec()).expect("slice size")
                }),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    downs: Vec<Conv2d>,
    pointwise: Option<(Linear, Linear)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let seed = cfg.seed;
        let mut stages = Vec::with_capacity(4);
        for (s, &out) in ch.iter().enumerate() {
            let name = format!("{PREFIX}stage{}", s + 1);
            let downs = if s == 0 {
                vec![
                    Conv2d::seeded(store, &format!("{name}.down0"), 3, out, 3, 2, seed),
                    Conv2d::seeded(store, &format!("{name}.down1"), out, out, 3, 2, seed),
                ]
            } else {
                vec![Conv2d::seeded(store, &format!("{name}.down0"), ch[s - 1], out, 3, 2, seed)]
            };
            let pointwise = (cfg.expansion > 0).then(|| {
                let hidden = out * cfg.expansion;
                (
                    Linear::seeded(store, &format!("{name}.expand"), out, hidden, seed),
                    Linear::seeded(store, &format!("{name}.project"), hidden, out, seed),
                )
            });
            stages.push(Stage { downs, pointwise });
        }
        store.set_frozen_prefix(PREFIX, cfg.frozen);
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    /// Run the backbone on `images[B×H×W×3]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Shape(format!("encoder expects [B×H×W×3], got {shape:?}")));
        }
        if !shape[1].is_multiple_of(32) || !shape[2].is_multiple_of(32) {
            return Err(Error::Shape(format!(
                "image size {}×{} must be divisible by 32",
                shape[1], shape[2]
            )));
        }
        let mut x = images;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for conv in &stage.downs {
                let y = conv.forward(g, store, x)?;
                x = g.gelu(y);
            }
            if let Some((expand, project)) = &stage.pointwise {
                let h = expand.forward(g, store, x)?;
                let h = g.gelu(h);
                let h = project.forward(g, store, h)?;
                x = g.add(x, h)?;
            }
            outs.push(x);
        }
        Ok(FeaturePyramid {
            stages: [outs[0], outs[1], outs[2], outs[3]],
        })
    }

    /// Evaluate on a batch of images without recording gradients.
    pub fn encode(&self, store: &ParamStore, images: &Tensor) -> Result<PyramidValues> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        // Values only; frozen or not, no gradient is needed here.
        let p = self.forward(&mut g, store, x)?;
        Ok(PyramidValues {
            stages: p.stages.map(|v| g.value(v).clone()),
        })
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.downs.iter().map(|c| c.linear.param_count()).sum::<usize>()
                    + s.pointwise.as_ref().map_or(0, |(a, b)| a.param_count() + b.param_count())
            })
            .sum()
    }
}
