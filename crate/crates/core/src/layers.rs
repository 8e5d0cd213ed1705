//! Small parameterized building blocks shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

/// Whether BatchNorm uses batch statistics and whether those statistics are
/// folded into the running buffers afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance (the running buffer tracks this one).
    pub batch_var: Vec<f64>,
}

/// One gate matrix recorded during a forward pass, for routing statistics.
#[derive(Clone, Debug)]
pub struct GateRecord {
    pub layer: String,
    /// Normalized gates `[tokens × routed experts]`.
    pub gates: Tensor,
    /// Smallest top-k selection margin over the recorded tokens.
    pub margin: f64,
}

/// Per-forward scratch state: BatchNorm mode and the side outputs a forward
/// produces (pending running-stat updates and routing decisions).
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub stat_updates: Vec<StatUpdate>,
    pub gates: Vec<GateRecord>,
    pub record_gates: bool,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            stat_updates: Vec::new(),
            gates: Vec::new(),
            record_gates: false,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn with_gate_records(mut self) -> Self {
        self.record_gates = true;
        self
    }

    /// Fold pending batch statistics into the running buffers by EMA.
    pub fn apply_stat_updates(&mut self, store: &mut ParamStore) {
        for up in self.stat_updates.drain(..) {
            ema(store, up.mean, &up.batch_mean);
            ema(store, up.var, &up.batch_var);
        }
    }
}

fn ema(store: &mut ParamStore, id: ParamId, batch: &[f64]) {
    for (r, b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let weight = store.uniform(&format!("{name}.weight"), &[inputs, outputs], inputs);
        let bias = bias.then(|| store.uniform(&format!("{name}.bias"), &[outputs], inputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn seeded(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, seed: u64) -> Self {
        let weight = store.uniform_seeded(&format!("{name}.weight"), &[inputs, outputs], inputs, seed);
        let bias = Some(store.uniform_seeded(&format!("{name}.bias"), &[outputs], inputs, seed));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + if self.bias.is_some() { self.outputs } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.constant(&format!("{name}.gain"), &[channels], 1.0),
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gain: store.constant(&format!("{name}.gain"), &[channels], 1.0),
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0),
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0),
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0),
            channels,
        }
    }

    /// Normalizes over all leading positions of `x[..×C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let c = *g.shape(x).last().unwrap();
        if c != self.channels {
            return Err(Error::dim("batch_norm", g.shape(x), &[self.channels]));
        }
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        match ctx.mode {
            Mode::Train => {
                let rows = g.value(x).numel() / c;
                let (y, mean, var) = g.batch_norm(x, gain, bias, None, BN_EPS)?;
                let correction = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                ctx.stat_updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var.iter().map(|v| v * correction).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).value.data().to_vec();
                let var = store.get(self.running_var).value.data().to_vec();
                let (y, _, _) = g.batch_norm(x, gain, bias, Some((&mean, &var)), BN_EPS)?;
                Ok(y)
            }
        }
    }
}

/// Square convolution over `[B×H×W×C]` via patch extraction and one product.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn seeded(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        Self {
            linear: Linear::seeded(store, name, kernel * kernel * inputs, outputs, seed),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, kernel: usize, stride: usize) -> Self {
        Self::seeded(store, name, inputs, outputs, kernel, stride, store.seed())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let patches = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            g.im2col(x, self.kernel, self.stride, self.pad)?
        };
        self.linear.forward(g, store, patches)
    }
}
