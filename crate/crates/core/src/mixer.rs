//! Per-task deformable mixer: pointwise channel mixing, offset-based 3×3
//! spatial sampling, token flattening with LayerNorm, and multi-head
//! self-attention. All maps are `[B×H×W×C]`, token sets are `[B×N×C]`.

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, ForwardCtx, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Deformable kernel side.
pub const KERNEL: usize = 3;
pub const KERNEL_POINTS: usize = KERNEL * KERNEL;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Debug)]
pub struct MixerParams {
    pub channels: usize,
    pub heads: usize,
    pub pointwise: Linear,
    pub channel_bn: BatchNorm,
    /// 3×3 conv predicting `(dy, dx)` per kernel point: channel `2k` is the
    /// row offset of kernel point `k`, channel `2k + 1` the column offset.
    pub offset: Conv2d,
    /// `W_d[k, c]`.
    pub deform_weight: ParamId,
    pub deform_bn: BatchNorm,
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MixerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention heads {heads} must divide channel count {channels}"
            )));
        }
        let offset = Conv2d::new(store, &format!("{prefix}.offset"), channels, 2 * KERNEL_POINTS, KERNEL, 1);
        // Offsets start at zero so the block begins as a plain 3×3 conv.
        store.get_mut(offset.linear.weight).value = Tensor::zeros(&[KERNEL_POINTS * channels, 2 * KERNEL_POINTS]);
        store.get_mut(offset.linear.bias.unwrap()).value = Tensor::zeros(&[2 * KERNEL_POINTS]);
        Ok(Self {
            channels,
            heads,
            pointwise: Linear::new(store, &format!("{prefix}.pointwise"), channels, channels, true),
            channel_bn: BatchNorm::new(store, &format!("{prefix}.channel_bn"), channels),
            offset,
            deform_weight: store.uniform(&format!("{prefix}.deform.weight"), &[KERNEL_POINTS, channels], KERNEL_POINTS),
            deform_bn: BatchNorm::new(store, &format!("{prefix}.deform_bn"), channels),
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), channels),
            query: Linear::new(store, &format!("{prefix}.attn.query"), channels, channels, false),
            key: Linear::new(store, &format!("{prefix}.attn.key"), channels, channels, false),
            value: Linear::new(store, &format!("{prefix}.attn.value"), channels, channels, false),
            output: Linear::new(store, &format!("{prefix}.attn.output"), channels, channels, false),
        })
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        self.pointwise.param_count()
            + self.offset.linear.param_count()
            + KERNEL_POINTS * c
            + 3 * 2 * c
            + 4 * c * c
    }

    /// `BN(GELU(X·W_p + b))`.
    pub fn channel_mix(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let c = *g.shape(x).last().unwrap();
        if c != self.channels {
            return Err(Error::dim("channel_mix", g.shape(x), &[self.channels, self.channels]));
        }
        let y = self.pointwise.forward(g, store, x)?;
        let y = g.gelu(y);
        self.channel_bn.forward(g, store, y, ctx)
    }

    /// Spatial sampling step `D_C(X)` alone: offsets, bilinear samples at the
    /// displaced kernel points, depthwise combination with `W_d`.
    pub fn deformable_conv(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [b, h, w, c] = <[usize; 4]>::try_from(shape.as_slice())
            .map_err(|_| Error::Shape(format!("deformable_mix expects [B×H×W×C], got {shape:?}")))?;
        let offsets = self.offset.forward(g, store, x)?;
        let offsets = g.reshape(offsets, &[b, h * w * KERNEL_POINTS, 2])?;
        let grid = g.constant(kernel_grid(b, h, w));
        let points = g.add(grid, offsets)?;
        let samples = g.bilinear_sample(x, points)?;
        let samples = g.reshape(samples, &[b * h * w, KERNEL_POINTS, c])?;
        let wd = g.param(store, self.deform_weight);
        let y = g.depthwise_combine(samples, wd)?;
        g.reshape(y, &[b, h, w, c])
    }

    /// `X + BN(GELU(D_C(X)))`.
    pub fn deformable_mix(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let d = self.deformable_conv(g, store, x)?;
        let d = g.gelu(d);
        let d = self.deform_bn.forward(g, store, d, ctx)?;
        g.add(x, d)
    }

    /// Row-major flatten to `[B×(H·W)×C]`, then LayerNorm over channels.
    pub fn flatten_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = flatten(g, x)?;
        self.norm.forward(g, store, t)
    }

    /// Multi-head scaled dot-product attention over each token set.
    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, n, c) = match shape[..] {
            [n, c] => (1, n, c),
            [b, n, c] => (b, n, c),
            _ => return Err(Error::Shape(format!("self_attention expects [B×N×C], got {shape:?}"))),
        };
        let h = self.heads;
        if c % h != 0 {
            return Err(Error::Config(format!("attention heads {h} must divide channel count {c}")));
        }
        let dk = c / h;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, n, h, dk])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * h, n, dk])
        };
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = g.softmax(scores);
        let heads = g.bmm(attn, v, false)?;
        let heads = g.reshape(heads, &[b, h, n, dk])?;
        let heads = g.permute(heads, &[0, 2, 1, 3])?;
        let merged = g.reshape(heads, &shape)?;
        self.output.forward(g, store, merged)
    }

    /// Full mixer: map `[B×H×W×C]` to attended tokens `[B×N×C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let xc = self.channel_mix(g, store, x, ctx)?;
        let xd = self.deformable_mix(g, store, xc, ctx)?;
        let tokens = self.flatten_norm(g, store, xd)?;
        self.self_attention(g, store, tokens)
    }
}

/// Undisplaced sampling positions: for output `(i, j)` and kernel point
/// `(ki, kj)`, the location `(i + ki − 1, j + kj − 1)`.
fn kernel_grid(b: usize, h: usize, w: usize) -> Tensor {
    let r = (KERNEL / 2) as f64;
    let mut data = Vec::with_capacity(b * h * w * KERNEL_POINTS * 2);
    for _ in 0..b {
        for i in 0..h {
            for j in 0..w {
                for ki in 0..KERNEL {
                    for kj in 0..KERNEL {
                        data.push(i as f64 + ki as f64 - r);
                        data.push(j as f64 + kj as f64 - r);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h * w * KERNEL_POINTS, 2], data).expect("grid size")
}

/// `[B×H×W×C]` to `[B×(H·W)×C]` in row-major order.
pub fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Shape(format!("flatten expects [B×H×W×C], got {s:?}")));
    }
    g.reshape(x, &[s[0], s[1] * s[2], s[3]])
}

/// Inverse of [`flatten`].
pub fn unflatten(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, c) = match s[..] {
        [n, c] => (1, n, c),
        [b, n, c] => (b, n, c),
        _ => return Err(Error::Shape(format!("unflatten expects [B×N×C], got {s:?}"))),
    };
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens do not fill a {h}×{w} map")));
    }
    g.reshape(x, &[b, h, w, c])
}
