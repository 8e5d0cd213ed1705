use std::collections::HashMap;

use super::kernels::{self, MatRef};
use super::{gelu, normal_cdf, sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `x[..×C] + b[C]`
    AddBias(Var, Var),
    /// `x[R×C] * g[R]`, scaling every row by one entry of `g`.
    ScaleRows(Var, Var),
    Sum(Var),
    /// `a[M×K] · b[K×N]`, with `a`'s leading dimensions flattened into M.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    /// Batched product over a leading group dimension; `b` is `[G,N,K]` when `trans_b`.
    Bmm {
        a: Var,
        b: Var,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// Elementwise map with caller-supplied derivative values.
    Map(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
    Upsample(Var, usize),
    Im2col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Bilinear {
        x: Var,
        points: Var,
    },
    DepthwiseCombine {
        samples: Var,
        weight: Var,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherEntries(Var, Vec<usize>),
    TopkGate {
        s: Var,
        mask: Vec<bool>,
        sums: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    L1 {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape(format!(
            "{op}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Indices selected by top-k over `s`, highest first, ties broken by lowest index.
pub(crate) fn topk_indices(s: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls with the same id return
    /// the same node, so fan-out through a parameter accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.requires_grad());
        self.params.insert(id, v);
        v
    }

    /// Parameter leaves created on this graph.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] * factor);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + c);
        let ng = self.ng(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `x + bias`, broadcasting `bias[C]` over every position of `x[..×C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.numel() != c {
            return Err(Error::dim("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] + b[i % c]);
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// Scale row `r` of `x[R×C]` by `g[r]`.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        require_rank("scale_rows", tx, 2)?;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        if tg.numel() != r {
            return Err(Error::dim("scale_rows", tx.shape(), tg.shape()));
        }
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] * tg.data()[i / c]);
        let ng = self.ng(&[x, g]);
        Ok(self.push(out, Op::ScaleRows(x, g), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let ng = self.ng(&[a]);
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        if !ng {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = gelu(v);
            }
            let out = Tensor::new(ta.shape(), out).expect("shape preserved");
            return self.push(out, Op::Gelu(a), ng);
        }
        let mut deriv = vec![0.0; x.len()];
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        for ((o, d), &v) in out.iter_mut().zip(deriv.iter_mut()).zip(x) {
            let cdf = normal_cdf(v);
            *o = v * cdf;
            *d = cdf + v * (-0.5 * v * v).exp() * inv_sqrt_2pi;
        }
        let out = Tensor::new(ta.shape(), out).expect("shape preserved");
        self.push(out, Op::Map(a, deriv), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| sigmoid(ta.data()[i]));
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Elementwise `f` with derivative `df`. Used for one-off nonlinearities
    /// and for exercising the gradient checker.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i]));
        let deriv = ta.data().iter().map(|&x| df(x)).collect();
        let ng = self.ng(&[a]);
        self.push(out, Op::Map(a, deriv), ng)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Softmax(a), ng)
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..×K] · b[K×N]`. Leading dimensions of `a` are kept.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || tb.rank() != 2 || ta.last_dim() != tb.shape()[0] {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let k = ta.last_dim();
        let m = ta.numel() / k;
        let n = tb.shape()[1];
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            MatRef::rows(ta.data(), k),
            MatRef::rows(tb.data(), n),
            0.0,
            &mut out,
        );
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        require_rank("transpose", ta, 2)?;
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::from_fn(&[c, r], |i| ta.data()[(i % r) * c + i / r]);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// Batched product `a[G×M×K] · b[G×K×N]`, or `a · bᵀ` with `b[G×N×K]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim("bmm", ta.shape(), tb.shape()));
        }
        let (groups, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(Error::dim("bmm", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; groups * m * n];
        for gi in 0..groups {
            let a_view = MatRef::rows(&ta.data()[gi * m * k..(gi + 1) * m * k], k);
            let b_slice = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let b_view = if trans_b {
                MatRef::transposed(b_slice, k)
            } else {
                MatRef::rows(b_slice, n)
            };
            kernels::gemm(m, k, n, a_view, b_view, 0.0, &mut out[gi * m * n..(gi + 1) * m * n]);
        }
        let out = Tensor::new(&[groups, m, n], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            out,
            Op::Bmm {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    // ---- normalization -----------------------------------------------------

    /// Normalize each position over the last dimension, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let c = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Batch normalization over every leading position of `x[..×C]`.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// returned so the caller can update running statistics. With
    /// `stats = Some((mean, var))` those are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let c = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != c || tb.numel() != c {
            return Err(Error::dim("batch_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / c;
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batch_norm", tx.shape(), &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let mut mean = vec![0.0; c];
                for row in tx.data().chunks(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in tx.data().chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for (i, &v) in tx.data().iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * inv_std[j];
            xhat[i] = h;
            out[i] = h * tg.data()[j] + tb.data()[j];
        }
        let out = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, mean, var))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let rank = ta.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out = permute_tensor(ta, perm);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Concatenate along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let lead = &first.shape()[..first.rank() - 1];
        let rows = first.numel() / first.last_dim();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if &t.shape()[..t.rank() - 1] != lead {
                return Err(Error::dim("concat", first.shape(), t.shape()));
            }
            total += t.last_dim();
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.last_dim();
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// Nearest-neighbour upsampling of `x[B×H×W×C]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        require_rank("upsample_nearest", tx, 4)?;
        if factor == 0 {
            return Err(Error::Config("upsample factor must be positive".into()));
        }
        let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        let (oh, ow) = (h * factor, w * factor);
        let src = tx.data();
        let mut out = vec![0.0; b * oh * ow * c];
        for bi in 0..b {
            for i in 0..oh {
                for j in 0..ow {
                    let s = ((bi * h + i / factor) * w + j / factor) * c;
                    let d = ((bi * oh + i) * ow + j) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let out = Tensor::new(&[b, oh, ow, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Upsample(x, factor), ng))
    }

    /// Patch extraction for `kernel×kernel` convolution with zero padding.
    /// Output `[B×Ho×Wo×(kernel²·C)]`, patch layout `(ki, kj, c)`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        require_rank("im2col", tx, 4)?;
        let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return Err(Error::Shape(format!("im2col: kernel {kernel} does not fit {h}×{w}")));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let kk = kernel * kernel * c;
        let src = tx.data();
        let mut out = vec![0.0; b * oh * ow * kk];
        for bi in 0..b {
            for oi in 0..oh {
                for oj in 0..ow {
                    let base = ((bi * oh + oi) * ow + oj) * kk;
                    for ki in 0..kernel {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let s = ((bi * h + ii as usize) * w + jj as usize) * c;
                            let d = base + (ki * kernel + kj) * c;
                            out[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, oh, ow, kk], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Im2col { x, kernel, stride, pad }, ng))
    }

    // ---- sampling ----------------------------------------------------------

    /// Bilinear sampling of `x[B×H×W×C]` at fractional `(row, col)` points
    /// `points[B×P×2]`. Neighbours outside the map contribute zero.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        let (tx, tp) = (self.value(x), self.value(points));
        require_rank("bilinear_sample", tx, 4)?;
        require_rank("bilinear_sample", tp, 3)?;
        let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
        if tp.shape()[0] != b || tp.shape()[2] != 2 {
            return Err(Error::dim("bilinear_sample", tx.shape(), tp.shape()));
        }
        let p = tp.shape()[1];
        let src = tx.data();
        let pts = tp.data();
        let mut out = vec![0.0; b * p * c];
        kernels::for_each_chunk(&mut out, c, |idx, dst| {
            let bi = idx / p;
            let (r, col) = (pts[idx * 2], pts[idx * 2 + 1]);
            for (ii, jj, wgt) in bilinear_corners(r, col) {
                if let Some(s) = pixel_offset(bi, ii, jj, h, w, c) {
                    for (d, v) in dst.iter_mut().zip(&src[s..s + c]) {
                        *d += wgt * v;
                    }
                }
            }
        });
        let out = Tensor::new(&[b, p, c], out)?;
        let ng = self.ng(&[x, points]);
        Ok(self.push(out, Op::Bilinear { x, points }, ng))
    }

    /// `out[m, c] = Σ_k weight[k, c] · samples[m, k, c]`.
    pub fn depthwise_combine(&mut self, samples: Var, weight: Var) -> Result<Var> {
        let (ts, tw) = (self.value(samples), self.value(weight));
        require_rank("depthwise_combine", ts, 3)?;
        let [m, k, c] = [ts.shape()[0], ts.shape()[1], ts.shape()[2]];
        if tw.shape() != [k, c] {
            return Err(Error::dim("depthwise_combine", ts.shape(), tw.shape()));
        }
        let (s, wd) = (ts.data(), tw.data());
        let mut out = vec![0.0; m * c];
        for mi in 0..m {
            let dst = &mut out[mi * c..(mi + 1) * c];
            for ki in 0..k {
                let row = &s[(mi * k + ki) * c..(mi * k + ki + 1) * c];
                let wr = &wd[ki * c..(ki + 1) * c];
                for j in 0..c {
                    dst[j] += wr[j] * row[j];
                }
            }
        }
        let out = Tensor::new(&[m, c], out)?;
        let ng = self.ng(&[samples, weight]);
        Ok(self.push(out, Op::DepthwiseCombine { samples, weight }, ng))
    }

    // ---- routing -----------------------------------------------------------

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        require_rank("gather_rows", tx, 2)?;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: bad row set for {r} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&tx.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[rows.len(), c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), ng))
    }

    /// Place row `i` of `src` at row `rows[i]` of a zero `[total×C]` tensor.
    /// `rows` must be distinct.
    pub fn scatter_rows(&mut self, src: Var, rows: &[usize], total: usize) -> Result<Var> {
        let ts = self.value(src);
        require_rank("scatter_rows", ts, 2)?;
        let c = ts.shape()[1];
        if ts.shape()[0] != rows.len() || rows.iter().any(|&i| i >= total) {
            return Err(Error::Shape("scatter_rows: row set does not match source".into()));
        }
        let mut out = vec![0.0; total * c];
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&ts.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[total, c], out)?;
        let ng = self.ng(&[src]);
        Ok(self.push(out, Op::ScatterRows(src, rows.to_vec()), ng))
    }

    /// Gather individual entries by flat index into a 1-D tensor.
    pub fn gather_entries(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if flat.is_empty() || flat.iter().any(|&i| i >= tx.numel()) {
            return Err(Error::Shape("gather_entries: index out of range".into()));
        }
        let out = Tensor::new(&[flat.len()], flat.iter().map(|&i| tx.data()[i]).collect())?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherEntries(x, flat.to_vec()), ng))
    }

    /// Sparse gate normalization over rows of positive affinities `s[R×N]`:
    /// keep the `k` largest per row (ties to the lowest index), zero the
    /// rest, divide by the kept sum. The selection itself carries no gradient.
    pub fn topk_gate(&mut self, s: Var, k: usize) -> Result<Var> {
        let ts = self.value(s);
        require_rank("topk_gate", ts, 2)?;
        let n = ts.shape()[1];
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k {k} outside [1, {n}]")));
        }
        let rows = ts.shape()[0];
        let mut mask = vec![false; rows * n];
        let mut sums = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &ts.data()[r * n..(r + 1) * n];
            let sel = topk_indices(row, k);
            let total: f64 = sel.iter().map(|&i| row[i]).sum();
            sums[r] = total;
            for &i in &sel {
                mask[r * n + i] = true;
                out[r * n + i] = row[i] / total;
            }
        }
        let out = Tensor::new(ts.shape(), out)?;
        let ng = self.ng(&[s]);
        Ok(self.push(out, Op::TopkGate { s, mask, sums }, ng))
    }

    /// Divide each position of `x[..×C]` by its L2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let norms: Vec<f64> = tx
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_FLOOR))
            .collect();
        let out = Tensor::from_fn(tx.shape(), |i| tx.data()[i] / norms[i / c]);
        let ng = self.ng(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, ng)
    }

    // ---- losses ------------------------------------------------------------

    /// Mean cross-entropy over rows of `logits[P×K]`; `None` targets are
    /// skipped. Returns the loss and the number of counted rows. With no
    /// counted rows the loss is exactly zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<(Var, usize)> {
        let tl = self.value(logits);
        require_rank("cross_entropy", tl, 2)?;
        let (p, k) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != p {
            return Err(Error::dim("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; p * k];
        let mut loss = 0.0;
        let mut count = 0;
        for r in 0..p {
            let row = &tl.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / z;
            }
            if let Some(t) = targets[r] {
                if t >= k {
                    return Err(Error::Shape(format!("class {t} out of range for {k} classes")));
                }
                loss += z.ln() + max - row[t];
                count += 1;
            }
        }
        let value = if count > 0 { loss / count as f64 } else { 0.0 };
        let ng = self.ng(&[logits]);
        let v = self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        );
        Ok((v, count))
    }

    /// Mean binary cross-entropy with logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() {
            return Err(Error::dim("bce_with_logits", tl.shape(), &[targets.len()]));
        }
        let n = targets.len() as f64;
        let loss: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.numel() != target.len() {
            return Err(Error::dim("l1_loss", tp.shape(), &[target.len()]));
        }
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / target.len() as f64;
        let ng = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every node is visited once;
    /// gradients are summed where a value fans out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &dy, &mut grads);
            // Interior nodes keep their gradient so callers can inspect it.
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || d.to_vec());
                self.acc(grads, *b, || d.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || d.to_vec());
                self.acc(grads, *b, || d.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || d.iter().zip(vb).map(|(g, x)| g * x).collect());
                self.acc(grads, *b, || d.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, f) => self.acc(grads, *a, || d.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) => self.acc(grads, *a, || d.to_vec()),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, || d.to_vec());
                let c = self.value(*b).numel();
                self.acc(grads, *b, || {
                    let mut gb = vec![0.0; c];
                    for row in d.chunks(c) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    gb
                });
            }
            Op::ScaleRows(x, g) => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                let gv = self.value(*g).data();
                self.acc(grads, *x, || d.iter().enumerate().map(|(i, v)| v * gv[i / c]).collect());
                self.acc(grads, *g, || {
                    d.chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(dr, xr)| dr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect()
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, || vec![d[0]; n]);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, MatRef::rows(d, n), MatRef::transposed(tb.data(), n), 0.0, &mut ga);
                    ga
                });
                self.acc(grads, *b, || {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, MatRef::transposed(ta.data(), k), MatRef::rows(d, n), 0.0, &mut gb);
                    gb
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                // y is r×c; input is c×r.
                self.acc(grads, *a, || (0..r * c).map(|i| d[(i % r) * c + i / r]).collect());
            }
            Op::Bmm {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (g, m, k, n, tb_flag) = (*groups, *m, *k, *n, *trans_b);
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    let mut ga = vec![0.0; g * m * k];
                    for gi in 0..g {
                        let dg = MatRef::rows(&d[gi * m * n..(gi + 1) * m * n], n);
                        let bs = &tb.data()[gi * k * n..(gi + 1) * k * n];
                        // da = dy · bᵀ (b as k×n) or dy · b (b stored n×k).
                        let bv = if tb_flag { MatRef::rows(bs, k) } else { MatRef::transposed(bs, n) };
                        kernels::gemm(m, n, k, dg, bv, 0.0, &mut ga[gi * m * k..(gi + 1) * m * k]);
                    }
                    ga
                });
                self.acc(grads, *b, || {
                    let mut gb = vec![0.0; g * k * n];
                    for gi in 0..g {
                        let dsl = &d[gi * m * n..(gi + 1) * m * n];
                        let asl = &ta.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if tb_flag {
                            // db[n×k] = dyᵀ · a
                            kernels::gemm(n, m, k, MatRef::transposed(dsl, n), MatRef::rows(asl, k), 0.0, out);
                        } else {
                            // db[k×n] = aᵀ · dy
                            kernels::gemm(k, m, n, MatRef::transposed(asl, k), MatRef::rows(dsl, n), 0.0, out);
                        }
                    }
                    gb
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.acc(grads, *a, || {
                    x.iter()
                        .zip(d)
                        .map(|(&v, g)| {
                            let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                            g * (normal_cdf(v) + v * pdf)
                        })
                        .collect()
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, || y.data().iter().zip(d).map(|(s, g)| g * s * (1.0 - s)).collect());
            }
            Op::Map(a, deriv) => {
                self.acc(grads, *a, || deriv.iter().zip(d).map(|(k, g)| k * g).collect());
            }
            Op::Softmax(a) => {
                let n = y.last_dim();
                self.acc(grads, *a, || {
                    let mut gx = vec![0.0; y.numel()];
                    for ((yr, dr), gr) in y.data().chunks(n).zip(d.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] = yr[j] * (dr[j] - dot);
                        }
                    }
                    gx
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = y.last_dim();
                let gv = self.value(*gain).data();
                self.acc(grads, *bias, || column_sums(d, c));
                self.acc(grads, *gain, || {
                    let mut gg = vec![0.0; c];
                    for (i, (g, h)) in d.iter().zip(xhat).enumerate() {
                        gg[i % c] += g * h;
                    }
                    gg
                });
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; y.numel()];
                    let cf = c as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let dr = &d[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = dr[j] * gv[j];
                            gx[r * c + j] = is / cf * (cf * dh - s1 - hr[j] * s2);
                        }
                    }
                    gx
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = y.last_dim();
                let rows = y.numel() / c;
                let gv = self.value(*gain).data();
                let sum_d = column_sums(d, c);
                let mut sum_dh = vec![0.0; c];
                for (i, (g, h)) in d.iter().zip(xhat).enumerate() {
                    sum_dh[i % c] += g * h;
                }
                self.acc(grads, *bias, || sum_d.clone());
                self.acc(grads, *gain, || sum_dh.clone());
                self.acc(grads, *x, || {
                    let mf = rows as f64;
                    d.iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let j = i % c;
                            let scale = gv[j] * inv_std[j];
                            if *batch_stats {
                                scale / mf * (mf * g - sum_d[j] - xhat[i] * sum_dh[j])
                            } else {
                                scale * g
                            }
                        })
                        .collect()
                });
            }
            Op::Reshape(a) => self.acc(grads, *a, || d.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *a, || permute_tensor(dy, &inv).into_data());
            }
            Op::Concat(parts) => {
                let total = y.last_dim();
                let rows = y.numel() / total;
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.acc(grads, p, || {
                        let mut g = vec![0.0; rows * c];
                        for r in 0..rows {
                            g[r * c..(r + 1) * c].copy_from_slice(&d[r * total + off..r * total + off + c]);
                        }
                        g
                    });
                    off += c;
                }
            }
            Op::Upsample(x, f) => {
                let tx = self.value(*x);
                let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let (oh, ow) = (h * f, w * f);
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; tx.numel()];
                    for bi in 0..b {
                        for i in 0..oh {
                            for j in 0..ow {
                                let s = ((bi * h + i / f) * w + j / f) * c;
                                let o = ((bi * oh + i) * ow + j) * c;
                                for ch in 0..c {
                                    g[s + ch] += d[o + ch];
                                }
                            }
                        }
                    }
                    g
                });
            }
            Op::Im2col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let tx = self.value(*x);
                let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let (oh, ow) = (y.shape()[1], y.shape()[2]);
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let kk = kernel * kernel * c;
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; tx.numel()];
                    for bi in 0..b {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let base = ((bi * oh + oi) * ow + oj) * kk;
                                for ki in 0..kernel {
                                    let ii = (oi * stride + ki) as isize - pad as isize;
                                    if ii < 0 || ii >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kernel {
                                        let jj = (oj * stride + kj) as isize - pad as isize;
                                        if jj < 0 || jj >= w as isize {
                                            continue;
                                        }
                                        let s = ((bi * h + ii as usize) * w + jj as usize) * c;
                                        let o = base + (ki * kernel + kj) * c;
                                        for ch in 0..c {
                                            g[s + ch] += d[o + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g
                });
            }
            Op::Bilinear { x, points } => {
                let (tx, tp) = (self.value(*x), self.value(*points));
                let [b, h, w, c] = [tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]];
                let p = tp.shape()[1];
                let (src, pts) = (tx.data(), tp.data());
                let _ = b;
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; tx.numel()];
                    for idx in 0..d.len() / c {
                        let bi = idx / p;
                        let dr = &d[idx * c..(idx + 1) * c];
                        for (ii, jj, wgt) in bilinear_corners(pts[idx * 2], pts[idx * 2 + 1]) {
                            if let Some(s) = pixel_offset(bi, ii, jj, h, w, c) {
                                for ch in 0..c {
                                    g[s + ch] += wgt * dr[ch];
                                }
                            }
                        }
                    }
                    g
                });
                self.acc(grads, *points, || {
                    let mut g = vec![0.0; tp.numel()];
                    for idx in 0..d.len() / c {
                        let bi = idx / p;
                        let dr = &d[idx * c..(idx + 1) * c];
                        let (r, col) = (pts[idx * 2], pts[idx * 2 + 1]);
                        let (r0, c0) = (r.floor(), col.floor());
                        let (fr, fc) = (r - r0, col - c0);
                        let (i0, j0) = (r0 as i64, c0 as i64);
                        // Projection of the upstream gradient onto each corner pixel.
                        let px = |ii: i64, jj: i64| -> f64 {
                            match pixel_offset(bi, ii, jj, h, w, c) {
                                Some(s) => src[s..s + c].iter().zip(dr).map(|(a, b)| a * b).sum(),
                                None => 0.0,
                            }
                        };
                        let (v00, v01, v10, v11) = (px(i0, j0), px(i0, j0 + 1), px(i0 + 1, j0), px(i0 + 1, j0 + 1));
                        g[idx * 2] = (1.0 - fc) * (v10 - v00) + fc * (v11 - v01);
                        g[idx * 2 + 1] = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10);
                    }
                    g
                });
            }
            Op::DepthwiseCombine { samples, weight } => {
                let (ts, tw) = (self.value(*samples), self.value(*weight));
                let [m, k, c] = [ts.shape()[0], ts.shape()[1], ts.shape()[2]];
                self.acc(grads, *samples, || {
                    let mut g = vec![0.0; ts.numel()];
                    for mi in 0..m {
                        for ki in 0..k {
                            for j in 0..c {
                                g[(mi * k + ki) * c + j] = d[mi * c + j] * tw.data()[ki * c + j];
                            }
                        }
                    }
                    g
                });
                self.acc(grads, *weight, || {
                    let mut g = vec![0.0; k * c];
                    for mi in 0..m {
                        for ki in 0..k {
                            for j in 0..c {
                                g[ki * c + j] += d[mi * c + j] * ts.data()[(mi * k + ki) * c + j];
                            }
                        }
                    }
                    g
                });
            }
            Op::GatherRows(x, rows) => {
                let tx = self.value(*x);
                let c = tx.shape()[1];
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; tx.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            g[r * c + j] += d[i * c + j];
                        }
                    }
                    g
                });
            }
            Op::ScatterRows(src, rows) => {
                let c = y.shape()[1];
                self.acc(grads, *src, || {
                    let mut g = Vec::with_capacity(rows.len() * c);
                    for &r in rows {
                        g.extend_from_slice(&d[r * c..(r + 1) * c]);
                    }
                    g
                });
            }
            Op::GatherEntries(x, flat) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; n];
                    for (i, &f) in flat.iter().enumerate() {
                        g[f] += d[i];
                    }
                    g
                });
            }
            Op::TopkGate { s, mask, sums } => {
                let n = y.shape()[1];
                self.acc(grads, *s, || {
                    let mut g = vec![0.0; y.numel()];
                    for (r, total) in sums.iter().enumerate() {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let dr = &d[r * n..(r + 1) * n];
                        let mr = &mask[r * n..(r + 1) * n];
                        let dot: f64 = (0..n).filter(|&i| mr[i]).map(|i| dr[i] * yr[i]).sum();
                        for j in 0..n {
                            if mr[j] {
                                g[r * n + j] = (dr[j] - dot) / total;
                            }
                        }
                    }
                    g
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = y.last_dim();
                let tx = self.value(*x);
                self.acc(grads, *x, || {
                    let mut g = vec![0.0; y.numel()];
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let dr = &d[r * c..(r + 1) * c];
                        let raw: f64 = tx.data()[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if raw > L2_FLOOR {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                g[r * c + j] = (dr[j] - yr[j] * dot) / nrm;
                            }
                        } else {
                            for j in 0..c {
                                g[r * c + j] = dr[j] / nrm;
                            }
                        }
                    }
                    g
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = if *count > 0 { d[0] / *count as f64 } else { 0.0 };
                self.acc(grads, *logits, || {
                    let mut g = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..k {
                                g[r * k + j] = scale * probs[r * k + j];
                            }
                            g[r * k + t] -= scale;
                        }
                    }
                    g
                });
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits).data();
                let scale = d[0] / targets.len() as f64;
                self.acc(grads, *logits, || {
                    x.iter().zip(targets).map(|(&v, &t)| scale * (sigmoid(v) - t)).collect()
                });
            }
            Op::L1 { pred, target } => {
                let p = self.value(*pred).data();
                let scale = d[0] / target.len() as f64;
                self.acc(grads, *pred, || {
                    p.iter()
                        .zip(target)
                        .map(|(a, b)| {
                            let diff: f64 = a - b;
                            if diff > 0.0 {
                                scale
                            } else if diff < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
            }
        }
    }

    /// Accumulate a gradient contribution into `target` if it needs one.
    fn acc(&self, grads: &mut [Option<Tensor>], target: Var, contrib: impl FnOnce() -> Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        let c = contrib();
        debug_assert_eq!(c.len(), node.value.numel());
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&c) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape(), c).expect("gradient shape matches value"));
            }
        }
    }
}

const L2_FLOOR: f64 = 1e-12;

fn column_sums(d: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for row in d.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn bilinear_corners(r: f64, c: f64) -> [(i64, i64, f64); 4] {
    let (r0, c0) = (r.floor(), c.floor());
    let (fr, fc) = (r - r0, c - c0);
    let (i, j) = (r0 as i64, c0 as i64);
    [
        (i, j, (1.0 - fr) * (1.0 - fc)),
        (i, j + 1, (1.0 - fr) * fc),
        (i + 1, j, fr * (1.0 - fc)),
        (i + 1, j + 1, fr * fc),
    ]
}

fn pixel_offset(b: usize, i: i64, j: i64, h: usize, w: usize, c: usize) -> Option<usize> {
    if i < 0 || j < 0 || i >= h as i64 || j >= w as i64 {
        return None;
    }
    Some(((b * h + i as usize) * w + j as usize) * c)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(t.data()[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape preserves size")
}
