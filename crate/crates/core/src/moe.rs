//! Mixture-of-experts layers with always-active shared experts and
//! sigmoid-scored top-k routed experts.
//!
//! Routing is per token. For a pre-normalized token `x`, routed expert `i`
//! scores `s_i = sigmoid(xᵀe_i)`; the `K` best are kept and renormalized to
//! `G_i = s_i / Σ_sel s_j`, and the layer output is
//! `Σ_shared E(x) + Σ_i G_i·E_i(x)`. Only tokens routed to an expert are
//! passed through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ForwardCtx, GateRecord, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::topk_indices;
use crate::tensor::{sigmoid, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    /// N_s.
    pub shared: usize,
    /// N_it.
    pub routed: usize,
    /// K_it.
    pub top_k: usize,
    /// D_h.
    pub hidden: usize,
    /// Task-specific MoE layers stacked per task.
    pub layers_per_task: usize,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            shared: 2,
            routed: 6,
            top_k: 3,
            hidden: 256,
            layers_per_task: 1,
        }
    }
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.routed == 0 || self.top_k == 0 || self.top_k > self.routed {
            return Err(Error::Config(format!(
                "top-k {} must lie in [1, routed experts = {}]",
                self.top_k, self.routed
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("expert hidden width must be >= 1".into()));
        }
        if self.layers_per_task == 0 {
            return Err(Error::Config("layers_per_task must be >= 1".into()));
        }
        Ok(())
    }

    /// Scalar count of one MoE layer at width `c`.
    pub fn layer_params(&self, c: usize) -> usize {
        (self.shared + self.routed) * expert_params(c, self.hidden) + self.routed * c + 2 * c
    }
}

/// `C·D_h + D_h + D_h·C + C`.
pub fn expert_params(c: usize, hidden: usize) -> usize {
    2 * c * hidden + hidden + c
}

/// Two-layer MLP `W2·gelu(W1·x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Expert {
    pub up: Linear,
    pub down: Linear,
}

impl Expert {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), c, hidden, true),
            down: Linear::new(store, &format!("{name}.down"), hidden, c, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = *g.shape(x).last().unwrap();
        if c != self.up.inputs {
            return Err(Error::dim("expert_forward", g.shape(x), &[self.up.inputs, self.up.outputs]));
        }
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.param_count()
    }
}

/// Expert centroids `e_i`, stored as `[N_it×C]`.
#[derive(Clone, Debug)]
pub struct Router {
    pub centroids: ParamId,
    pub experts: usize,
    pub channels: usize,
}

impl Router {
    pub fn new(store: &mut ParamStore, name: &str, experts: usize, c: usize) -> Self {
        Self {
            centroids: store.uniform(&format!("{name}.centroids"), &[experts, c], c),
            experts,
            channels: c,
        }
    }

    /// `s = sigmoid(x·Eᵀ)` for tokens `x[R×C]`.
    pub fn affinity(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let e = g.param(store, self.centroids);
        let et = g.transpose(e)?;
        let z = g.matmul(x, et)?;
        Ok(g.sigmoid(z))
    }
}

/// Affinity, raw gates and normalized gates of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub s: Vec<f64>,
    /// `g_i = s_i` on the selection, zero elsewhere.
    pub g: Vec<f64>,
    /// `G_i = g_i / Σ_j g_j`.
    pub gates: Vec<f64>,
    /// Selected indices in descending affinity order.
    pub selected: Vec<usize>,
}

/// `s_i = sigmoid(xᵀe_i)` with `centroids[N_it×C]`.
pub fn router_affinity(x: &[f64], centroids: &Tensor) -> Result<Vec<f64>> {
    let c = centroids.last_dim();
    if x.len() != c || centroids.rank() != 2 {
        return Err(Error::dim("router_affinity", &[x.len()], centroids.shape()));
    }
    Ok(centroids
        .data()
        .chunks(c)
        .map(|e| sigmoid(e.iter().zip(x).map(|(a, b)| a * b).sum()))
        .collect())
}

/// Keep the `k` highest affinities (ties to the lowest index) and normalize.
pub fn topk_gate(s: &[f64], k: usize) -> Result<GateVector> {
    if k == 0 || k > s.len() {
        return Err(Error::Config(format!("top-k {k} outside [1, {}]", s.len())));
    }
    let selected = topk_indices(s, k);
    let mut g = vec![0.0; s.len()];
    for &i in &selected {
        g[i] = s[i];
    }
    let total: f64 = g.iter().sum();
    let gates = g.iter().map(|v| v / total).collect();
    Ok(GateVector {
        s: s.to_vec(),
        g,
        gates,
        selected,
    })
}

#[derive(Clone, Debug)]
pub struct MoELayer {
    pub name: String,
    pub channels: usize,
    pub top_k: usize,
    pub norm: LayerNorm,
    pub shared: Vec<Expert>,
    pub routed: Vec<Expert>,
    pub router: Router,
}

impl MoELayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, cfg: &MoEConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            name: name.to_string(),
            channels: c,
            top_k: cfg.top_k,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            shared: (0..cfg.shared)
                .map(|i| Expert::new(store, &format!("{name}.shared{i}"), c, cfg.hidden))
                .collect(),
            routed: (0..cfg.routed)
                .map(|i| Expert::new(store, &format!("{name}.routed{i}"), c, cfg.hidden))
                .collect(),
            router: Router::new(store, &format!("{name}.router"), cfg.routed, c),
        })
    }

    pub fn param_count(&self) -> usize {
        self.shared.iter().chain(&self.routed).map(Expert::param_count).sum::<usize>()
            + self.router.experts * self.channels
            + 2 * self.channels
    }

    /// Normalized gates `[R×N_it]` for pre-normalized tokens.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, xn: Var) -> Result<Var> {
        let s = self.router.affinity(g, store, xn)?;
        g.topk_gate(s, self.top_k)
    }

    /// Shared-expert sum `y_s` on pre-normalized tokens.
    pub fn shared_output(&self, g: &mut Graph, store: &ParamStore, xn: Var) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for e in &self.shared {
            let y = e.forward(g, store, xn)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc)
    }

    /// MoE output for tokens `x[..×C]`: pre-LN, shared experts, routed experts.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if c != self.channels {
            return Err(Error::dim("task_moe_forward", &shape, &[self.channels]));
        }
        let rows = g.value(x).numel() / c;
        let x2 = g.reshape(x, &[rows, c])?;
        let xn = self.norm.forward(g, store, x2)?;
        let s = self.router.affinity(g, store, xn)?;
        let gates = g.topk_gate(s, self.top_k)?;
        let n = self.routed.len();
        if ctx.record_gates {
            ctx.gates.push(GateRecord {
                layer: self.name.clone(),
                gates: g.value(gates).clone(),
                margin: routing_margin(g.value(s), self.top_k),
            });
        }
        let mut acc = self.shared_output(g, store, xn)?;
        let gv = g.value(gates).data().to_vec();
        for (i, expert) in self.routed.iter().enumerate() {
            let tokens: Vec<usize> = (0..rows).filter(|&r| gv[r * n + i] != 0.0).collect();
            if tokens.is_empty() {
                continue;
            }
            let flat: Vec<usize> = tokens.iter().map(|&r| r * n + i).collect();
            let xi = g.gather_rows(xn, &tokens)?;
            let yi = expert.forward(g, store, xi)?;
            let gi = g.gather_entries(gates, &flat)?;
            let yi = g.scale_rows(yi, gi)?;
            let yi = g.scatter_rows(yi, &tokens, rows)?;
            acc = Some(match acc {
                Some(a) => g.add(a, yi)?,
                None => yi,
            });
        }
        let y = match acc {
            Some(y) => y,
            None => g.constant(Tensor::zeros(&[rows, c])),
        };
        g.reshape(y, &shape)
    }

    /// Per-token gate vectors, with the layer's pre-norm applied.
    pub fn gate_vectors(&self, store: &ParamStore, tokens: &Tensor) -> Result<Vec<GateVector>> {
        let c = tokens.last_dim();
        if c != self.channels {
            return Err(Error::dim("routing_stats", tokens.shape(), &[self.channels]));
        }
        let mut g = Graph::new();
        let x = g.constant(tokens.clone().reshape(&[tokens.numel() / c, c])?);
        let xn = self.norm.forward(&mut g, store, x)?;
        let centroids = &store.get(self.router.centroids).value;
        g.value(xn)
            .data()
            .chunks(c)
            .map(|t| topk_gate(&router_affinity(t, centroids)?, self.top_k))
            .collect()
    }
}

/// Smallest gap between the K-th and (K+1)-th largest affinity over all
/// rows of `s`; infinite when every expert is selected.
pub fn routing_margin(s: &Tensor, k: usize) -> f64 {
    let n = s.last_dim();
    if k >= n || n == 0 {
        return f64::INFINITY;
    }
    s.data()
        .chunks(n)
        .map(|row| {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[k - 1] - sorted[k]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Task-specific MoE output (alias of [`MoELayer::forward`]).
pub fn task_moe_forward(g: &mut Graph, store: &ParamStore, layer: &MoELayer, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    layer.forward(g, store, x, ctx)
}

/// `y_g = MoE(X) + X`.
pub fn global_moe_forward(g: &mut Graph, store: &ParamStore, layer: &MoELayer, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    let y = layer.forward(g, store, x, ctx)?;
    g.add(y, x)
}

/// Elementwise `y_g + y_t`.
pub fn combine(g: &mut Graph, y_global: Var, y_task: Var) -> Result<Var> {
    if g.shape(y_global) != g.shape(y_task) {
        return Err(Error::dim("combine", g.shape(y_global), g.shape(y_task)));
    }
    g.add(y_global, y_task)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub tokens: usize,
    /// Fraction of tokens that selected each routed expert.
    pub frequency: Vec<f64>,
    /// Mean normalized gate per expert, zeros included.
    pub mean_gate: Vec<f64>,
    /// Variance of selection counts over their mean; 0 is perfectly even.
    pub load_balance: f64,
}

impl RoutingStats {
    /// Statistics from a `[tokens × N_it]` normalized-gate matrix.
    pub fn from_gates(gates: &Tensor) -> Self {
        let n = gates.last_dim();
        let rows = gates.numel() / n;
        let mut counts = vec![0usize; n];
        let mut mass = vec![0.0; n];
        for row in gates.data().chunks(n) {
            for (i, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    counts[i] += 1;
                }
                mass[i] += v;
            }
        }
        Self::from_counts(rows, &counts, &mass)
    }

    pub fn from_vectors(gv: &[GateVector]) -> Self {
        let Some(first) = gv.first() else {
            return Self::default();
        };
        let n = first.s.len();
        let mut counts = vec![0usize; n];
        let mut mass = vec![0.0; n];
        for v in gv {
            for &i in &v.selected {
                counts[i] += 1;
            }
            for (m, x) in mass.iter_mut().zip(&v.gates) {
                *m += x;
            }
        }
        Self::from_counts(gv.len(), &counts, &mass)
    }

    fn from_counts(rows: usize, counts: &[usize], mass: &[f64]) -> Self {
        if rows == 0 {
            return Self::default();
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        Self {
            tokens: rows,
            frequency: counts.iter().map(|&c| c as f64 / rows as f64).collect(),
            mean_gate: mass.iter().map(|m| m / rows as f64).collect(),
            load_balance: if mean > 0.0 { var / mean } else { 0.0 },
        }
    }
}

/// Routing utilization of `layer` over `tokens[R×C]`.
pub fn routing_stats(store: &ParamStore, layer: &MoELayer, tokens: &Tensor) -> Result<RoutingStats> {
    Ok(RoutingStats::from_vectors(&layer.gate_vectors(store, tokens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn layer(c: usize, shared: usize, routed: usize, k: usize, hidden: usize) -> (ParamStore, MoELayer) {
        let mut store = ParamStore::new(17);
        let cfg = MoEConfig {
            shared,
            routed,
            top_k: k,
            hidden,
            layers_per_task: 1,
        };
        let l = MoELayer::new(&mut store, "moe", c, &cfg).unwrap();
        (store, l)
    }

    fn zero_expert(store: &mut ParamStore, e: &Expert) {
        for id in [e.up.weight, e.up.bias.unwrap(), e.down.weight, e.down.bias.unwrap()] {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
    }

    fn expert_oracle(store: &ParamStore, e: &Expert, x: &[f64]) -> Vec<f64> {
        let w1 = store.get(e.up.weight).value.data();
        let b1 = store.get(e.up.bias.unwrap()).value.data();
        let w2 = store.get(e.down.weight).value.data();
        let b2 = store.get(e.down.bias.unwrap()).value.data();
        let (c, d) = (e.up.inputs, e.up.outputs);
        let h: Vec<f64> = (0..d).map(|j| gelu(b1[j] + (0..c).map(|i| x[i] * w1[i * d + j]).sum::<f64>())).collect();
        (0..c).map(|o| b2[o] + (0..d).map(|j| h[j] * w2[j * c + o]).sum::<f64>()).collect()
    }

    #[test]
    fn expert_param_count_matches_shape_sum() {
        assert_eq!(expert_params(64, 256), 64 * 256 + 256 + 256 * 64 + 64);
        assert_eq!(expert_params(64, 256), 33_088);
        let mut store = ParamStore::new(0);
        let e = Expert::new(&mut store, "e", 64, 256);
        assert_eq!(e.param_count(), 33_088);
        assert_eq!(store.weight_count(), 33_088);
    }

    #[test]
    fn layer_param_count_matches_store() {
        let mut store = ParamStore::new(0);
        let cfg = MoEConfig::default();
        let l = MoELayer::new(&mut store, "m", 16, &cfg).unwrap();
        assert_eq!(l.param_count(), store.weight_count());
        assert_eq!(cfg.layer_params(16), l.param_count());
    }

    #[test]
    fn topk_out_of_range_is_config_error() {
        let cfg = MoEConfig {
            top_k: 7,
            ..MoEConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(matches!(topk_gate(&[0.5, 0.5], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_expert_gives_zero_output() {
        let mut store = ParamStore::new(0);
        let e = Expert::new(&mut store, "e", 4, 6);
        zero_expert(&mut store, &e);
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4], 1));
        let y = e.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_padded_expert_is_gelu_passthrough() {
        let (c, d) = (3, 5);
        let mut store = ParamStore::new(0);
        let e = Expert::new(&mut store, "e", c, d);
        zero_expert(&mut store, &e);
        let eye = |r: usize, cols: usize| Tensor::from_fn(&[r, cols], |i| if i / cols == i % cols { 1.0 } else { 0.0 });
        store.get_mut(e.up.weight).value = eye(c, d);
        store.get_mut(e.down.weight).value = eye(d, c);
        let x = random(&[2, c], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = e.forward(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x.data()) {
            assert_eq!(*a, gelu(*b));
        }
    }

    #[test]
    fn expert_matches_two_matmul_oracle() {
        let mut store = ParamStore::new(4);
        let e = Expert::new(&mut store, "e", 6, 10);
        let x = random(&[1, 6], 3);
        let want = expert_oracle(&store, &e, x.data());
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = e.forward(&mut g, &store, xv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_hand_case() {
        let e = Tensor::new(&[3, 2], vec![2.0, 0.0, -2.0, 0.0, 0.0, 5.0]).unwrap();
        let s = router_affinity(&[1.0, 0.0], &e).unwrap();
        for (a, b) in s.iter().zip([0.8808, 0.1192, 0.5]) {
            assert!((a - b).abs() < 1e-4);
        }
        let orth = router_affinity(&[0.0, 0.0], &e).unwrap();
        assert!(orth.iter().all(|&v| v == 0.5));
        let big = router_affinity(&[100.0, 0.0], &e).unwrap();
        assert!(big[0] > 1.0 - 1e-12);
    }

    #[test]
    fn topk_gate_hand_case() {
        let gv = topk_gate(&[0.9, 0.1, 0.5, 0.7, 0.3, 0.2], 3).unwrap();
        let mut sel = gv.selected.clone();
        sel.sort();
        assert_eq!(sel, vec![0, 2, 3]);
        let want = [0.9 / 2.1, 0.0, 0.5 / 2.1, 0.7 / 2.1, 0.0, 0.0];
        for (a, b) in gv.gates.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((gv.gates[0] - 0.42857).abs() < 1e-5);
        assert!((gv.gates[2] - 0.23810).abs() < 1e-5);
        assert!((gv.gates[3] - 0.33333).abs() < 1e-5);
    }

    #[test]
    fn topk_ties_go_to_lowest_index() {
        let gv = topk_gate(&[0.4; 6], 3).unwrap();
        assert_eq!(gv.selected, vec![0, 1, 2]);
        for i in 0..3 {
            assert!((gv.gates[i] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_k_matches_weighted_mixture() {
        let (c, n) = (4, 3);
        let (store, l) = layer(c, 1, n, n, 6);
        let x = random(&[3, c], 8);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = l.forward(&mut g, &store, xv, &mut ForwardCtx::train()).unwrap();
        // Oracle: LN by hand, then shared + Σ s_i/Σs · E_i.
        let centroids = &store.get(l.router.centroids).value;
        for t in 0..3 {
            let row = &x.data()[t * c..(t + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let xn: Vec<f64> = row.iter().map(|v| (v - mean) / (var + crate::layers::LN_EPS).sqrt()).collect();
            let s = router_affinity(&xn, centroids).unwrap();
            let z: f64 = s.iter().sum();
            let mut want = expert_oracle(&store, &l.shared[0], &xn);
            for (i, e) in l.routed.iter().enumerate() {
                for (w, v) in want.iter_mut().zip(expert_oracle(&store, e, &xn)) {
                    *w += s[i] / z * v;
                }
            }
            for o in 0..c {
                assert!((g.value(y).data()[t * c + o] - want[o]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_routed_experts_leave_shared_sum() {
        let (mut store, l) = layer(4, 2, 3, 2, 5);
        for e in l.routed.clone() {
            zero_expert(&mut store, &e);
        }
        let mut g = Graph::new();
        let x = g.constant(random(&[5, 4], 9));
        let y = l.forward(&mut g, &store, x, &mut ForwardCtx::train()).unwrap();
        let x2 = g.reshape(x, &[5, 4]).unwrap();
        let xn = l.norm.forward(&mut g, &store, x2).unwrap();
        let ys = l.shared_output(&mut g, &store, xn).unwrap().unwrap();
        assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-15);
    }

    #[test]
    fn identical_shared_experts_double() {
        let (mut store, l) = layer(4, 2, 2, 1, 5);
        for (a, b) in [(l.shared[0].up.weight, l.shared[1].up.weight), (l.shared[0].down.weight, l.shared[1].down.weight)] {
            store.get_mut(b).value = store.get(a).value.clone();
        }
        for (a, b) in [
            (l.shared[0].up.bias.unwrap(), l.shared[1].up.bias.unwrap()),
            (l.shared[0].down.bias.unwrap(), l.shared[1].down.bias.unwrap()),
        ] {
            store.get_mut(b).value = store.get(a).value.clone();
        }
        let mut g = Graph::new();
        let x = g.constant(random(&[3, 4], 10));
        let xn = l.norm.forward(&mut g, &store, x).unwrap();
        let both = l.shared_output(&mut g, &store, xn).unwrap().unwrap();
        let one = l.shared[0].forward(&mut g, &store, xn).unwrap();
        for (a, b) in g.value(both).data().iter().zip(g.value(one).data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn global_layer_is_residual() {
        let (mut store, l) = layer(4, 1, 3, 2, 5);
        let x = random(&[6, 4], 11);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yg = global_moe_forward(&mut g, &store, &l, xv, &mut ForwardCtx::train()).unwrap();
        let y = l.forward(&mut g, &store, xv, &mut ForwardCtx::train()).unwrap();
        let diff = g.sub(yg, xv).unwrap();
        assert!(g.value(diff).max_abs_diff(g.value(y)) < 1e-15);
        for e in l.shared.iter().chain(&l.routed).cloned().collect::<Vec<_>>() {
            zero_expert(&mut store, &e);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yg = global_moe_forward(&mut g, &store, &l, xv, &mut ForwardCtx::train()).unwrap();
        assert!(g.value(yg).bit_eq(&x));
    }

    #[test]
    fn combine_is_elementwise_sum() {
        let mut g = Graph::new();
        let a = g.constant(random(&[2, 3], 1));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = combine(&mut g, a, z).unwrap();
        assert!(g.value(y).bit_eq(g.value(a)));
        let y = combine(&mut g, z, a).unwrap();
        assert!(g.value(y).bit_eq(g.value(a)));
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(combine(&mut g, a, bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn stats_dense_and_repeated_tokens() {
        let (store, l) = layer(4, 0, 4, 4, 3);
        let st = routing_stats(&store, &l, &random(&[20, 4], 2)).unwrap();
        assert!(st.frequency.iter().all(|&f| f == 1.0));
        let (store, l) = layer(4, 0, 5, 2, 3);
        let tok = random(&[1, 4], 3);
        let rep = Tensor::from_fn(&[30, 4], |i| tok.data()[i % 4]);
        let st = routing_stats(&store, &l, &rep).unwrap();
        assert_eq!(st.frequency.iter().filter(|&&f| f == 1.0).count(), 2);
        assert_eq!(st.frequency.iter().filter(|&&f| f == 0.0).count(), 3);
        let empty = RoutingStats::from_vectors(&[]);
        assert_eq!(empty.tokens, 0);
        assert!(empty.frequency.is_empty());
    }

    #[test]
    fn recorded_gates_agree_with_pure_stats() {
        let (store, l) = layer(4, 1, 6, 3, 3);
        let x = random(&[40, 4], 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::train().with_gate_records();
        l.forward(&mut g, &store, xv, &mut ctx).unwrap();
        let a = RoutingStats::from_gates(&ctx.gates[0].gates);
        let b = routing_stats(&store, &l, &x).unwrap();
        assert_eq!(a.frequency, b.frequency);
        for (p, q) in a.mean_gate.iter().zip(&b.mean_gate) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
