//! Named parameter storage shared by every model component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Trainable weight or a non-trainable running buffer (BatchNorm statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    frozen: bool,
    pub grad: Option<Tensor>,
    pub velocity: Option<Tensor>,
}

impl Param {
    /// Weights require gradients unless frozen; buffers never do.
    pub fn requires_grad(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            kind,
            frozen: false,
            grad: None,
            velocity: None,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight initialized from uniform(−1/√fan_in, +1/√fan_in). The stream
    /// is keyed by (store seed, name), so a parameter's initial value does
    /// not depend on what else the model contains.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.uniform_seeded(name, shape, fan_in, self.seed)
    }

    /// [`ParamStore::uniform`] with an explicit stream seed.
    pub fn uniform_seeded(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.insert(name, value, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, v), ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, Tensor::full(shape, v), ParamKind::Buffer)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Freeze or unfreeze every weight whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.kind == ParamKind::Weight && p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the gradients of every parameter leaf on `graph` into `grad`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        let mut leaves: Vec<_> = graph.param_leaves().collect();
        leaves.sort();
        for (id, var) in leaves {
            let p = &mut self.params[id.0];
            if !p.requires_grad() {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    /// Total scalar count of weights (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// 64-bit FNV-1a, used to key per-name random streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        let x1 = a.uniform("x", &[4], 4);
        b.uniform("other", &[9], 3);
        let x2 = b.uniform("x", &[4], 4);
        assert!(a.get(x1).value.bit_eq(&b.get(x2).value));
    }

    #[test]
    fn uniform_respects_fan_in_bound() {
        let mut s = ParamStore::new(1);
        let id = s.uniform("w", &[64, 16], 64);
        assert!(s.get(id).value.data().iter().all(|v| v.abs() < 0.125));
    }

    #[test]
    fn frozen_weights_and_buffers_do_not_require_grad() {
        let mut s = ParamStore::new(0);
        let w = s.uniform("enc.w", &[2], 2);
        let m = s.buffer("bn.mean", &[2], 0.0);
        assert!(s.get(w).requires_grad());
        assert!(!s.get(m).requires_grad());
        s.set_frozen_prefix("enc.", true);
        assert!(!s.get(w).requires_grad());
    }
}
