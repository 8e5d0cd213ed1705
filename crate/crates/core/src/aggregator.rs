//! Feature aggregator: upsample all pyramid stages to stride 4, concatenate
//! (stage order 1, 2, 3, 4) and project `15·C'` channels down to `C`.

use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

/// Nearest-neighbour upsampling restricted to the pyramid's factors.
pub fn upsample_nearest(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!("unsupported upsample factor {factor}; expected 1, 2, 4 or 8")));
    }
    if factor == 1 {
        return Ok(x);
    }
    g.upsample_nearest(x, factor)
}

/// Bilinear upsampling (half-pixel centres, edge-clamped) of `x[B×h×w×C]`.
pub fn upsample_bilinear(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!("unsupported upsample factor {factor}; expected 1, 2, 4 or 8")));
    }
    if factor == 1 {
        return Ok(x);
    }
    let [b, h, w, c] = <[usize; 4]>::try_from(g.shape(x)).map_err(|_| Error::Shape("expected rank 4".into()))?;
    let (oh, ow) = (h * factor, w * factor);
    let f = factor as f64;
    let coord = |o: usize, n: usize| ((o as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
    let mut pts = Vec::with_capacity(b * oh * ow * 2);
    for _ in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                pts.push(coord(i, h));
                pts.push(coord(j, w));
            }
        }
    }
    let pts = g.constant(Tensor::new(&[b, oh * ow, 2], pts)?);
    let y = g.bilinear_sample(x, pts)?;
    g.reshape(y, &[b, oh, ow, c])
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub projection: Linear,
    pub base_channels: usize,
    pub channels: usize,
    pub mode: UpsampleMode,
}

impl Aggregator {
    pub fn new(store: &mut ParamStore, base_channels: usize, channels: usize, mode: UpsampleMode) -> Self {
        Self {
            projection: Linear::new(store, "aggregator.projection", 15 * base_channels, channels, true),
            base_channels,
            channels,
            mode,
        }
    }

    /// Concatenated channel count `C'' = C' + 2C' + 4C' + 8C'`.
    pub fn concat_channels(&self) -> usize {
        15 * self.base_channels
    }

    /// Fused map `[B×H/4×W/4×C]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: &FeaturePyramid) -> Result<Var> {
        let concat = self.concat(g, p)?;
        let cc = *g.shape(concat).last().unwrap();
        if cc != self.projection.inputs {
            return Err(Error::Config(format!(
                "aggregator projection expects {} channels, pyramid concatenates to {cc}",
                self.projection.inputs
            )));
        }
        self.projection.forward(g, store, concat)
    }

    pub fn concat(&self, g: &mut Graph, p: &FeaturePyramid) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for (s, &v) in p.stages.iter().enumerate() {
            let factor = 1 << s;
            parts.push(match self.mode {
                UpsampleMode::Nearest => upsample_nearest(g, v, factor)?,
                UpsampleMode::Bilinear => upsample_bilinear(g, v, factor)?,
            });
        }
        g.concat(&parts)
    }

    pub fn param_count(&self) -> usize {
        self.projection.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PyramidValues;

    fn pyramid(c: usize, value: impl Fn(usize, usize) -> f64) -> PyramidValues {
        PyramidValues {
            stages: std::array::from_fn(|s| {
                let side = 16 >> s;
                let ch = c << s;
                Tensor::from_fn(&[1, side, side, ch], |i| value(s, i))
            }),
        }
    }

    #[test]
    fn unsupported_factor_is_config_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        assert!(matches!(upsample_nearest(&mut g, x, 3), Err(Error::Config(_))));
        let same = upsample_nearest(&mut g, x, 1).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn single_pixel_replicates() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 2], 5.0));
        let y = upsample_nearest(&mut g, x, 4).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn upsample_gradient_counts_replicas() {
        for factor in [2usize, 4, 8] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_fn(&[1, 2, 3, 2], |i| i as f64), true);
            let y = upsample_nearest(&mut g, x, factor).unwrap();
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            let want = (factor * factor) as f64;
            assert!(grads.get(x).unwrap().data().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn concat_width_is_fifteen_base_channels() {
        let mut store = ParamStore::new(0);
        let agg = Aggregator::new(&mut store, 4, 8, UpsampleMode::Nearest);
        assert_eq!(agg.concat_channels(), 60);
        let pv = pyramid(4, |_, i| i as f64);
        let mut g = Graph::new();
        let p = pv.to_graph(&mut g);
        let cat = agg.concat(&mut g, &p).unwrap();
        assert_eq!(g.shape(cat), &[1, 16, 16, 60]);
        let out = agg.forward(&mut g, &store, &p).unwrap();
        assert_eq!(g.shape(out), &[1, 16, 16, 8]);
    }

    #[test]
    fn selector_projection_passes_stage_one_through() {
        let c = 3;
        let mut store = ParamStore::new(0);
        let agg = Aggregator::new(&mut store, c, c, UpsampleMode::Nearest);
        let w = &mut store.get_mut(agg.projection.weight).value;
        *w = Tensor::from_fn(&[15 * c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let b = agg.projection.bias.unwrap();
        store.get_mut(b).value = Tensor::zeros(&[c]);
        let pv = pyramid(c, |s, i| (s * 1000 + i) as f64);
        let mut g = Graph::new();
        let p = pv.to_graph(&mut g);
        let out = agg.forward(&mut g, &store, &p).unwrap();
        assert!(g.value(out).bit_eq(&pv.stages[0]));
    }

    #[test]
    fn constant_pyramid_gives_constant_map() {
        let mut store = ParamStore::new(5);
        let agg = Aggregator::new(&mut store, 2, 4, UpsampleMode::Nearest);
        let b = agg.projection.bias.unwrap();
        store.get_mut(b).value = Tensor::zeros(&[4]);
        let pv = pyramid(2, |_, _| 1.0);
        let mut g = Graph::new();
        let p = pv.to_graph(&mut g);
        let out = agg.forward(&mut g, &store, &p).unwrap();
        let first = g.value(out).data()[..4].to_vec();
        for px in g.value(out).data().chunks(4) {
            assert_eq!(px, &first[..]);
        }
    }

    #[test]
    fn aggregation_is_affine_in_pyramid() {
        let mut store = ParamStore::new(11);
        let agg = Aggregator::new(&mut store, 2, 3, UpsampleMode::Nearest);
        let bias = store.get(agg.projection.bias.unwrap()).value.data().to_vec();
        let pv = pyramid(2, |s, i| ((s + 1) * i) as f64 * 0.01 - 0.3);
        let alpha = 2.5;
        let scaled = PyramidValues {
            stages: std::array::from_fn(|s| Tensor::from_fn(pv.stages[s].shape(), |i| alpha * pv.stages[s].data()[i])),
        };
        let mut g = Graph::new();
        let p1 = pv.to_graph(&mut g);
        let p2 = scaled.to_graph(&mut g);
        let y1 = agg.forward(&mut g, &store, &p1).unwrap();
        let y2 = agg.forward(&mut g, &store, &p2).unwrap();
        for (i, (a, b)) in g.value(y1).data().iter().zip(g.value(y2).data()).enumerate() {
            let bt = bias[i % 3];
            assert!((b - (alpha * (a - bt) + bt)).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_mode_keeps_shapes() {
        let mut store = ParamStore::new(0);
        let agg = Aggregator::new(&mut store, 2, 4, UpsampleMode::Bilinear);
        let pv = pyramid(2, |_, _| 1.0);
        let mut g = Graph::new();
        let p = pv.to_graph(&mut g);
        let cat = agg.concat(&mut g, &p).unwrap();
        assert_eq!(g.shape(cat), &[1, 16, 16, 30]);
        // Constant input stays constant under edge-clamped bilinear interpolation.
        assert!(g.value(cat).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
