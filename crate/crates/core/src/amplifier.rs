//! Amplification-factor estimation from the dark input itself.
//!
//! A 64-bin histogram with log-spaced edges summarizes the exposure of the
//! input; a one-hidden-layer perceptron maps it to `z`, and the factor is
//! `clamp(exp(z), 1, 1000)`.

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::nnops::he_init;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramConfig {
    pub bins: usize,
    pub v_min: f32,
    pub v_max: f32,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        HistogramConfig {
            bins: 64,
            v_min: 2f32.powi(-14),
            v_max: 1.0,
        }
    }
}

impl HistogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.v_min > 0.0 && self.v_min < self.v_max) {
            return Err(Error::Config(format!(
                "histogram needs >= 2 bins and 0 < v_min < v_max, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Bin edges `e_k = v_min · r^k`, `k = 0..=bins`, with `e_bins = v_max`.
    pub fn edges(&self) -> Vec<f64> {
        let (lo, hi) = (self.v_min as f64, self.v_max as f64);
        let ratio = (hi / lo).powf(1.0 / self.bins as f64);
        let mut e: Vec<f64> = (0..=self.bins).map(|k| lo * ratio.powi(k as i32)).collect();
        e[self.bins] = hi;
        e
    }
}

/// Probability mass per log-spaced bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramFeature {
    pub mass: Tensor,
}

/// Bin index of `v`: closed on the left, open on the right, the top value
/// belongs to the last bin and anything below `v_min` to the first.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    if v < edges[1] {
        return 0;
    }
    if v >= edges[bins - 1] {
        return bins - 1;
    }
    // edges are increasing; find the last k with e_k <= v.
    edges.partition_point(|&e| e <= v) - 1
}

pub fn log_histogram(raw: &Tensor, cfg: &HistogramConfig) -> Result<HistogramFeature> {
    cfg.validate()?;
    let edges = cfg.edges();
    let mut counts = vec![0u64; cfg.bins];
    for &v in raw.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!(
                "histogram input {v} outside [0, 1]"
            )));
        }
        counts[bin_of(v as f64, &edges)] += 1;
    }
    let n = raw.len() as f64;
    let mass = counts.iter().map(|&c| (c as f64 / n) as f32).collect();
    Ok(HistogramFeature {
        mass: Tensor::from_vec(&[cfg.bins], mass)?,
    })
}

/// Output range of the predicted factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierRange {
    pub min: f32,
    pub max: f32,
}

impl Default for AmplifierRange {
    fn default() -> Self {
        AmplifierRange {
            min: 1.0,
            max: 1000.0,
        }
    }
}

pub const FC1_WEIGHT: &str = "amplifier/fc1/weight";
pub const FC1_BIAS: &str = "amplifier/fc1/bias";
pub const FC2_WEIGHT: &str = "amplifier/fc2/weight";
pub const FC2_BIAS: &str = "amplifier/fc2/bias";

#[derive(Debug, Clone)]
pub struct AmplifierMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AmplifierMlp {
    /// He-initialized weights; the output bias starts at the log-midpoint of
    /// the default range so the first factors are not clamped.
    pub fn init(bins: usize, hidden: usize, seed: u64) -> Result<Self> {
        let r = AmplifierRange::default();
        let mid = 0.5 * (r.min.ln() + r.max.ln());
        Ok(AmplifierMlp {
            w1: he_init(&[bins, hidden], seed)?,
            b1: Tensor::zeros(&[hidden])?,
            w2: he_init(&[hidden, 1], seed.wrapping_add(1))?,
            b2: Tensor::from_vec(&[1], vec![mid])?,
        })
    }

    pub fn zeros(bins: usize, hidden: usize) -> Result<Self> {
        Ok(AmplifierMlp {
            w1: Tensor::zeros(&[bins, hidden])?,
            b1: Tensor::zeros(&[hidden])?,
            w2: Tensor::zeros(&[hidden, 1])?,
            b2: Tensor::zeros(&[1])?,
        })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Ok(AmplifierMlp {
            w1: store.require(FC1_WEIGHT)?.clone(),
            b1: store.require(FC1_BIAS)?.clone(),
            w2: store.require(FC2_WEIGHT)?.clone(),
            b2: store.require(FC2_BIAS)?.clone(),
        })
    }

    pub fn write_to(&self, store: &mut WeightStore) {
        store.insert(FC1_WEIGHT, self.w1.clone());
        store.insert(FC1_BIAS, self.b1.clone());
        store.insert(FC2_WEIGHT, self.w2.clone());
        store.insert(FC2_BIAS, self.b2.clone());
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

/// MLP parameters already brought into a graph.
pub struct AmplifierParams<V> {
    pub w1: V,
    pub b1: V,
    pub w2: V,
    pub b2: V,
}

impl<V: Clone> AmplifierParams<V> {
    pub fn bind<G: Graph<Value = V>>(g: &mut G, mlp: &AmplifierMlp, trainable: bool) -> Self {
        let mut bring = |t: &Tensor| {
            if trainable {
                g.parameter(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        AmplifierParams {
            w1: bring(&mlp.w1),
            b1: bring(&mlp.b1),
            w2: bring(&mlp.w2),
            b2: bring(&mlp.b2),
        }
    }
}

/// Log-factor `z = W2·relu(W1·h + b1) + b2`, as a one-element value.
pub fn log_factor<G: Graph>(g: &mut G, hist: &G::Value, p: &AmplifierParams<G::Value>) -> Result<G::Value> {
    let hidden = g.linear(hist, &p.w1, &p.b1)?;
    let hidden = g.leaky_relu(&hidden, 0.0);
    g.linear(&hidden, &p.w2, &p.b2)
}

/// Amplification `clamp(exp(z), min, max)` as a one-element value.
pub fn amplification<G: Graph>(
    g: &mut G,
    hist: &G::Value,
    p: &AmplifierParams<G::Value>,
    range: AmplifierRange,
) -> Result<G::Value> {
    let z = log_factor(g, hist, p)?;
    let a = g.exp(&z);
    Ok(g.clamp(&a, range.min, range.max))
}

pub fn predict_amplification(h: &HistogramFeature, mlp: &AmplifierMlp) -> Result<f32> {
    predict_amplification_in(h, mlp, AmplifierRange::default())
}

pub fn predict_amplification_in(h: &HistogramFeature, mlp: &AmplifierMlp, range: AmplifierRange) -> Result<f32> {
    let mut g = Eager;
    let params = AmplifierParams::bind(&mut g, mlp, false);
    let a = amplification(&mut g, &h.mass, &params, range)?;
    a.item()
}

/// Brighten a linear-domain image by `factor`; results are not clipped.
pub fn apply_amplification(raw: &Tensor, factor: f32) -> Result<Tensor> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::Domain(format!(
            "amplification factor must be finite and >= 1, got {factor}"
        )));
    }
    Ok(raw.map(|v| v * factor))
}
