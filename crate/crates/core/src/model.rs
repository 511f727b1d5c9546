//! The enhancement network: amplification, Pack-based encoder, residual
//! dense trunk at low resolution, and an UnPack decoder.
//!
//! Parameter names:
//!
//! ```text
//! amplifier/fc1/{weight,bias}           64 -> hidden
//! amplifier/fc2/{weight,bias}           hidden -> 1
//! encoder/{color}/{weight,bias}         3x3, alpha^2 -> trunk/colors
//! trunk/block{b}/dense{l}/{weight,bias} 3x3, trunk + l*growth -> growth
//! trunk/block{b}/fusion/{weight,bias}   1x1, trunk + layers*growth -> trunk
//! trunk/global/fusion/{weight,bias}     1x1, blocks*trunk -> trunk
//! trunk/global/conv/{weight,bias}       3x3, trunk -> trunk
//! decoder/refine{i}/{weight,bias}       3x3, width -> width (decoder_depth > 1)
//! decoder/expand/{weight,bias}          3x3, width -> 3*alpha^2
//! ```
//!
//! `color` is `r, g1, g2, b` for Bayer input and `r, g, b` for RGB input.
//! For Bayer input the decoder width is `trunk / 4` (after UnPack 2x), for
//! RGB input it is `trunk`.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amplifier::{self, AmplifierMlp, AmplifierParams, AmplifierRange, HistogramConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::nnops::{he_init, ConvGeometry};
use crate::rearrange::{self, BayerPhase};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    BayerRaw,
    Rgb,
}

/// Final HR upsampler; `PixelShuffle` exists for layout comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampler {
    #[default]
    Unpack,
    PixelShuffle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_kind: InputKind,
    pub alpha_inner: usize,
    pub trunk_channels: usize,
    pub rdn_blocks: usize,
    pub rdn_layers: usize,
    pub growth: usize,
    pub slope: f32,
    /// Number of 3x3 convs in the decoder, the last one being the expansion.
    pub decoder_depth: usize,
    #[serde(skip)]
    pub bayer_phase: BayerPhase,
    pub amplifier_hidden: usize,
    #[serde(skip)]
    pub histogram: HistogramConfig,
    pub upsampler: Upsampler,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::bayer8()
    }
}

impl ModelConfig {
    /// Bayer RAW input, Pack 2x then 8x (16x total downsampling).
    pub fn bayer8() -> Self {
        ModelConfig {
            input_kind: InputKind::BayerRaw,
            alpha_inner: 8,
            trunk_channels: 60,
            rdn_blocks: 3,
            rdn_layers: 6,
            growth: 32,
            slope: crate::nnops::DEFAULT_SLOPE,
            decoder_depth: 1,
            bayer_phase: BayerPhase::Rggb,
            amplifier_hidden: 64,
            histogram: HistogramConfig::default(),
            upsampler: Upsampler::Unpack,
        }
    }

    pub fn rgb8() -> Self {
        ModelConfig {
            input_kind: InputKind::Rgb,
            ..ModelConfig::bayer8()
        }
    }

    pub fn rgb4() -> Self {
        ModelConfig {
            alpha_inner: 4,
            ..ModelConfig::rgb8()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "bayer8" => Ok(Self::bayer8()),
            "rgb8" => Ok(Self::rgb8()),
            "rgb4" => Ok(Self::rgb4()),
            _ => Err(Error::Config(format!(
                "unknown config `{name}` (expected bayer8, rgb8 or rgb4)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.alpha_inner, 4 | 8) {
            return fail(format!("alpha_inner must be 4 or 8, got {}", self.alpha_inner));
        }
        if self.rdn_blocks == 0 || self.rdn_layers == 0 || self.growth == 0 {
            return fail("rdn_blocks, rdn_layers and growth must all be >= 1".into());
        }
        if self.decoder_depth == 0 {
            return fail("decoder_depth must be >= 1".into());
        }
        if self.amplifier_hidden == 0 {
            return fail("amplifier_hidden must be >= 1".into());
        }
        if self.trunk_channels == 0 || self.trunk_channels % self.colors().len() != 0 {
            return fail(format!(
                "trunk_channels {} must be a positive multiple of {}",
                self.trunk_channels,
                self.colors().len()
            ));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return fail(format!("activation slope must be finite and >= 0, got {}", self.slope));
        }
        self.histogram.validate()
    }

    /// Encoder branch names, one per input colour plane.
    pub fn colors(&self) -> &'static [&'static str] {
        match self.input_kind {
            InputKind::BayerRaw => &["r", "g1", "g2", "b"],
            InputKind::Rgb => &["r", "g", "b"],
        }
    }

    /// Total spatial downsampling between the input and the trunk.
    pub fn total_downsampling(&self) -> usize {
        match self.input_kind {
            InputKind::BayerRaw => 2 * self.alpha_inner,
            InputKind::Rgb => self.alpha_inner,
        }
    }

    pub fn decoder_width(&self) -> usize {
        match self.input_kind {
            InputKind::BayerRaw => self.trunk_channels / 4,
            InputKind::Rgb => self.trunk_channels,
        }
    }

    /// Checks that `dims` is a legal input for this configuration.
    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let want_c = match self.input_kind {
            InputKind::BayerRaw => 1,
            InputKind::Rgb => 3,
        };
        let f = self.total_downsampling();
        match dims {
            &[h, w, c] if c == want_c && h % f == 0 && w % f == 0 => Ok(()),
            &[_, _, c] if c != want_c => Err(Error::shape(format!(
                "input must have {want_c} channel(s), got {c}"
            ))),
            &[h, w, _] => Err(Error::shape(format!(
                "input {h}x{w} is not divisible by {f}"
            ))),
            _ => Err(Error::shape(format!("input must be HxWxC, got {dims:?}"))),
        }
    }

    /// `(name, kernel size, cin, cout)` for every convolution, in build order.
    fn conv_layout(&self) -> Vec<(String, usize, usize, usize)> {
        let mut v = Vec::new();
        let a2 = self.alpha_inner * self.alpha_inner;
        let colors = self.colors();
        let per_color = self.trunk_channels / colors.len();
        for c in colors {
            v.push((format!("encoder/{c}"), 3, a2, per_color));
        }
        let t = self.trunk_channels;
        for b in 0..self.rdn_blocks {
            for l in 0..self.rdn_layers {
                v.push((format!("trunk/block{b}/dense{l}"), 3, t + l * self.growth, self.growth));
            }
            v.push((format!("trunk/block{b}/fusion"), 1, t + self.rdn_layers * self.growth, t));
        }
        v.push(("trunk/global/fusion".into(), 1, self.rdn_blocks * t, t));
        v.push(("trunk/global/conv".into(), 3, t, t));
        let d = self.decoder_width();
        for i in 0..self.decoder_depth - 1 {
            v.push((format!("decoder/refine{i}"), 3, d, d));
        }
        v.push(("decoder/expand".into(), 3, d, 3 * a2));
        v
    }

    /// Trainable parameter count, amplifier included.
    pub fn param_count(&self) -> usize {
        let convs: usize = self
            .conv_layout()
            .iter()
            .map(|&(_, k, cin, cout)| k * k * cin * cout + cout)
            .sum();
        let bins = self.histogram.bins;
        let h = self.amplifier_hidden;
        convs + bins * h + h + h + 1
    }
}

/// He-initialize every parameter. Each tensor draws its own seed from a
/// stream keyed by `seed`, in a fixed order.
pub fn build(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    let mlp = AmplifierMlp::init(config.histogram.bins, config.amplifier_hidden, seeds.next_u64())?;
    mlp.write_to(&mut store);
    for (name, k, cin, cout) in config.conv_layout() {
        store.insert(format!("{name}/weight"), he_init(&[k, k, cin, cout], seeds.next_u64())?);
        store.insert(format!("{name}/bias"), Tensor::zeros(&[cout])?);
    }
    debug_assert_eq!(store.param_count(), config.param_count());
    Ok(store)
}

/// Checks that `weights` holds exactly the tensors `config` needs, with the right shapes.
pub fn check_weights(config: &ModelConfig, weights: &WeightStore) -> Result<()> {
    config.validate()?;
    let reference = build_shapes(config);
    for (name, dims) in &reference {
        let t = weights.require(name)?;
        if t.dims() != dims.as_slice() {
            return Err(Error::Weight(format!(
                "tensor `{name}` has shape {:?}, config expects {dims:?}",
                t.dims()
            )));
        }
    }
    if let Some(extra) = weights.names().find(|n| !reference.contains_key(*n)) {
        return Err(Error::Weight(format!("unexpected tensor `{extra}` for this config")));
    }
    Ok(())
}

fn build_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let (bins, h) = (config.histogram.bins, config.amplifier_hidden);
    let mut m = BTreeMap::new();
    m.insert(amplifier::FC1_WEIGHT.to_string(), vec![bins, h]);
    m.insert(amplifier::FC1_BIAS.to_string(), vec![h]);
    m.insert(amplifier::FC2_WEIGHT.to_string(), vec![h, 1]);
    m.insert(amplifier::FC2_BIAS.to_string(), vec![1]);
    for (name, k, cin, cout) in config.conv_layout() {
        m.insert(format!("{name}/weight"), vec![k, k, cin, cout]);
        m.insert(format!("{name}/bias"), vec![cout]);
    }
    m
}

/// How the dark input is brightened before the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Amplification {
    /// Predicted by the histogram amplifier.
    Auto,
    /// A known exposure ratio.
    Fixed(f32),
}

/// Weights brought into a graph, by name.
pub struct Bound<V> {
    values: BTreeMap<String, V>,
}

impl<V: Clone> Bound<V> {
    /// Brings every tensor of `weights` in as a parameter (`trainable`) or constant.
    pub fn new<G: Graph<Value = V>>(g: &mut G, weights: &WeightStore, trainable: bool) -> Self {
        let values = weights
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.parameter(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { values }
    }

    /// Wraps values that are already in a graph.
    pub fn from_values(values: impl IntoIterator<Item = (String, V)>) -> Self {
        Bound {
            values: values.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&V> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Weight(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &V)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn amplifier(&self) -> Result<AmplifierParams<V>> {
        Ok(AmplifierParams {
            w1: self.get(amplifier::FC1_WEIGHT)?.clone(),
            b1: self.get(amplifier::FC1_BIAS)?.clone(),
            w2: self.get(amplifier::FC2_WEIGHT)?.clone(),
            b2: self.get(amplifier::FC2_BIAS)?.clone(),
        })
    }
}

/// Observer for named intermediate tensors.
pub type Trace<'a> = &'a mut dyn FnMut(&str, &Tensor);

struct Net<'c, 'b, 't, G: Graph> {
    cfg: &'c ModelConfig,
    w: &'b Bound<G::Value>,
    trace: Option<Trace<'t>>,
}

impl<G: Graph> Net<'_, '_, '_, G> {
    fn emit(&mut self, g: &G, name: &str, v: &G::Value) {
        if let Some(t) = self.trace.as_mut() {
            t(name, g.value(v));
        }
    }

    fn conv(&mut self, g: &mut G, name: &str, x: &G::Value, k: usize, act: bool) -> Result<G::Value> {
        let w = self.w.get(&format!("{name}/weight"))?;
        let b = self.w.get(&format!("{name}/bias"))?;
        let y = g.conv2d(x, w, Some(b), ConvGeometry::same(k))?;
        let y = if act { g.leaky_relu(&y, self.cfg.slope) } else { y };
        self.emit(g, name, &y);
        Ok(y)
    }

    fn trunk(&mut self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let cfg = self.cfg;
        let mut block_in = x.clone();
        let mut block_outs = Vec::with_capacity(cfg.rdn_blocks);
        for b in 0..cfg.rdn_blocks {
            let mut feats = block_in.clone();
            for l in 0..cfg.rdn_layers {
                let y = self.conv(g, &format!("trunk/block{b}/dense{l}"), &feats, 3, true)?;
                feats = g.concat_channels(&[feats, y])?;
            }
            let fused = self.conv(g, &format!("trunk/block{b}/fusion"), &feats, 1, false)?;
            let out = g.add(&fused, &block_in)?;
            self.emit(g, &format!("trunk/block{b}"), &out);
            block_outs.push(out.clone());
            block_in = out;
        }
        let all = g.concat_channels(&block_outs)?;
        let fused = self.conv(g, "trunk/global/fusion", &all, 1, false)?;
        let global = self.conv(g, "trunk/global/conv", &fused, 3, false)?;
        let out = g.add(&global, x)?;
        self.emit(g, "trunk", &out);
        Ok(out)
    }

    fn forward(&mut self, g: &mut G, input: &G::Value, amp: Amplification, clamp: bool) -> Result<G::Value> {
        let cfg = self.cfg;
        cfg.check_input(g.value(input).dims())?;
        let amplified = match amp {
            Amplification::Fixed(k) => {
                if !(k.is_finite() && k >= 1.0) {
                    return Err(Error::Domain(format!(
                        "amplification factor must be finite and >= 1, got {k}"
                    )));
                }
                g.scale(input, k)
            }
            Amplification::Auto => {
                let hist = amplifier::log_histogram(g.value(input), &cfg.histogram)?;
                let hist = g.constant(hist.mass);
                let params = self.w.amplifier()?;
                let a = amplifier::amplification(g, &hist, &params, AmplifierRange::default())?;
                self.emit(g, "amplifier", &a);
                g.scale_by(input, &a)?
            }
        };
        self.emit(g, "amplified", &amplified);

        let planes = match cfg.input_kind {
            InputKind::BayerRaw => {
                let packed = g.pack(&amplified, 2)?;
                let order = rearrange::bayer_channel_order(cfg.bayer_phase);
                let split = g.permute_channels(&packed, &order)?;
                self.emit(g, "bayer_split", &split);
                split
            }
            InputKind::Rgb => amplified,
        };

        let colors = cfg.colors();
        let mut branches = Vec::with_capacity(colors.len());
        for (i, c) in colors.iter().enumerate() {
            let plane = g.slice_channels(&planes, i, 1)?;
            let packed = g.pack(&plane, cfg.alpha_inner)?;
            branches.push(self.conv(g, &format!("encoder/{c}"), &packed, 3, true)?);
        }
        let enc = g.concat_channels(&branches)?;
        drop(branches);
        self.emit(g, "encoder", &enc);

        let trunk = self.trunk(g, &enc)?;
        drop(enc);

        let mut x = match cfg.input_kind {
            InputKind::BayerRaw => {
                let up = g.unpack(&trunk, 2)?;
                self.emit(g, "unpack2", &up);
                up
            }
            InputKind::Rgb => trunk,
        };
        for i in 0..cfg.decoder_depth - 1 {
            x = self.conv(g, &format!("decoder/refine{i}"), &x, 3, true)?;
        }
        let expanded = self.conv(g, "decoder/expand", &x, 3, true)?;
        drop(x);
        let hr = match cfg.upsampler {
            Upsampler::Unpack => g.unpack(&expanded, cfg.alpha_inner)?,
            Upsampler::PixelShuffle => g.pixel_shuffle(&expanded, cfg.alpha_inner)?,
        };
        drop(expanded);
        let out = if clamp { g.clamp(&hr, 0.0, 1.0) } else { hr };
        self.emit(g, "output", &out);
        Ok(out)
    }
}

/// Runs the network on any graph. `weights` must have been bound with
/// [`Bound::new`] on the same graph.
pub fn forward_graph<G: Graph>(
    g: &mut G,
    input: &G::Value,
    weights: &Bound<G::Value>,
    config: &ModelConfig,
    amp: Amplification,
    trace: Option<Trace<'_>>,
) -> Result<G::Value> {
    config.validate()?;
    let mut net = Net {
        cfg: config,
        w: weights,
        trace,
    };
    net.forward(g, input, amp, true)
}

/// [`forward_graph`] without the final clamp to [0, 1]. Training uses this so
/// that saturated pixels still receive gradients.
pub fn forward_graph_unclamped<G: Graph>(
    g: &mut G,
    input: &G::Value,
    weights: &Bound<G::Value>,
    config: &ModelConfig,
    amp: Amplification,
    trace: Option<Trace<'_>>,
) -> Result<G::Value> {
    config.validate()?;
    let mut net = Net {
        cfg: config,
        w: weights,
        trace,
    };
    net.forward(g, input, amp, false)
}

/// Inference: `input` is `HxWx1` (Bayer) or `HxWx3` (RGB) in [0, 1]; the
/// result is `HxWx3` in [0, 1].
pub fn forward(input: &Tensor, weights: &WeightStore, config: &ModelConfig, amp: Amplification) -> Result<Tensor> {
    forward_traced(input, weights, config, amp, None)
}

pub fn forward_traced(
    input: &Tensor,
    weights: &WeightStore,
    config: &ModelConfig,
    amp: Amplification,
    trace: Option<Trace<'_>>,
) -> Result<Tensor> {
    let mut g = Eager;
    let bound = Bound::new(&mut g, weights, false);
    forward_graph(&mut g, input, &bound, config, amp, trace)
}

/// The amplification `forward` would use for `input`.
pub fn resolve_amplification(input: &Tensor, weights: &WeightStore, config: &ModelConfig, amp: Amplification) -> Result<f32> {
    match amp {
        Amplification::Fixed(k) => Ok(k),
        Amplification::Auto => {
            let h = amplifier::log_histogram(input, &config.histogram)?;
            amplifier::predict_amplification(&h, &AmplifierMlp::from_store(weights)?)
        }
    }
}

/// Number of HR pixels that influence one LR output of Pack `alpha` followed
/// by a 3x3 convolution, measured as the support of the input gradient.
pub fn count_receptive_field(alpha: usize) -> Result<usize> {
    if alpha == 0 {
        return Err(Error::Config("alpha must be >= 1".into()));
    }
    let lr = 5;
    let n = lr * alpha;
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[n, n, 1], 1.0)?);
    let packed = tape.pack(&x, alpha)?;
    let w = tape.constant(Tensor::new(&[3, 3, alpha * alpha, 1], 1.0)?);
    let y = tape.conv2d(&packed, &w, None, ConvGeometry::same(3))?;
    let mut mask = Tensor::zeros(&[lr, lr, 1])?;
    mask.data_mut()[(lr / 2) * lr + lr / 2] = 1.0;
    let mask = tape.constant(mask);
    let picked = tape.mul(&y, &mask)?;
    let root = tape.sum(&picked);
    let grads = tape.backward(root)?;
    let gx = grads
        .get(x)
        .ok_or_else(|| Error::Contract("input received no gradient".into()))?;
    Ok(gx.data().iter().filter(|&&v| v != 0.0).count())
}
