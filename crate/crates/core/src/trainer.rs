//! Adam training over paired samples, with checkpoints that resume
//! bit-identically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::amplifier::{self, AmplifierMlp, AmplifierParams, HistogramConfig};
use crate::autodiff::{Tape, Var};
use crate::dataio::{sample_patch, PairedSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, Amplification, Bound, ModelConfig};
use crate::objective::{loss_total_in, Objective};
use crate::tensor::Tensor;
use crate::weights::{load_weights, save_weights, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: WeightStore,
    pub v: WeightStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(weights: &WeightStore, config: AdamConfig) -> Result<Self> {
        let mut m = WeightStore::new();
        for (name, t) in weights.iter() {
            m.insert(name, Tensor::zeros(t.dims())?);
        }
        Ok(AdamState {
            config,
            v: m.clone(),
            m,
            step: 0,
        })
    }

    /// Writes moments as `adam/m/<name>`, `adam/v/<name>` and the step as `adam/step`.
    pub fn write_to(&self, store: &mut WeightStore) -> Result<()> {
        for (name, t) in self.m.iter() {
            store.insert(format!("adam/m/{name}"), t.clone());
        }
        for (name, t) in self.v.iter() {
            store.insert(format!("adam/v/{name}"), t.clone());
        }
        // Two exact 32-bit halves.
        let lo = (self.step & 0xFFFF) as f32;
        let hi = (self.step >> 16) as f32;
        if (self.step >> 16) >= 1 << 24 {
            return Err(Error::Config("step counter too large to checkpoint".into()));
        }
        store.insert("adam/step", Tensor::from_vec(&[2], vec![lo, hi])?);
        Ok(())
    }

    pub fn from_store(store: &WeightStore, config: AdamConfig) -> Result<Self> {
        let step = store.require("adam/step")?;
        let s = step.data();
        if s.len() != 2 {
            return Err(Error::Weight("adam/step must hold two values".into()));
        }
        Ok(AdamState {
            config,
            m: store.with_prefix("adam/m/"),
            v: store.with_prefix("adam/v/"),
            step: s[0] as u64 | ((s[1] as u64) << 16),
        })
    }
}

/// One bias-corrected Adam update of every tensor in `weights`.
/// Tensors absent from `grads` are treated as having zero gradient.
pub fn adam_step(weights: &mut WeightStore, grads: &WeightStore, state: &mut AdamState) -> Result<()> {
    if let Some(extra) = grads.names().find(|n| !weights.contains(n)) {
        return Err(Error::shape(format!("gradient for unknown tensor `{extra}`")));
    }
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = (1.0 - (beta1 as f64).powi(t)) as f32;
    let c2 = (1.0 - (beta2 as f64).powi(t)) as f32;
    let names: Vec<String> = weights.names().map(str::to_string).collect();
    for name in names {
        let w = weights.get(&name).expect("listed").clone();
        let g = match grads.get(&name) {
            Some(g) => {
                if g.dims() != w.dims() {
                    return Err(Error::shape(format!(
                        "gradient for `{name}` is {:?}, weight is {:?}",
                        g.dims(),
                        w.dims()
                    )));
                }
                g.clone()
            }
            None => Tensor::zeros(w.dims())?,
        };
        let mut m = match state.m.get(&name) {
            Some(m) if m.dims() == w.dims() => m.clone(),
            _ => return Err(Error::shape(format!("first moment for `{name}` missing or misshapen"))),
        };
        let mut v = match state.v.get(&name) {
            Some(v) if v.dims() == w.dims() => v.clone(),
            _ => return Err(Error::shape(format!("second moment for `{name}` missing or misshapen"))),
        };
        let mut w = w;
        {
            let (md, vd, wd) = (m.data_mut(), v.data_mut(), w.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                wd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        state.m.insert(name.clone(), m);
        state.v.insert(name.clone(), v);
        weights.insert(name, w);
    }
    Ok(())
}

/// Where the amplification factor comes from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmpMode {
    /// The histogram amplifier, trained jointly.
    Auto,
    /// The pair's true exposure ratio.
    GtExposure,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub iters: u64,
    pub seed: u64,
    /// Crop size; `None` trains on whole images.
    pub patch: Option<usize>,
    pub amp: AmpMode,
    pub adam: AdamConfig,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: Option<f32>,
    pub objective: Objective,
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Compute the loss on the clamped output instead of the raw decoder output.
    pub clamp_output: bool,
}

impl TrainOptions {
    pub fn new(model: ModelConfig) -> Self {
        TrainOptions {
            model,
            iters: 1000,
            seed: 0,
            patch: Some(512),
            amp: AmpMode::Auto,
            adam: AdamConfig::default(),
            clip_norm: None,
            objective: Objective::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            clamp_output: false,
        }
    }
}

pub const DEFAULT_CLIP_NORM: f32 = 5.0;
pub const CURVE_HEADER: &str = "iter,total,l1,feat,smooth,tv,wl1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iter: u64,
    pub total: f32,
    pub l1: f32,
    pub feat: f32,
    pub smooth: f32,
    pub tv: f32,
    pub wl1: f32,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iter, r.total, r.l1, r.feat, r.smooth, r.tv, r.wl1);
    }
    s
}

/// Training state: weights, optimizer and the number of completed iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub options: TrainOptions,
    pub weights: WeightStore,
    pub adam: AdamState,
    pub curve: Vec<CurveRow>,
}

fn sample_seed(seed: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ iter.wrapping_mul(0xA076_1D64_78BD_642F))
}

impl Trainer {
    /// Fresh He-initialized weights from `options.seed`.
    pub fn new(options: TrainOptions) -> Result<Self> {
        let weights = model::build(&options.model, options.seed)?;
        Self::with_weights(options, weights)
    }

    pub fn with_weights(options: TrainOptions, weights: WeightStore) -> Result<Self> {
        model::check_weights(&options.model, &weights)?;
        let adam = AdamState::new(&weights, options.adam)?;
        Ok(Trainer {
            options,
            weights,
            adam,
            curve: Vec::new(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.adam.step
    }

    /// Weights plus optimizer state, as one `.llpk` store.
    pub fn checkpoint(&self) -> Result<WeightStore> {
        let mut store = self.weights.clone();
        self.adam.write_to(&mut store)?;
        Ok(store)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_weights(&self.checkpoint()?, path)
    }

    pub fn resume(options: TrainOptions, checkpoint: &WeightStore) -> Result<Self> {
        let mut weights = checkpoint.clone();
        let names: Vec<String> = weights.names().filter(|n| n.starts_with("adam/")).map(str::to_string).collect();
        for n in names {
            weights.remove(&n);
        }
        model::check_weights(&options.model, &weights)?;
        let adam = AdamState::from_store(checkpoint, options.adam)?;
        Ok(Trainer {
            options,
            weights,
            adam,
            curve: Vec::new(),
        })
    }

    pub fn resume_from(options: TrainOptions, path: impl AsRef<Path>) -> Result<Self> {
        Self::resume(options, &load_weights(path)?)
    }

    /// The sample (and crop) used at `iter`; depends only on `(seed, iter)`.
    pub fn sample_for(&self, data: &[PairedSample], iter: u64) -> Result<PairedSample> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut rng = sample_seed(self.options.seed, iter);
        let pair = &data[rng.random_range(0..data.len())];
        match self.options.patch {
            Some(size) => sample_patch(pair, size, rng.random()),
            None => Ok(pair.clone()),
        }
    }

    /// Loss terms and gradients for one sample.
    pub fn evaluate(&self, sample: &PairedSample) -> Result<(CurveRow, WeightStore)> {
        let opts = &self.options;
        let mut tape = Tape::new();
        let bound: Bound<Var> = Bound::new(&mut tape, &self.weights, true);
        let input = tape.constant(sample.dark.clone());
        let gt = tape.constant(sample.gt.clone());
        let amp = match opts.amp {
            AmpMode::Auto => Amplification::Auto,
            AmpMode::GtExposure => Amplification::Fixed(sample.k),
        };
        let out = if opts.clamp_output {
            model::forward_graph(&mut tape, &input, &bound, &opts.model, amp, None)?
        } else {
            model::forward_graph_unclamped(&mut tape, &input, &bound, &opts.model, amp, None)?
        };
        let params: Vec<Var> = bound.iter().map(|(_, v)| *v).collect();
        let lb = loss_total_in(&mut tape, &gt, &out, &params, &opts.objective)?;
        let row = CurveRow {
            iter: self.iteration(),
            total: tape.value(&lb.total).item()?,
            l1: tape.value(&lb.l1).item()?,
            feat: tape.value(&lb.feature).item()?,
            smooth: tape.value(&lb.smooth).item()?,
            tv: tape.value(&lb.tv).item()?,
            wl1: tape.value(&lb.weight_l1).item()?,
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}: {row:?}", row.iter)));
        }
        let grads = tape.backward(lb.total)?;
        let mut out = WeightStore::new();
        for (name, v) in bound.iter() {
            if let Some(g) = grads.get(*v) {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{name}` at iteration {}",
                        row.iter
                    )));
                }
                out.insert(name, g.clone());
            }
        }
        Ok((row, out))
    }

    /// One optimization step on the sample chosen for the current iteration.
    pub fn step(&mut self, data: &[PairedSample]) -> Result<CurveRow> {
        let sample = self.sample_for(data, self.iteration())?;
        let (row, mut grads) = self.evaluate(&sample)?;
        if let Some(c) = self.options.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut self.weights, &grads, &mut self.adam)?;
        self.curve.push(row);
        let every = self.options.checkpoint_every;
        if every > 0 && self.iteration() % every == 0 {
            if let Some(dir) = &self.options.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                self.save_checkpoint(dir.join(format!("ckpt_{:06}.llpk", self.iteration())))?;
            }
        }
        Ok(row)
    }

    /// Runs until `options.iters` iterations are complete.
    pub fn run(&mut self, data: &[PairedSample]) -> Result<()> {
        while self.iteration() < self.options.iters {
            self.step(data)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut WeightStore, max_norm: f32) -> f32 {
    let sq: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        let names: Vec<String> = grads.names().map(str::to_string).collect();
        for n in names {
            let g = grads.get(&n).expect("listed").map(|v| v * s);
            grads.insert(n, g);
        }
    }
    norm
}

/// Convenience: fresh training run over `data`.
pub fn train(options: TrainOptions, data: &[PairedSample]) -> Result<Trainer> {
    let mut t = Trainer::new(options)?;
    t.run(data)?;
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplifierTraining {
    pub hidden: usize,
    pub iters: u64,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AmplifierTraining {
    fn default() -> Self {
        AmplifierTraining {
            hidden: 64,
            iters: 1500,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Fits the amplifier alone by regressing its log-factor onto `ln k`
/// (mean squared error, full batch).
pub fn train_amplifier(samples: &[(Tensor, f32)], hist: &HistogramConfig, opts: AmplifierTraining) -> Result<AmplifierMlp> {
    if samples.is_empty() {
        return Err(Error::Config("no amplifier training samples".into()));
    }
    let feats: Vec<(Tensor, f32)> = samples
        .iter()
        .map(|(dark, k)| Ok((amplifier::log_histogram(dark, hist)?.mass, k.ln())))
        .collect::<Result<_>>()?;
    let mut mlp = AmplifierMlp::init(hist.bins, opts.hidden, opts.seed)?;
    let mut store = WeightStore::new();
    mlp.write_to(&mut store);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            lr: opts.lr,
            ..AdamConfig::default()
        },
    )?;
    let inv_n = 1.0 / feats.len() as f32;
    for _ in 0..opts.iters {
        let mut tape = Tape::new();
        let params = AmplifierParams::bind(&mut tape, &mlp, true);
        let mut acc: Option<Var> = None;
        for (h, target) in &feats {
            let h = tape.constant(h.clone());
            let z = amplifier::log_factor(&mut tape, &h, &params)?;
            let t = tape.constant(Tensor::from_vec(&[1], vec![*target])?);
            let d = tape.sub(&z, &t)?;
            let sq = tape.mul(&d, &d)?;
            acc = Some(match acc {
                Some(a) => tape.add(&a, &sq)?,
                None => sq,
            });
        }
        let loss = tape.scale(&acc.expect("samples checked non-empty"), inv_n);
        let grads = tape.backward(loss)?;
        let mut g = WeightStore::new();
        for (name, v) in [
            (amplifier::FC1_WEIGHT, params.w1),
            (amplifier::FC1_BIAS, params.b1),
            (amplifier::FC2_WEIGHT, params.w2),
            (amplifier::FC2_BIAS, params.b2),
        ] {
            if let Some(t) = grads.get(v) {
                g.insert(name, t.clone());
            }
        }
        adam_step(&mut store, &g, &mut adam)?;
        mlp = AmplifierMlp::from_store(&store)?;
    }
    Ok(mlp)
}
