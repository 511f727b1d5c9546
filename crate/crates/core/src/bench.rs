//! Micro-benchmarks of the 2x upsampling operators and of the full forward pass.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, Amplification, ModelConfig};
use crate::nnops::{he_init, interpolate_nearest, transposed_conv2d};
use crate::rearrange::{pixel_shuffle, pixel_shuffle_source_channel, unpack, unpack_source_channel, zero_insert};
use crate::tensor::{alloc_stats, reset_peak, Tensor};
use crate::weights::WeightStore;

pub const CSV_HEADER: &str = "op,shape,alpha,reps,median_s,mean_s,peak_bytes,params";
pub const MIN_REPS: usize = 5;
pub const WARMUP: usize = 2;

/// LR input shapes `(h, w, c)` of the operator comparison at α = 2.
pub const REFERENCE_SHAPES: [[usize; 3]; 3] = [[1024, 1024, 32], [256, 256, 128], [32, 32, 512]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    Unpack,
    PixelShuffle,
    TransposedConv,
    Interp,
}

impl BenchOp {
    pub const ALL: [BenchOp; 4] = [BenchOp::Unpack, BenchOp::PixelShuffle, BenchOp::TransposedConv, BenchOp::Interp];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Unpack => "unpack",
            BenchOp::PixelShuffle => "pixel_shuffle",
            BenchOp::TransposedConv => "transposed_conv",
            BenchOp::Interp => "interp",
        }
    }
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    /// Operator name, suffixed with `[par=N]` when run on N > 1 threads.
    pub op: String,
    pub shape: Vec<usize>,
    pub alpha: usize,
    pub reps: usize,
    pub median_s: f64,
    /// Mean after dropping the fastest and slowest 10% (at least one each).
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub peak_bytes: u64,
    pub params: usize,
}

impl BenchResult {
    pub fn csv_row(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{:.6e},{:.6e},{},{}",
            self.op,
            shape.join("x"),
            self.alpha,
            self.reps,
            self.median_s,
            self.mean_s,
            self.peak_bytes,
            self.params
        )
    }
}

pub fn csv(results: &[BenchResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub reps: usize,
    /// Worker threads; 1 runs single-threaded.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 7,
            threads: 1,
            seed: 0,
        }
    }
}

/// Kernel `[α, α, c, c/α²]` and bias of the transposed-convolution baseline.
pub fn transposed_conv_kernel(channels: usize, alpha: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let cout = out_channels(channels, alpha)?;
    Ok((he_init(&[alpha, alpha, channels, cout], seed)?, Tensor::zeros(&[cout])?))
}

/// `kh·kw·Cin·Cout + Cout` for the baseline kernel.
pub fn transposed_conv_params(channels: usize, alpha: usize) -> Result<usize> {
    let cout = out_channels(channels, alpha)?;
    Ok(alpha * alpha * channels * cout + cout)
}

fn out_channels(channels: usize, alpha: usize) -> Result<usize> {
    let a2 = alpha * alpha;
    if alpha == 0 || channels % a2 != 0 {
        return Err(Error::shape(format!("{channels} channels not divisible by {alpha}^2")));
    }
    Ok(channels / a2)
}

struct Prepared {
    op: BenchOp,
    alpha: usize,
    kernel: Option<(Tensor, Tensor)>,
}

impl Prepared {
    fn new(op: BenchOp, channels: usize, alpha: usize, seed: u64) -> Result<Self> {
        let kernel = match op {
            BenchOp::TransposedConv => Some(transposed_conv_kernel(channels, alpha, seed)?),
            _ => {
                out_channels(channels, alpha)?;
                None
            }
        };
        Ok(Prepared { op, alpha, kernel })
    }

    fn params(&self) -> usize {
        self.kernel.as_ref().map_or(0, |(w, b)| w.len() + b.len())
    }

    fn run(&self, x: &Tensor) -> Result<Tensor> {
        match self.op {
            BenchOp::Unpack => unpack(x, self.alpha),
            BenchOp::PixelShuffle => pixel_shuffle(x, self.alpha),
            BenchOp::Interp => interpolate_nearest(x, self.alpha),
            BenchOp::TransposedConv => {
                let (w, b) = self.kernel.as_ref().expect("prepared");
                transposed_conv2d(x, w, Some(b), self.alpha, 0)
            }
        }
    }

    fn reference(&self, x: &Tensor) -> Result<Tensor> {
        match self.op {
            BenchOp::Unpack => reference_unpack(x, self.alpha),
            BenchOp::PixelShuffle => reference_pixel_shuffle(x, self.alpha),
            BenchOp::Interp => reference_interp(x, self.alpha),
            BenchOp::TransposedConv => {
                let (w, b) = self.kernel.as_ref().expect("prepared");
                reference_transposed_conv(x, w, Some(b), self.alpha, 0)
            }
        }
    }
}

/// Direct index-map evaluation of `unpack`.
pub fn reference_unpack(x: &Tensor, alpha: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let g = out_channels(c, alpha)?;
    let mut out = Tensor::zeros(&[h * alpha, w * alpha, g])?;
    let d = out.data_mut();
    for y in 0..h * alpha {
        for xx in 0..w * alpha {
            for ch in 0..g {
                let src = unpack_source_channel(ch, y % alpha, xx % alpha, g, alpha);
                d[(y * w * alpha + xx) * g + ch] = x.at(&[y / alpha, xx / alpha, src]);
            }
        }
    }
    Ok(out)
}

/// Direct index-map evaluation of `pixel_shuffle`.
pub fn reference_pixel_shuffle(x: &Tensor, alpha: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let g = out_channels(c, alpha)?;
    let mut out = Tensor::zeros(&[h * alpha, w * alpha, g])?;
    let d = out.data_mut();
    for y in 0..h * alpha {
        for xx in 0..w * alpha {
            for ch in 0..g {
                let src = pixel_shuffle_source_channel(ch, y % alpha, xx % alpha, alpha);
                d[(y * w * alpha + xx) * g + ch] = x.at(&[y / alpha, xx / alpha, src]);
            }
        }
    }
    Ok(out)
}

pub fn reference_interp(x: &Tensor, alpha: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let mut out = Tensor::zeros(&[h * alpha, w * alpha, c])?;
    let d = out.data_mut();
    for y in 0..h * alpha {
        for xx in 0..w * alpha {
            for ch in 0..c {
                d[(y * w * alpha + xx) * c + ch] = x.at(&[y / alpha, xx / alpha, ch]);
            }
        }
    }
    Ok(out)
}

/// Transposed convolution as zero insertion followed by a full correlation
/// with the spatially flipped kernel, accumulated in f64.
pub fn reference_transposed_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (h, wd, _) = x.hwc()?;
    let z = zero_insert(x, stride)?;
    let (zh, zw, cin) = z.hwc()?;
    let (k, cout) = match *w.dims() {
        [k, k2, ci, co] if k == k2 && ci == cin => (k, co),
        _ => return Err(Error::shape(format!("kernel {:?} does not fit input {:?}", w.dims(), x.dims()))),
    };
    let ho = (h - 1) * stride + k - 2 * padding;
    let wo = (wd - 1) * stride + k - 2 * padding;
    let mut out = Vec::with_capacity(ho * wo * cout);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..cout {
                let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                for u in 0..k {
                    for v in 0..k {
                        let (ty, tx) = (oy + padding, ox + padding);
                        if ty < u || tx < v || ty - u >= zh || tx - v >= zw {
                            continue;
                        }
                        for i in 0..cin {
                            acc += z.at(&[ty - u, tx - v, i]) as f64 * w.at(&[u, v, i, o]) as f64;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    Tensor::from_vec(&[ho, wo, cout], out)
}

fn random_input(dims: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random::<f32>()).collect())
}

fn crop_lr(x: &Tensor, size: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let (ch, cw) = (size.min(h), size.min(w));
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in 0..ch {
        out.extend_from_slice(&x.data()[y * w * c..(y * w + cw) * c]);
    }
    Tensor::from_vec(&[ch, cw, c], out)
}

/// Runs `f` on a pool of `threads` workers (or inline-sized pool of one).
fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

struct Timing {
    median: f64,
    trimmed_mean: f64,
    min: f64,
    max: f64,
    peak: u64,
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<Timing> {
    for _ in 0..WARMUP {
        black_box(f()?);
    }
    let base = alloc_stats().current_bytes;
    reset_peak();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let y = f()?;
        times.push(t0.elapsed().as_secs_f64());
        black_box(&y);
    }
    let peak = alloc_stats().peak_bytes.saturating_sub(base);
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    let trim = (n / 10).max(1);
    let kept = &times[trim..n - trim];
    Ok(Timing {
        median,
        trimmed_mean: kept.iter().sum::<f64>() / kept.len() as f64,
        min: times[0],
        max: times[n - 1],
        peak,
    })
}

fn label(name: &str, threads: usize) -> String {
    if threads > 1 {
        format!("{name}[par={threads}]")
    } else {
        name.to_string()
    }
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("at least {MIN_REPS} repetitions are required, got {reps}")));
    }
    Ok(())
}

/// Times one upsampler on an `h x w x c` LR input. The operator is first
/// checked against its reference on an 8x8 crop.
pub fn bench_op(op: BenchOp, shape: [usize; 3], alpha: usize, opts: BenchOptions) -> Result<BenchResult> {
    check_reps(opts.reps)?;
    let prepared = Prepared::new(op, shape[2], alpha, opts.seed ^ 0x7C0F)?;
    in_pool(opts.threads, || -> Result<BenchResult> {
        let x = random_input(&shape, opts.seed)?;
        let small = crop_lr(&x, 8)?;
        let got = prepared.run(&small)?;
        let want = prepared.reference(&small)?;
        let tol = if op == BenchOp::TransposedConv { 1e-5 } else { 0.0 };
        let ok = got.dims() == want.dims()
            && got.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= tol * (1.0 + b.abs()));
        if !ok {
            return Err(Error::Contract(format!("{op} disagrees with its reference implementation")));
        }
        let t = time_reps(opts.reps, || prepared.run(&x))?;
        Ok(BenchResult {
            op: label(op.name(), opts.threads),
            shape: shape.to_vec(),
            alpha,
            reps: opts.reps,
            median_s: t.median,
            mean_s: t.trimmed_mean,
            min_s: t.min,
            max_s: t.max,
            peak_bytes: t.peak,
            params: prepared.params(),
        })
    })?
}

/// End-to-end inference latency and peak tracked allocation on a random
/// dark input of `dims`. `alpha` in the result is the total downsampling.
pub fn bench_forward(config: &ModelConfig, weights: &WeightStore, dims: &[usize], opts: BenchOptions) -> Result<BenchResult> {
    check_reps(opts.reps)?;
    config.check_input(dims)?;
    in_pool(opts.threads, || -> Result<BenchResult> {
        let x = random_input(dims, opts.seed)?.map(|v| v * 0.01);
        let t = time_reps(opts.reps, || model::forward(&x, weights, config, Amplification::Auto))?;
        Ok(BenchResult {
            op: label("forward", opts.threads),
            shape: dims.to_vec(),
            alpha: config.total_downsampling(),
            reps: opts.reps,
            median_s: t.median,
            mean_s: t.trimmed_mean,
            min_s: t.min,
            max_s: t.max,
            peak_bytes: t.peak,
            params: weights.param_count(),
        })
    })?
}

/// A single timed forward pass with its peak tracked allocation.
pub fn measure_forward_once(input: &Tensor, weights: &WeightStore, config: &ModelConfig, amp: Amplification) -> Result<(Tensor, f64, u64)> {
    let base = alloc_stats().current_bytes;
    reset_peak();
    let t0 = Instant::now();
    let y = model::forward(input, weights, config, amp)?;
    let secs = t0.elapsed().as_secs_f64();
    let peak = alloc_stats().peak_bytes.saturating_sub(base);
    Ok((y, secs, peak))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in BenchOp::ALL {
            assert_eq!(op.name().parse::<BenchOp>().unwrap(), op);
        }
        assert!(matches!("deconv".parse::<BenchOp>(), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn param_counts() {
        assert_eq!(transposed_conv_params(32, 2).unwrap(), 1032);
        assert_eq!(transposed_conv_params(128, 2).unwrap(), 16416);
        assert_eq!(transposed_conv_params(512, 2).unwrap(), 262_272);
    }

    #[test]
    fn small_bench_runs_and_formats() {
        let opts = BenchOptions { reps: 5, threads: 1, seed: 3 };
        for op in BenchOp::ALL {
            let r = bench_op(op, [16, 16, 8], 2, opts).unwrap();
            assert!(r.min_s <= r.median_s && r.median_s <= r.max_s);
            assert_eq!(r.params, if op == BenchOp::TransposedConv { 2 * 2 * 8 * 2 + 2 } else { 0 });
            assert!(r.peak_bytes > 0);
            assert!(r.csv_row().starts_with(&format!("{},16x16x8,2,5,", op.name())));
        }
        let par = bench_op(BenchOp::Unpack, [16, 16, 8], 2, BenchOptions { threads: 2, ..opts }).unwrap();
        assert_eq!(par.op, "unpack[par=2]");
        assert!(bench_op(BenchOp::Unpack, [16, 16, 8], 2, BenchOptions { reps: 4, ..opts }).is_err());
    }
}
