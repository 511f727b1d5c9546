//! `llpack` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or runtime failure, 2 file format error,
//! 3 shape or configuration mismatch.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use llpack::bench::{self, BenchOp, BenchOptions, BenchResult, REFERENCE_SHAPES};
use llpack::dataio::{self, Layout, NoiseModel, SynthOptions, DEFAULT_BLACK, DEFAULT_WHITE};
use llpack::model::{self, Amplification, InputKind, ModelConfig};
use llpack::rearrange::BayerPhase;
use llpack::tensor::{alloc_stats, reset_peak};
use llpack::trainer::{self, AmpMode, TrainOptions, Trainer, DEFAULT_CLIP_NORM};
use llpack::weights::{load_weights, save_weights};
use llpack::Error;

#[derive(Parser)]
#[command(name = "llpack", version, about = "Low-light image enhancement with Pack/UnPack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance one dark image with trained weights.
    Enhance(EnhanceArgs),
    /// Train a model on a synthetic dataset directory.
    Train(TrainArgs),
    /// Time upsampling operators or the full forward pass.
    Bench(BenchArgs),
    /// Generate a synthetic dark/bright dataset.
    Synth(SynthArgs),
    /// Count the receptive field of Pack alpha followed by a 3x3 convolution.
    ProbeRf(ProbeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Bayer8,
    Rgb8,
    Rgb4,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Bayer8 => ModelConfig::bayer8(),
            Preset::Rgb8 => ModelConfig::rgb8(),
            Preset::Rgb4 => ModelConfig::rgb4(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Bayer,
    Rgb,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Dark input: 16-bit PGM mosaic for bayer8, PPM for the RGB configs.
    #[arg(long)]
    input: PathBuf,
    /// Weight file (.llpk).
    #[arg(long)]
    weights: PathBuf,
    /// Output 8-bit PPM.
    #[arg(long)]
    output: PathBuf,
    /// `auto` for the learned amplifier, or a fixed factor >= 1.
    #[arg(long, default_value = "auto")]
    amplify: String,
    /// Model configuration the weights were trained for.
    #[arg(long, value_enum, default_value = "bayer8")]
    config: Preset,
    /// Black level of PGM input, in ADU.
    #[arg(long, default_value_t = DEFAULT_BLACK)]
    black: u32,
    /// White level of PGM input, in ADU.
    #[arg(long, default_value_t = DEFAULT_WHITE)]
    white: u32,
    /// Bayer phase of PGM input.
    #[arg(long, default_value = "rggb")]
    phase: BayerPhase,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for weights.llpk, curve.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Model configuration to train.
    #[arg(long, value_enum, default_value = "bayer8")]
    config: Preset,
    /// Total optimizer steps, counted from zero even when resuming.
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    /// Seed for initialization, sample order and crops.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square crop size; 0 trains on whole images.
    #[arg(long, default_value_t = 512)]
    patch: usize,
    /// `auto` trains the amplifier jointly, `gt` uses each pair's exposure ratio.
    #[arg(long, default_value = "auto", value_parser = ["auto", "gt"])]
    amplify: String,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    /// Loss weights l1,feat,smooth,tv,wl1.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f32, 3.0, 1.0, 400.0, 1e-6])]
    loss_weights: Vec<f32>,
    /// Clip gradients to a global norm of 5.
    #[arg(long)]
    clip: bool,
    /// Save a checkpoint every N iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Operators: unpack, pixel_shuffle, transposed_conv, interp (default: all).
    #[arg(long, value_delimiter = ',')]
    op: Vec<String>,
    /// LR input shapes as HxWxC (default: the three reference shapes).
    #[arg(long, value_delimiter = ',')]
    shape: Vec<String>,
    /// Upsampling factor.
    #[arg(long, default_value_t = 2)]
    alpha: usize,
    /// Timed repetitions per row (median reported).
    #[arg(long, default_value_t = 7)]
    reps: usize,
    /// Worker threads for the timed operators.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Time the full forward pass on an HxW input instead of single operators.
    #[arg(long)]
    forward: Option<String>,
    /// Model configuration for --forward.
    #[arg(long, value_enum, default_value = "bayer8")]
    config: Preset,
    /// Weights for --forward (default: He initialization from --seed).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for the random inputs and initial weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Image height in pixels.
    #[arg(long, default_value_t = 64)]
    height: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Dark inputs as Bayer mosaics or RGB images.
    #[arg(long, value_enum, default_value = "bayer")]
    kind: Kind,
    /// Bayer phase of the mosaics.
    #[arg(long, default_value = "rggb")]
    phase: BayerPhase,
    /// Exposure ratios, cycled over the pairs.
    #[arg(long, value_delimiter = ',', default_values_t = [50.0f32, 100.0, 250.0])]
    factors: Vec<f32>,
    /// Read-noise standard deviation.
    #[arg(long, default_value_t = 2e-4)]
    read_sigma: f32,
    /// Shot-noise variance per unit signal.
    #[arg(long, default_value_t = 1e-4)]
    shot_gain: f32,
    /// Black level of the written 16-bit mosaics, in ADU.
    #[arg(long, default_value_t = DEFAULT_BLACK)]
    black: u32,
    /// White level of the written 16-bit mosaics, in ADU.
    #[arg(long, default_value_t = DEFAULT_WHITE)]
    white: u32,
    /// Seed for scenes and noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Pack factor.
    #[arg(long, default_value_t = 10)]
    alpha: usize,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => 2,
            Error::Shape(_) | Error::Config(_) | Error::Weight(_) | Error::Domain(_) => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult = Result<(), Failure>;

fn parse_amplify(s: &str) -> Result<Amplification, Failure> {
    if s == "auto" {
        return Ok(Amplification::Auto);
    }
    match s.parse::<f32>() {
        Ok(k) if k.is_finite() && k >= 1.0 => Ok(Amplification::Fixed(k)),
        _ => Err(usage(format!("--amplify must be `auto` or a number >= 1, got `{s}`"))),
    }
}

fn parse_dims(s: &str, n: usize) -> Result<Vec<usize>, Failure> {
    let dims: Option<Vec<usize>> = s.split('x').map(|p| p.trim().parse().ok()).collect();
    match dims {
        Some(d) if d.len() == n && d.iter().all(|&v| v > 0) => Ok(d),
        _ => Err(usage(format!("expected {n} positive sizes separated by `x`, got `{s}`"))),
    }
}

fn enhance(a: EnhanceArgs) -> CliResult {
    let cfg = a.config.config();
    let amp = parse_amplify(&a.amplify)?;
    let weights = load_weights(&a.weights)?;
    model::check_weights(&cfg, &weights)?;
    let input = match cfg.input_kind {
        InputKind::BayerRaw => dataio::read_bayer_pgm(&a.input, a.black, a.white, a.phase)?.data,
        InputKind::Rgb => dataio::read_rgb(&a.input)?,
    };
    let cfg = ModelConfig {
        bayer_phase: a.phase,
        ..cfg
    };
    let k = model::resolve_amplification(&input, &weights, &cfg, amp)?;
    let base = alloc_stats().current_bytes;
    reset_peak();
    let t0 = Instant::now();
    let out = model::forward(&input, &weights, &cfg, Amplification::Fixed(k))?;
    let secs = t0.elapsed().as_secs_f64();
    let peak = alloc_stats().peak_bytes.saturating_sub(base);
    dataio::write_rgb(&a.output, &out)?;
    let (h, w, _) = out.hwc()?;
    println!("amplification: {k}");
    println!("output: {}x{} -> {}", w, h, a.output.display());
    println!("latency: {secs:.3} s");
    println!("peak tracked allocation: {peak} bytes");
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let model = a.config.config();
    let data = dataio::load_dataset(&a.data)?;
    let mut objective = llpack::objective::Objective::default();
    let [l1, feature, smooth, tv, weight_l1] = a.loss_weights[..] else {
        return Err(usage("--loss-weights needs exactly five values"));
    };
    objective.weights = llpack::objective::LossWeights {
        l1,
        feature,
        smooth,
        tv,
        weight_l1,
    };
    objective.weights.validate()?;
    let mut opts = TrainOptions {
        iters: a.iters,
        seed: a.seed,
        patch: (a.patch > 0).then_some(a.patch),
        amp: if a.amplify == "gt" { AmpMode::GtExposure } else { AmpMode::Auto },
        clip_norm: a.clip.then_some(DEFAULT_CLIP_NORM),
        objective,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.join("checkpoints")),
        ..TrainOptions::new(model)
    };
    opts.adam.lr = a.lr;
    std::fs::create_dir_all(&a.out).map_err(Error::from)?;
    let mut t = match &a.resume {
        Some(path) => Trainer::resume_from(opts, path)?,
        None => Trainer::new(opts)?,
    };
    let t0 = Instant::now();
    let log_every = (a.iters / 20).max(1);
    while t.iteration() < t.options.iters {
        let row = t.step(&data)?;
        if row.iter % log_every == 0 || t.iteration() == t.options.iters {
            println!(
                "iter {:>6}  total {:.5}  l1 {:.5}  feat {:.5}  smooth {:.5}  tv {:.5}  wl1 {:.1}  {:.1}s",
                row.iter,
                row.total,
                row.l1,
                row.feat,
                row.smooth,
                row.tv,
                row.wl1,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    save_weights(&t.weights, a.out.join("weights.llpk"))?;
    std::fs::write(a.out.join("curve.csv"), trainer::curve_csv(&t.curve)).map_err(Error::from)?;
    println!("weights: {}", a.out.join("weights.llpk").display());
    Ok(())
}

fn bench(a: BenchArgs) -> CliResult {
    let opts = BenchOptions {
        reps: a.reps,
        threads: a.threads,
        seed: a.seed,
    };
    let mut results: Vec<BenchResult> = Vec::new();
    if let Some(dims) = &a.forward {
        if !a.op.is_empty() || !a.shape.is_empty() {
            return Err(usage("--forward cannot be combined with --op or --shape"));
        }
        let cfg = a.config.config();
        let hw = parse_dims(dims, 2)?;
        let c = if cfg.input_kind == InputKind::Rgb { 3 } else { 1 };
        let weights = match &a.weights {
            Some(p) => load_weights(p)?,
            None => model::build(&cfg, a.seed)?,
        };
        results.push(bench::bench_forward(&cfg, &weights, &[hw[0], hw[1], c], opts)?);
    } else {
        let ops: Vec<BenchOp> = if a.op.is_empty() {
            BenchOp::ALL.to_vec()
        } else {
            a.op.iter()
                .map(|s| s.parse::<BenchOp>().map_err(|e| usage(e.to_string())))
                .collect::<Result<_, _>>()?
        };
        let shapes: Vec<[usize; 3]> = if a.shape.is_empty() {
            REFERENCE_SHAPES.to_vec()
        } else {
            a.shape
                .iter()
                .map(|s| parse_dims(s, 3).map(|d| [d[0], d[1], d[2]]))
                .collect::<Result<_, _>>()?
        };
        for shape in &shapes {
            for &op in &ops {
                results.push(bench::bench_op(op, *shape, a.alpha, opts)?);
            }
        }
    }
    let csv = bench::csv(&results);
    match &a.output {
        Some(p) => std::fs::write(p, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let opts = SynthOptions {
        count: a.count,
        height: a.height,
        width: a.width,
        factors: a.factors,
        noise: NoiseModel {
            read_sigma: a.read_sigma,
            shot_gain: a.shot_gain,
        },
        layout: match a.kind {
            Kind::Bayer => Layout::Bayer(a.phase),
            Kind::Rgb => Layout::Rgb,
        },
        black: a.black,
        white: a.white,
        seed: a.seed,
    };
    let m = dataio::generate_dataset(&a.out, &opts)?;
    println!("{} pairs written to {}", m.count, a.out.display());
    Ok(())
}

fn probe_rf(a: ProbeArgs) -> CliResult {
    println!("{}", model::count_receptive_field(a.alpha)?);
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("LLPACK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("LLPACK_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::Synth(a) => synth(a),
        Command::ProbeRf(a) => probe_rf(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("llpack: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
