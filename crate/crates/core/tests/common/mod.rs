#![allow(dead_code)]

use llpack::autodiff::{Tape, Var};
use llpack::graph::Graph;
use llpack::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(dims: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Distinct values spaced `step` apart, shuffled: no two elements (and so no
/// neighbour difference) lie within `step` of each other.
pub fn distinct(dims: &[usize], offset: f32, step: f32, seed: u64) -> Tensor {
    let n: usize = dims.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng(seed);
    for i in (1..n).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(dims, idx.iter().map(|&k| offset + step * k as f32).collect()).unwrap()
}

/// Values bounded away from zero by `margin`, with random signs.
pub fn away_from_zero(dims: &[usize], margin: f32, hi: f32, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = dims.iter().product();
    Tensor::from_vec(
        dims,
        (0..n)
            .map(|_| {
                let m = r.random_range(margin..hi);
                if r.random::<bool>() { m } else { -m }
            })
            .collect(),
    )
    .unwrap()
}

pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

/// Compares reverse-mode gradients of `Σ r ⊙ f(inputs)` (random fixed `r`)
/// with central differences of step `h`, evaluated in f64 from the f32
/// forward values, less a bound on f32 rounding. Inputs flagged `false` in `diff` are held constant.
/// At most `max_elems` elements per input are probed.
/// Returns the worst relative error seen.
pub fn check_grad(
    name: &str,
    inputs: &[Tensor],
    diff: &[bool],
    h: f32,
    max_elems: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> GradReport {
    let build = |xs: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().zip(diff).map(|(t, &d)| tape.leaf(t.clone(), d)).collect();
        let y = f(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
        (tape, vars, y)
    };
    let (mut tape, vars, y) = build(inputs);
    let ydims = tape.value(&y).dims().to_vec();
    let r = uniform(&ydims, -1.0, 1.0, 0xFD);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(&y, &rv).unwrap();
    let root = tape.sum(&prod);
    let grads = tape.backward(root).unwrap();

    // Returns the objective and the magnitude used to bound its f32 rounding.
    let objective = |xs: &[Tensor]| -> (f64, f64) {
        let (tape, _, y) = build(xs);
        let yv = tape.value(&y);
        yv.data().iter().zip(r.data()).fold((0.0, 0.0), |(s, m), (&a, &b)| {
            let t = a as f64 * b as f64;
            (s + t, m + t.abs())
        })
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, x) in inputs.iter().enumerate() {
        if !diff[i] {
            continue;
        }
        let g = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.dims()).unwrap());
        assert_eq!(g.dims(), x.dims(), "{name}: gradient shape");
        // Gradients far below the tensor's largest one are compared against
        // that scale, since f32 forward rounding swamps them in the differences.
        let floor = 1e-2 * g.data().iter().fold(0.0f64, |m, &v| m.max(v.abs() as f64));
        let stride = x.len().div_ceil(max_elems).max(1);
        for j in (0..x.len()).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            // Use the actually represented step.
            let step = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            let (fp, mp) = objective(&plus);
            let (fm, mm) = objective(&minus);
            let numeric = (fp - fm) / step;
            let analytic = g.data()[j] as f64;
            // Rounding of the f32 forward pass, a few ulps of each evaluation.
            let noise = 8.0 * f32::EPSILON as f64 * (mp + mm) / step;
            let err = ((numeric - analytic).abs() - noise).max(0.0);
            let rel = if err <= 1e-6 {
                0.0
            } else {
                err / numeric.abs().max(analytic.abs()).max(floor)
            };
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradReport {
        name: name.to_string(),
        checked,
        max_rel,
    }
}

use llpack::amplifier::{self, AmplifierParams, AmplifierRange};
use llpack::filters::gaussian_taps;
use llpack::model::{self, Amplification, Bound, ModelConfig};
use llpack::nnops::ConvGeometry;
use llpack::objective::{self, FeatureExtractor, Objective};

fn one(
    out: &mut Vec<GradReport>,
    name: &str,
    inputs: Vec<Tensor>,
    h: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let diff = vec![true; inputs.len()];
    out.push(check_grad(name, &inputs, &diff, h, 512, f));
}

/// Finite-difference checks of every differentiable operator, the loss
/// terms, the full objective and a small end-to-end network.
pub fn gradient_suite() -> Vec<GradReport> {
    let mut out = Vec::new();
    let lin = 0.05; // step for piecewise-linear or linear maps
    let a = uniform(&[4, 4, 3], -1.0, 1.0, 1);
    let b = uniform(&[4, 4, 3], -1.0, 1.0, 2);

    one(&mut out, "add", vec![a.clone(), b.clone()], lin, |g, x| g.add(&x[0], &x[1]));
    one(&mut out, "sub", vec![a.clone(), b.clone()], lin, |g, x| g.sub(&x[0], &x[1]));
    one(&mut out, "mul", vec![a.clone(), b.clone()], 1e-2, |g, x| g.mul(&x[0], &x[1]));
    one(&mut out, "scale", vec![a.clone()], lin, |g, x| Ok(g.scale(&x[0], 1.7)));
    one(&mut out, "scale_by", vec![a.clone(), Tensor::scalar(0.8)], 1e-2, |g, x| g.scale_by(&x[0], &x[1]));
    one(&mut out, "abs", vec![away_from_zero(&[4, 4, 3], 0.1, 1.0, 3)], lin, |g, x| Ok(g.abs(&x[0])));
    one(&mut out, "exp", vec![a.clone()], 1e-3, |g, x| Ok(g.exp(&x[0])));
    one(&mut out, "clamp", vec![distinct(&[4, 4, 3], -0.5, 0.013, 4)], 1e-3, |g, x| Ok(g.clamp(&x[0], -0.3, 0.05)));
    one(&mut out, "sum", vec![a.clone()], lin, |g, x| Ok(g.sum(&x[0])));
    one(&mut out, "mean", vec![a.clone()], lin, |g, x| Ok(g.mean(&x[0])));
    one(&mut out, "reshape", vec![a.clone()], lin, |g, x| g.reshape(&x[0], &[8, 6]));
    one(&mut out, "leaky_relu", vec![away_from_zero(&[4, 4, 3], 0.1, 1.0, 5)], lin, |g, x| {
        Ok(g.leaky_relu(&x[0], 0.2))
    });

    let x5 = uniform(&[5, 5, 2], -1.0, 1.0, 6);
    let w3 = uniform(&[3, 3, 2, 3], -0.5, 0.5, 7);
    let b3 = uniform(&[3], -0.5, 0.5, 8);
    one(&mut out, "conv2d 3x3", vec![x5.clone(), w3.clone(), b3.clone()], lin, |g, x| {
        g.conv2d(&x[0], &x[1], Some(&x[2]), ConvGeometry::same(3))
    });
    one(&mut out, "conv2d stride 2", vec![uniform(&[6, 6, 2], -1.0, 1.0, 9), w3.clone(), b3.clone()], lin, |g, x| {
        g.conv2d(&x[0], &x[1], Some(&x[2]), ConvGeometry { stride: 2, padding: 1 })
    });
    one(&mut out, "conv2d 1x1", vec![x5.clone(), uniform(&[1, 1, 2, 4], -1.0, 1.0, 10)], lin, |g, x| {
        g.conv2d(&x[0], &x[1], None, ConvGeometry::same(1))
    });
    one(
        &mut out,
        "transposed_conv2d 2x2/2",
        vec![uniform(&[3, 3, 4], -1.0, 1.0, 11), uniform(&[2, 2, 4, 2], -1.0, 1.0, 12), uniform(&[2], -1.0, 1.0, 13)],
        lin,
        |g, x| g.transposed_conv2d(&x[0], &x[1], Some(&x[2]), 2, 0),
    );
    one(
        &mut out,
        "transposed_conv2d 3x3/2 pad 1",
        vec![uniform(&[3, 3, 2], -1.0, 1.0, 14), uniform(&[3, 3, 2, 2], -1.0, 1.0, 15)],
        lin,
        |g, x| g.transposed_conv2d(&x[0], &x[1], None, 2, 1),
    );
    one(&mut out, "interpolate_nearest", vec![uniform(&[3, 3, 2], -1.0, 1.0, 16)], lin, |g, x| {
        g.interpolate_nearest(&x[0], 2)
    });
    one(
        &mut out,
        "linear",
        vec![uniform(&[8], -1.0, 1.0, 17), uniform(&[8, 5], -1.0, 1.0, 18), uniform(&[5], -1.0, 1.0, 19)],
        lin,
        |g, x| g.linear(&x[0], &x[1], &x[2]),
    );
    one(&mut out, "concat_channels", vec![uniform(&[4, 4, 2], -1.0, 1.0, 20), a.clone()], lin, |g, x| {
        g.concat_channels(&[x[0], x[1]])
    });
    one(&mut out, "slice_channels", vec![uniform(&[4, 4, 5], -1.0, 1.0, 21)], lin, |g, x| {
        g.slice_channels(&x[0], 1, 3)
    });
    one(&mut out, "pack", vec![uniform(&[4, 4, 3], -1.0, 1.0, 22)], lin, |g, x| g.pack(&x[0], 2));
    one(&mut out, "unpack", vec![uniform(&[2, 2, 12], -1.0, 1.0, 23)], lin, |g, x| g.unpack(&x[0], 2));
    one(&mut out, "pixel_shuffle", vec![uniform(&[2, 2, 12], -1.0, 1.0, 24)], lin, |g, x| g.pixel_shuffle(&x[0], 2));
    one(&mut out, "permute_channels", vec![uniform(&[3, 3, 4], -1.0, 1.0, 25)], lin, |g, x| {
        g.permute_channels(&x[0], &[2, 0, 3, 1])
    });
    one(&mut out, "avg_pool2", vec![uniform(&[5, 5, 2], -1.0, 1.0, 26)], lin, |g, x| g.avg_pool2(&x[0]));
    let taps = gaussian_taps(11, 3.0).unwrap();
    one(&mut out, "blur", vec![uniform(&[6, 7, 2], -1.0, 1.0, 27)], lin, move |g, x| g.blur(&x[0], &taps));
    one(&mut out, "tv", vec![distinct(&[4, 4, 3], 0.0, 0.02, 28)], 1e-3, |g, x| g.tv(&x[0]));

    // Amplifier: hidden pre-activations and exp(z) kept inside the linear pieces.
    let hist = uniform(&[8], 0.0, 0.25, 29);
    let w1 = uniform(&[8, 6], -1.0, 1.0, 30);
    let b1 = away_from_zero(&[6], 0.3, 0.6, 31);
    let w2 = uniform(&[6, 1], -0.3, 0.3, 32);
    let b2 = Tensor::from_vec(&[1], vec![20f32.ln()]).unwrap();
    one(&mut out, "amplification", vec![hist, w1, b1, w2, b2], 1e-3, |g, x| {
        let p = AmplifierParams {
            w1: x[1],
            b1: x[2],
            w2: x[3],
            b2: x[4],
        };
        amplifier::amplification(g, &x[0], &p, AmplifierRange::default())
    });

    let fe = FeatureExtractor::default();
    let ia = uniform(&[8, 8, 3], 0.0, 1.0, 33);
    let ib = uniform(&[8, 8, 3], 0.0, 1.0, 34);
    one(&mut out, "feature_loss", vec![ia.clone(), ib.clone()], 1e-3, move |g, x| {
        objective::feature_loss_in(g, &x[0], &x[1], &fe)
    });
    let taps = gaussian_taps(11, 3.0).unwrap();
    one(&mut out, "smoothed_l1", vec![ia.clone(), ib.clone()], 1e-3, move |g, x| {
        objective::smoothed_l1_in(g, &x[0], &x[1], &taps)
    });
    one(&mut out, "l1", vec![ia, ib], 1e-3, |g, x| objective::l1_in(g, &x[0], &x[1]));

    // The whole objective on a 4x4 toy pair, default weights, step 1e-3.
    let toy_out = distinct(&[4, 4, 3], 0.1, 0.015, 35);
    let toy_gt = toy_out.zip_map(&away_from_zero(&[4, 4, 3], 0.01, 0.05, 36), |o, d| o + d).unwrap();
    let wparams = away_from_zero(&[6], 0.01, 1.0, 37);
    let obj = Objective::default();
    let report = check_grad(
        "loss_total",
        &[toy_gt, toy_out, wparams],
        &[false, true, true],
        1e-3,
        512,
        move |g, x| Ok(objective::loss_total_in(g, &x[0], &x[1], &[x[2]], &obj)?.total),
    );
    out.push(report);

    out.push(network_gradient());
    out
}

/// Objective through a small RGB network, probing a sample of every parameter tensor.
fn network_gradient() -> GradReport {
    let cfg = ModelConfig {
        alpha_inner: 4,
        trunk_channels: 6,
        rdn_blocks: 1,
        rdn_layers: 2,
        growth: 4,
        amplifier_hidden: 4,
        ..ModelConfig::rgb4()
    };
    let store = model::build(&cfg, 3).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let dark = uniform(&[8, 8, 3], 0.002, 0.006, 38);
    let gt = uniform(&[8, 8, 3], 0.2, 0.8, 39);
    inputs.push(dark);
    inputs.push(gt);
    let mut diff: Vec<bool> = names.iter().map(|n| !n.starts_with("amplifier/")).collect();
    diff.push(false);
    diff.push(false);
    let n = names.len();
    let obj = Objective::default();
    check_grad("network objective", &inputs, &diff, 1e-3, 6, move |g, x| {
        let bound = Bound::from_values(names.iter().cloned().zip(x[..n].iter().copied()));
        let y = model::forward_graph(g, &x[n], &bound, &cfg, Amplification::Fixed(100.0), None)?;
        let params: Vec<Var> = x[..n].to_vec();
        Ok(objective::loss_total_in(g, &x[n + 1], &y, &params, &obj)?.total)
    })
}
