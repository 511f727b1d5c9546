mod common;

use common::uniform;
use llpack::dataio::{synth_pair, Layout, NoiseModel, PairedSample, SynthOptions};
use llpack::model::{self, Amplification, InputKind, ModelConfig, Upsampler};
use llpack::rearrange::unpack_to_pixel_shuffle_permutation;
use llpack::trainer::{AmpMode, TrainOptions, Trainer};
use llpack::weights::WeightStore;
use llpack::Tensor;

fn tiny_rgb() -> ModelConfig {
    ModelConfig {
        trunk_channels: 12,
        rdn_blocks: 2,
        rdn_layers: 2,
        growth: 8,
        amplifier_hidden: 8,
        ..ModelConfig::rgb4()
    }
}

fn tiny_bayer() -> ModelConfig {
    ModelConfig {
        alpha_inner: 4,
        trunk_channels: 16,
        rdn_blocks: 1,
        rdn_layers: 2,
        growth: 8,
        amplifier_hidden: 8,
        ..ModelConfig::bayer8()
    }
}

fn dataset(layout: Layout, n: usize, side: usize) -> Vec<PairedSample> {
    let opts = SynthOptions {
        count: n,
        height: side,
        width: side,
        layout,
        ..SynthOptions::default()
    };
    (0..n).map(|i| synth_pair(&opts, i).unwrap()).collect()
}

fn options(cfg: ModelConfig, iters: u64) -> TrainOptions {
    TrainOptions {
        iters,
        patch: Some(16),
        amp: AmpMode::GtExposure,
        ..TrainOptions::new(cfg)
    }
}

/// Reorders the output channels of a conv so its result is permuted by `perm`.
fn permute_outputs(store: &mut WeightStore, prefix: &str, perm: &[usize]) {
    let w = store.require(&format!("{prefix}/weight")).unwrap().clone();
    let b = store.require(&format!("{prefix}/bias")).unwrap().clone();
    let cout = perm.len();
    let wd: Vec<f32> = w
        .data()
        .chunks(cout)
        .flat_map(|row| perm.iter().map(move |&p| row[p]))
        .collect();
    let bd: Vec<f32> = perm.iter().map(|&p| b.data()[p]).collect();
    store.insert(format!("{prefix}/weight"), Tensor::from_vec(w.dims(), wd).unwrap());
    store.insert(format!("{prefix}/bias"), Tensor::from_vec(b.dims(), bd).unwrap());
}

#[test]
fn pixel_shuffle_decoder_equals_unpack_after_permutation() {
    for cfg in [tiny_rgb(), tiny_bayer()] {
        let weights = model::build(&cfg, 4).unwrap();
        let f = cfg.total_downsampling();
        let c = if cfg.input_kind == InputKind::Rgb { 3 } else { 1 };
        let x = uniform(&[2 * f, 2 * f, c], 0.0, 0.01, 5);
        let amp = Amplification::Fixed(60.0);
        let y_unpack = model::forward(&x, &weights, &cfg, amp).unwrap();
        let ps_cfg = ModelConfig {
            upsampler: Upsampler::PixelShuffle,
            ..cfg.clone()
        };
        let y_ps = model::forward(&x, &weights, &ps_cfg, amp).unwrap();
        assert!(!y_ps.bit_eq(&y_unpack));
        let perm = unpack_to_pixel_shuffle_permutation(3 * cfg.alpha_inner * cfg.alpha_inner, cfg.alpha_inner).unwrap();
        let mut permuted = weights.clone();
        permute_outputs(&mut permuted, "decoder/expand", &perm);
        let y_perm = model::forward(&x, &permuted, &ps_cfg, amp).unwrap();
        assert!(y_perm.bit_eq(&y_unpack));
    }
}

#[test]
fn build_and_forward_are_deterministic() {
    let cfg = tiny_bayer();
    let a = model::build(&cfg, 9).unwrap();
    let b = model::build(&cfg, 9).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&model::build(&cfg, 10).unwrap()));
    let x = uniform(&[16, 16, 1], 0.0, 0.02, 3);
    let y1 = model::forward(&x, &a, &cfg, Amplification::Auto).unwrap();
    let y2 = model::forward(&x, &b, &cfg, Amplification::Auto).unwrap();
    assert!(y1.bit_eq(&y2));
    assert!(y1.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_iterations_keep_initialization() {
    let cfg = tiny_rgb();
    let data = dataset(Layout::Rgb, 2, 16);
    let t = llpack::trainer::train(options(cfg.clone(), 0), &data).unwrap();
    assert!(t.weights.bit_eq(&model::build(&cfg, 0).unwrap()));
    assert_eq!(t.iteration(), 0);
    assert!(t.curve.is_empty());
}

#[test]
fn resume_is_bit_identical() {
    let cfg = tiny_bayer();
    let data = dataset(Layout::Bayer(Default::default()), 3, 32);
    let mut straight = Trainer::new(options(cfg.clone(), 6)).unwrap();
    straight.run(&data).unwrap();

    let mut first = Trainer::new(options(cfg.clone(), 3)).unwrap();
    first.run(&data).unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let restored = WeightStore::from_bytes(&bytes).unwrap();
    let mut second = Trainer::resume(options(cfg, 6), &restored).unwrap();
    assert_eq!(second.iteration(), 3);
    second.run(&data).unwrap();

    assert!(second.weights.bit_eq(&straight.weights));
    assert_eq!(&straight.curve[3..], &second.curve[..]);
}

#[test]
fn checkpoints_are_written_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_rgb();
    let data = dataset(Layout::Rgb, 2, 16);
    let mut opts = options(cfg.clone(), 4);
    opts.checkpoint_every = 2;
    opts.checkpoint_dir = Some(dir.path().to_path_buf());
    let mut t = Trainer::new(opts.clone()).unwrap();
    t.run(&data).unwrap();
    for it in [2, 4] {
        let path = dir.path().join(format!("ckpt_{it:06}.llpk"));
        let r = Trainer::resume_from(opts.clone(), &path).unwrap();
        assert_eq!(r.iteration(), it);
    }
    let last = Trainer::resume_from(opts, dir.path().join("ckpt_000004.llpk")).unwrap();
    assert!(last.weights.bit_eq(&t.weights));
}

#[test]
fn joint_training_reaches_the_amplifier() {
    let cfg = tiny_bayer();
    let data = dataset(Layout::Bayer(Default::default()), 1, 32);
    let opts = TrainOptions {
        amp: AmpMode::Auto,
        ..options(cfg, 1)
    };
    let t = Trainer::new(opts).unwrap();
    let sample = t.sample_for(&data, 0).unwrap();
    let (_, grads) = t.evaluate(&sample).unwrap();
    let g = grads.require("amplifier/fc2/bias").unwrap();
    assert!(g.data()[0] != 0.0 && g.data()[0].is_finite());
}

#[test]
fn curve_rows_follow_iterations() {
    let cfg = tiny_rgb();
    let data = dataset(Layout::Rgb, 2, 16);
    let mut t = Trainer::new(options(cfg, 3)).unwrap();
    t.run(&data).unwrap();
    let iters: Vec<u64> = t.curve.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![0, 1, 2]);
    let csv = llpack::trainer::curve_csv(&t.curve);
    assert_eq!(csv.lines().next().unwrap(), "iter,total,l1,feat,smooth,tv,wl1");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn amplified_zero_noise_dark_recovers_mosaic() {
    let opts = SynthOptions {
        count: 1,
        height: 16,
        width: 16,
        noise: NoiseModel::NONE,
        ..SynthOptions::default()
    };
    let pair = synth_pair(&opts, 0).unwrap();
    let Layout::Bayer(phase) = pair.layout else { panic!() };
    let bright = llpack::amplifier::apply_amplification(&pair.dark, pair.k).unwrap();
    let mosaic = llpack::dataio::mosaic(&pair.gt, phase).unwrap();
    let err = bright.data().iter().zip(mosaic.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err < 1e-6, "{err}");
}
