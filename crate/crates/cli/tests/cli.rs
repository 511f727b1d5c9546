use std::path::Path;
use std::process::{Command, Output};

use llpack::dataio::{self, load_dataset};
use llpack::model::{self, Amplification, ModelConfig};
use llpack::objective::psnr;
use llpack::weights::{load_weights, save_weights};

fn llpack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llpack"))
        .args(args)
        .env("LLPACK_THREADS", "1")
        .output()
        .expect("spawn llpack")
}

fn ok(args: &[&str]) -> String {
    let out = llpack(args);
    assert!(
        out.status.success(),
        "llpack {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn reported_factor(stdout: &str) -> f32 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("amplification: "))
        .expect("factor line")
        .parse()
        .unwrap()
}

fn synth_rgb(dir: &Path, count: usize, side: usize, factors: &str) {
    let side = side.to_string();
    let count = count.to_string();
    ok(&[
        "synth", "--out", p(dir), "--count", &count, "--height", &side, "--width", &side, "--kind", "rgb", "--factors",
        factors,
    ]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn probe_rf_counts_receptive_field() {
    assert_eq!(ok(&["probe-rf", "--alpha", "10"]).trim(), "900");
    assert_eq!(ok(&["probe-rf", "--alpha", "2"]).trim(), "36");
}

#[test]
fn exit_codes() {
    assert_eq!(llpack(&["bench", "--op", "bogus"]).status.code(), Some(1));
    assert_eq!(llpack(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(llpack(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.llpk");
    std::fs::write(&junk, b"not a weight file").unwrap();
    let img = dir.path().join("x.ppm");
    dataio::write_rgb(&img, &llpack::Tensor::new(&[8, 8, 3], 0.1).unwrap()).unwrap();
    let out = dir.path().join("y.ppm");
    let run = |w: &Path, cfg: &str| llpack(&["enhance", "--input", p(&img), "--weights", p(w), "--output", p(&out), "--config", cfg]);
    assert_eq!(run(&junk, "rgb4").status.code(), Some(2));
    let w = dir.path().join("w.llpk");
    save_weights(&model::build(&ModelConfig::rgb4(), 0).unwrap(), &w).unwrap();
    assert_eq!(run(&w, "rgb8").status.code(), Some(3));
}

#[test]
fn synth_with_zero_pairs_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    synth_rgb(&out, 0, 16, "100");
    assert!(out.join("manifest.json").is_file());
    assert!(load_dataset(&out).unwrap().is_empty());
}

#[test]
fn bench_prints_csv() {
    let csv = ok(&["bench", "--op", "unpack,pixel_shuffle", "--shape", "8x8x16", "--alpha", "2", "--reps", "5"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("unpack,") && lines[2].starts_with("pixel_shuffle,"), "{csv}");
}

#[test]
fn enhance_matches_library_forward() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_rgb(&data, 1, 24, "100");
    let cfg = ModelConfig::rgb4();
    let weights = model::build(&cfg, 3).unwrap();
    let wpath = dir.path().join("w.llpk");
    save_weights(&weights, &wpath).unwrap();
    let input = data.join("pairs/00000/dark.ppm");
    let out = dir.path().join("out.ppm");
    let args = |amp: &'static str| -> Vec<String> {
        ["enhance", "--input", p(&input), "--weights", p(&wpath), "--output", p(&out), "--config", "rgb4", "--amplify", amp]
            .map(String::from)
            .to_vec()
    };
    let run = |amp| ok(&args(amp).iter().map(String::as_str).collect::<Vec<_>>());

    let dark = dataio::read_rgb(&input).unwrap();
    let stdout = run("1");
    assert_eq!(reported_factor(&stdout), 1.0);
    let direct = model::forward(&dark, &weights, &cfg, Amplification::Fixed(1.0)).unwrap();
    let written = dataio::read_rgb(&out).unwrap();
    assert_eq!(written.dims(), direct.dims());
    let err = written.data().iter().zip(direct.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");

    let stdout = run("auto");
    let expected = model::resolve_amplification(&dark, &weights, &cfg, Amplification::Auto).unwrap();
    assert_eq!(reported_factor(&stdout), expected);
}

#[test]
fn toy_training_improves_over_dark_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_rgb(&data, 2, 32, "100");
    let out = dir.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&out), "--config", "rgb4", "--iters", "300", "--patch", "0",
        "--amplify", "gt", "--lr", "1e-3", "--loss-weights", "1,3,1,0,1e-6",
    ]);
    assert_eq!(std::fs::read_to_string(out.join("curve.csv")).unwrap().lines().count(), 301);
    load_weights(out.join("weights.llpk")).unwrap();

    for (i, pair) in load_dataset(&data).unwrap().iter().enumerate() {
        let input = data.join(format!("pairs/{i:05}/dark.ppm"));
        let enhanced = dir.path().join(format!("enh{i}.ppm"));
        let k = pair.k.to_string();
        ok(&[
            "enhance", "--input", p(&input), "--weights", p(&out.join("weights.llpk")), "--output", p(&enhanced),
            "--config", "rgb4", "--amplify", &k,
        ]);
        let enhanced = dataio::read_rgb(&enhanced).unwrap();
        let before = psnr(&pair.dark, &pair.gt, 1.0).unwrap();
        let after = psnr(&enhanced, &pair.gt, 1.0).unwrap();
        assert!(after >= before + 10.0, "pair {i}: {before:.2} dB -> {after:.2} dB");
    }
}

#[test]
fn reruns_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let data = d.join("data");
        synth_rgb(&data, 2, 16, "50,250");
        ok(&[
            "train", "--data", p(&data), "--out", p(&d.join("run")), "--config", "rgb4", "--iters", "4", "--patch", "8",
            "--checkpoint-every", "2",
        ]);
    }
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 2 * 3 + 1 + 4);
    assert!(fa == fb);
}
