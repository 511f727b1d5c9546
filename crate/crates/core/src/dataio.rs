//! Netpbm image I/O, Bayer mosaicking, the synthetic dark/bright pair
//! generator and the on-disk dataset layout.
//!
//! Dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/pairs/<id>/dark.pgm   (Bayer, 16-bit P5)  or  dark.ppm (RGB, 16-bit P6)
//! <dir>/pairs/<id>/gt.ppm     (8-bit P6)
//! <dir>/pairs/<id>/meta.json  {"black", "white", "phase", "k", "kind"}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rearrange::BayerPhase;
use crate::tensor::Tensor;

pub const DEFAULT_BLACK: u32 = 512;
pub const DEFAULT_WHITE: u32 = 16383;

#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage {
    pub data: Tensor,
    pub black: u32,
    pub white: u32,
    pub phase: BayerPhase,
}

/// Layout of the dark input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Bayer(BayerPhase),
    Rgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// `HxWx1` mosaic or `HxWx3` image, in [0, 1].
    pub dark: Tensor,
    pub gt: Tensor,
    /// Exposure ratio between ground truth and dark input.
    pub k: f32,
    pub layout: Layout,
}

struct Netpbm {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    payload_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Netpbm> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::format(0, "not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a decimal number in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(start, "header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected one whitespace byte after maxval")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(2, format!("invalid maxval {maxval}")));
    }
    Ok(Netpbm {
        magic,
        width: width as usize,
        height: height as usize,
        maxval,
        payload_at: pos,
    })
}

/// Raw samples of a P5/P6 file, one `u16` per sample.
fn read_samples(bytes: &[u8], want: &[u8; 2], channels: usize) -> Result<(Netpbm, Vec<u16>)> {
    let hdr = parse_header(bytes)?;
    if &hdr.magic != want {
        return Err(Error::format(
            0,
            format!("expected {}, found {}", String::from_utf8_lossy(want), String::from_utf8_lossy(&hdr.magic)),
        ));
    }
    let n = hdr.width * hdr.height * channels;
    let wide = hdr.maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    let payload = &bytes[hdr.payload_at..];
    if payload.len() < need {
        return Err(Error::format(
            bytes.len(),
            format!("truncated payload: need {need} bytes, found {}", payload.len()),
        ));
    }
    let samples = if wide {
        payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        payload[..need].iter().map(|&b| b as u16).collect()
    };
    Ok((hdr, samples))
}

pub fn parse_bayer_pgm(bytes: &[u8], black: u32, white: u32, phase: BayerPhase) -> Result<BayerImage> {
    if white <= black {
        return Err(Error::Config(format!("white level {white} must exceed black level {black}")));
    }
    let (hdr, samples) = read_samples(bytes, b"P5", 1)?;
    if hdr.maxval < 255 {
        return Err(Error::format(2, format!("maxval {} below 255", hdr.maxval)));
    }
    if hdr.width % 2 != 0 || hdr.height % 2 != 0 {
        return Err(Error::shape(format!(
            "Bayer mosaic dims must be even, got {}x{}",
            hdr.height, hdr.width
        )));
    }
    let range = (white - black) as f32;
    let data = samples
        .iter()
        .map(|&s| ((s as f32 - black as f32) / range).clamp(0.0, 1.0))
        .collect();
    Ok(BayerImage {
        data: Tensor::from_vec(&[hdr.height, hdr.width, 1], data)?,
        black,
        white,
        phase,
    })
}

pub fn read_bayer_pgm(path: impl AsRef<Path>, black: u32, white: u32, phase: BayerPhase) -> Result<BayerImage> {
    parse_bayer_pgm(&fs::read(path)?, black, white, phase)
}

/// Encodes a normalized mosaic as 16-bit P5 ADU values `round(black + v·(white − black))`.
pub fn encode_bayer_pgm(raw: &Tensor, black: u32, white: u32) -> Result<Vec<u8>> {
    let (h, w, c) = raw.hwc()?;
    if c != 1 {
        return Err(Error::shape(format!("mosaic must have 1 channel, got {c}")));
    }
    if white <= black || white > 65535 {
        return Err(Error::Config(format!("invalid levels black={black} white={white}")));
    }
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    let range = (white - black) as f32;
    for &v in raw.data() {
        let adu = (black as f32 + v.clamp(0.0, 1.0) * range).round() as u16;
        out.extend_from_slice(&adu.to_be_bytes());
    }
    Ok(out)
}

pub fn write_bayer_pgm(path: impl AsRef<Path>, raw: &Tensor, black: u32, white: u32) -> Result<()> {
    fs::write(path, encode_bayer_pgm(raw, black, white)?)?;
    Ok(())
}

fn check_rgb(img: &Tensor) -> Result<(usize, usize)> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::shape(format!("RGB image must have 3 channels, got {c}")));
    }
    if !img.all_finite() {
        return Err(Error::NonFinite("image contains NaN or infinity".into()));
    }
    Ok((h, w))
}

/// 8-bit P6 with `v -> floor(clamp(v, 0, 1)·255 + 0.5)`.
pub fn encode_rgb(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn write_rgb(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_rgb(img)?)?;
    Ok(())
}

/// 16-bit P6, `v -> round(clamp(v, 0, 1)·65535)`.
pub fn encode_rgb16(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n65535\n").into_bytes();
    for &v in img.data() {
        out.extend_from_slice(&((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn write_rgb16(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    fs::write(path, encode_rgb16(img)?)?;
    Ok(())
}

/// P6 at any bit depth, normalized by maxval.
pub fn parse_rgb(bytes: &[u8]) -> Result<Tensor> {
    let (hdr, samples) = read_samples(bytes, b"P6", 3)?;
    let m = hdr.maxval as f32;
    Tensor::from_vec(
        &[hdr.height, hdr.width, 3],
        samples.iter().map(|&s| (s as f32 / m).min(1.0)).collect(),
    )
}

pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_rgb(&fs::read(path)?)
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("Bayer dims must be even, got {h}x{w}")));
    }
    Ok(())
}

/// Samples one colour per pixel following `phase`.
pub fn mosaic(rgb: &Tensor, phase: BayerPhase) -> Result<Tensor> {
    let (h, w, c) = rgb.hwc()?;
    if c != 3 {
        return Err(Error::shape(format!("mosaic input must have 3 channels, got {c}")));
    }
    check_even(h, w)?;
    let src = rgb.data();
    let colour = [
        [phase.color_at(0, 0), phase.color_at(0, 1)],
        [phase.color_at(1, 0), phase.color_at(1, 1)],
    ];
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            src[i * 3 + colour[y % 2][x % 2]]
        })
        .collect();
    Tensor::from_vec(&[h, w, 1], data)
}

/// Heteroscedastic Gaussian sensor noise: variance `read_sigma² + shot_gain·signal`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub read_sigma: f32,
    pub shot_gain: f32,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        read_sigma: 0.0,
        shot_gain: 0.0,
    };
}

/// Darkens `clean` by `k`, mosaics it for Bayer layouts, adds noise and clamps to [0, 1].
pub fn synthesize_pair(clean: &Tensor, k: f32, noise: NoiseModel, seed: u64, layout: Layout) -> Result<PairedSample> {
    check_rgb(clean)?;
    if !(k.is_finite() && k >= 1.0) {
        return Err(Error::Domain(format!("exposure ratio must be >= 1, got {k}")));
    }
    if !(noise.read_sigma >= 0.0 && noise.shot_gain >= 0.0) {
        return Err(Error::Domain(format!("noise parameters must be >= 0, got {noise:?}")));
    }
    let base = match layout {
        Layout::Bayer(phase) => mosaic(clean, phase)?,
        Layout::Rgb => clean.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = noise.read_sigma > 0.0 || noise.shot_gain > 0.0;
    let data = base
        .data()
        .iter()
        .map(|&v| {
            let s = v / k;
            let out = if noisy {
                let sd = (noise.read_sigma * noise.read_sigma + noise.shot_gain * s.max(0.0)).sqrt();
                let z: f32 = StandardNormal.sample(&mut rng);
                s + sd * z
            } else {
                s
            };
            out.clamp(0.0, 1.0)
        })
        .collect();
    Ok(PairedSample {
        dark: Tensor::from_vec(base.dims(), data)?,
        gt: clean.clone(),
        k,
        layout,
    })
}

fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (_, tw, c) = t.hwc()?;
    let src = t.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let s = (y * tw + x0) * c;
        out.extend_from_slice(&src[s..s + w * c]);
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Even-aligned `size x size` window of dark and ground truth at the same location.
pub fn sample_patch(pair: &PairedSample, size: usize, seed: u64) -> Result<PairedSample> {
    let (h, w, _) = pair.gt.hwc()?;
    if size == 0 || size % 2 != 0 {
        return Err(Error::Config(format!("patch size must be even and positive, got {size}")));
    }
    if h < size || w < size {
        return Err(Error::shape(format!("image {h}x{w} smaller than patch {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = 2 * rng.random_range(0..=(h - size) / 2);
    let x0 = 2 * rng.random_range(0..=(w - size) / 2);
    Ok(PairedSample {
        dark: crop(&pair.dark, y0, x0, size, size)?,
        gt: crop(&pair.gt, y0, x0, size, size)?,
        k: pair.k,
        layout: pair.layout,
    })
}

/// Mean intensity of generated scenes, a stand-in for a well-exposed photo.
pub const SCENE_MEAN: f32 = 0.4;

/// A smooth random RGB scene: a colour gradient plus a few soft blobs,
/// scaled so its mean is [`SCENE_MEAN`] before clamping.
pub fn synthetic_scene(h: usize, w: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.6));
    let grad: [[f32; 2]; 3] = std::array::from_fn(|_| [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25)]);
    let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.1..0.3),
                std::array::from_fn(|_| rng.random_range(-0.3..0.3)),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let v = y as f32 / h as f32;
        for x in 0..w {
            let u = x as f32 / w as f32;
            for ch in 0..3 {
                let mut val = base[ch] + grad[ch][0] * (u - 0.5) + grad[ch][1] * (v - 0.5);
                for &(cx, cy, r, amp) in &blobs {
                    let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                    val += amp[ch] * (-d2 / (2.0 * r * r)).exp();
                }
                data.push(val.max(0.0));
            }
        }
    }
    let mean = crate::tensor::sum_f32(&data) / data.len() as f32;
    let gain = if mean > 0.0 { SCENE_MEAN / mean } else { 1.0 };
    Tensor::from_vec(&[h, w, 3], data.into_iter().map(|v| (v * gain).min(1.0)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub black: u32,
    pub white: u32,
    pub phase: String,
    pub k: f32,
    /// `"bayer"` or `"rgb"`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub pairs: Vec<String>,
    pub kind: String,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub factors: Vec<f32>,
    pub noise: NoiseModel,
    pub layout: Layout,
    pub black: u32,
    pub white: u32,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            count: 8,
            height: 64,
            width: 64,
            factors: vec![50.0, 100.0, 250.0],
            noise: NoiseModel {
                read_sigma: 2e-4,
                shot_gain: 1e-4,
            },
            layout: Layout::Bayer(BayerPhase::Rggb),
            black: DEFAULT_BLACK,
            white: DEFAULT_WHITE,
            seed: 0,
        }
    }
}

fn kind_name(layout: Layout) -> &'static str {
    match layout {
        Layout::Bayer(_) => "bayer",
        Layout::Rgb => "rgb",
    }
}

fn pair_id(i: usize) -> String {
    format!("{i:05}")
}

/// Generated pair `i` of a synthetic dataset; depends only on `(opts, i)`.
pub fn synth_pair(opts: &SynthOptions, i: usize) -> Result<PairedSample> {
    if opts.factors.is_empty() {
        return Err(Error::Config("at least one exposure factor is required".into()));
    }
    let s = opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
    let clean = synthetic_scene(opts.height, opts.width, s)?;
    let k = opts.factors[i % opts.factors.len()];
    synthesize_pair(&clean, k, opts.noise, s ^ 0x5A5A_5A5A, opts.layout)
}

pub fn write_pair(dir: &Path, pair: &PairedSample, black: u32, white: u32) -> Result<()> {
    fs::create_dir_all(dir)?;
    let phase = match pair.layout {
        Layout::Bayer(p) => {
            write_bayer_pgm(dir.join("dark.pgm"), &pair.dark, black, white)?;
            p
        }
        Layout::Rgb => {
            write_rgb16(dir.join("dark.ppm"), &pair.dark)?;
            BayerPhase::Rggb
        }
    };
    write_rgb(dir.join("gt.ppm"), &pair.gt)?;
    let meta = PairMeta {
        black,
        white,
        phase: phase.name().to_string(),
        k: pair.k,
        kind: kind_name(pair.layout).to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_pair(dir: &Path) -> Result<PairedSample> {
    let meta: PairMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let phase: BayerPhase = meta.phase.parse()?;
    let gt = read_rgb(dir.join("gt.ppm"))?;
    let (dark, layout) = match meta.kind.as_str() {
        "bayer" => (
            read_bayer_pgm(dir.join("dark.pgm"), meta.black, meta.white, phase)?.data,
            Layout::Bayer(phase),
        ),
        "rgb" => (read_rgb(dir.join("dark.ppm"))?, Layout::Rgb),
        other => return Err(Error::Config(format!("unknown pair kind `{other}`"))),
    };
    if dark.dims()[..2] != gt.dims()[..2] {
        return Err(Error::shape(format!(
            "dark {:?} and ground truth {:?} differ in size",
            dark.dims(),
            gt.dims()
        )));
    }
    Ok(PairedSample {
        dark,
        gt,
        k: meta.k,
        layout,
    })
}

pub fn generate_dataset(dir: impl AsRef<Path>, opts: &SynthOptions) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("pairs"))?;
    let mut ids = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let id = pair_id(i);
        write_pair(&dir.join("pairs").join(&id), &synth_pair(opts, i)?, opts.black, opts.white)?;
        ids.push(id);
    }
    let manifest = Manifest {
        count: opts.count,
        pairs: ids,
        kind: kind_name(opts.layout).to_string(),
        height: opts.height,
        width: opts.width,
        seed: opts.seed,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.as_ref().join("manifest.json"))?)?)
}

pub fn pair_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    Ok(m.pairs.iter().map(|id| dir.join("pairs").join(id)).collect())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    pair_dirs(dir)?.iter().map(|d| read_pair(d)).collect()
}
