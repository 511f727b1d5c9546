//! Training objective and image-quality metrics.
//!
//! `total = λ1·l1 + λ2·feature + λ3·smoothed_l1 + λ4·tv(out) + λ5·Σ|w|`,
//! where every image norm is a mean over elements.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, gaussian_taps};
use crate::graph::{Eager, Graph};
use crate::nnops::{he_init, ConvGeometry, DEFAULT_SLOPE};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f32,
    pub feature: f32,
    pub smooth: f32,
    pub tv: f32,
    pub weight_l1: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            feature: 3.0,
            smooth: 1.0,
            tv: 400.0,
            weight_l1: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.feature, self.smooth, self.tv, self.weight_l1];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")))
        }
    }
}

pub const FEATURE_CHANNELS: [usize; 4] = [3, 16, 32, 64];
pub const FEATURE_SEED: u64 = 0x0F3A_7B1D;

/// Frozen three-stage pyramid `conv3x3 -> leaky -> avgpool2`, 3 -> 16 -> 32 -> 64.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stages: Vec<(Tensor, Tensor)>,
    slope: f32,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::seeded(FEATURE_SEED).expect("fixed extractor shapes are valid")
    }
}

impl FeatureExtractor {
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let (cin, cout) = (FEATURE_CHANNELS[i], FEATURE_CHANNELS[i + 1]);
            stages.push((
                he_init(&[3, 3, cin, cout], seed.wrapping_add(i as u64))?,
                Tensor::zeros(&[cout])?,
            ));
        }
        Ok(FeatureExtractor {
            stages,
            slope: DEFAULT_SLOPE,
        })
    }

    pub fn zeros() -> Result<Self> {
        let mut fe = Self::seeded(0)?;
        for (w, _) in &mut fe.stages {
            *w = Tensor::zeros(w.dims())?;
        }
        Ok(fe)
    }

    /// Loads `features/stage{i}/{weight,bias}`; any `3x3` kernels with
    /// matching channel chaining are accepted.
    pub fn from_store(store: &WeightStore) -> Result<Self> {
        let mut stages = Vec::with_capacity(3);
        let mut cin = 3;
        for i in 0..3 {
            let w = store.require(&format!("features/stage{i}/weight"))?.clone();
            let b = store.require(&format!("features/stage{i}/bias"))?.clone();
            match *w.dims() {
                [3, 3, c, cout] if c == cin && b.dims() == [cout] => cin = cout,
                _ => {
                    return Err(Error::Weight(format!(
                        "feature stage {i} has kernel {:?} and bias {:?}",
                        w.dims(),
                        b.dims()
                    )))
                }
            }
            stages.push((w, b));
        }
        Ok(FeatureExtractor {
            stages,
            slope: DEFAULT_SLOPE,
        })
    }

    pub fn write_to(&self, store: &mut WeightStore) {
        for (i, (w, b)) in self.stages.iter().enumerate() {
            store.insert(format!("features/stage{i}/weight"), w.clone());
            store.insert(format!("features/stage{i}/bias"), b.clone());
        }
    }

    /// Outputs of the three stages. Extractor weights enter as constants.
    pub fn features<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<Vec<G::Value>> {
        let c = g.value(x).hwc()?.2;
        if c != 3 {
            return Err(Error::shape(format!("feature extractor expects 3 channels, got {c}")));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for (w, b) in &self.stages {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            let y = g.conv2d(&h, &w, Some(&b), ConvGeometry::same(3))?;
            let y = g.leaky_relu(&y, self.slope);
            h = g.avg_pool2(&y)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Fixed pieces of the objective.
#[derive(Debug, Clone)]
pub struct Objective {
    pub weights: LossWeights,
    pub extractor: FeatureExtractor,
    pub blur_taps: Arc<[f32]>,
}

pub const BLUR_SIZE: usize = 11;
pub const BLUR_SIGMA: f64 = 3.0;

impl Default for Objective {
    fn default() -> Self {
        Objective {
            weights: LossWeights::default(),
            extractor: FeatureExtractor::default(),
            blur_taps: gaussian_taps(BLUR_SIZE, BLUR_SIGMA).expect("valid blur"),
        }
    }
}

/// Per-term values of the objective (unweighted) and the weighted total.
#[derive(Debug, Clone)]
pub struct LossBreakdown<V> {
    pub total: V,
    pub l1: V,
    pub feature: V,
    pub smooth: V,
    pub tv: V,
    pub weight_l1: V,
}

impl LossBreakdown<Tensor> {
    pub fn scalars(&self) -> Result<LossBreakdown<f32>> {
        Ok(LossBreakdown {
            total: self.total.item()?,
            l1: self.l1.item()?,
            feature: self.feature.item()?,
            smooth: self.smooth.item()?,
            tv: self.tv.item()?,
            weight_l1: self.weight_l1.item()?,
        })
    }
}

fn check_pair<G: Graph>(g: &G, a: &G::Value, b: &G::Value) -> Result<()> {
    let (da, db) = (g.value(a).dims(), g.value(b).dims());
    if da != db {
        return Err(Error::shape(format!("loss inputs differ in shape: {da:?} vs {db:?}")));
    }
    Ok(())
}

pub fn l1_in<G: Graph>(g: &mut G, a: &G::Value, b: &G::Value) -> Result<G::Value> {
    check_pair(g, a, b)?;
    let d = g.sub(a, b)?;
    let d = g.abs(&d);
    Ok(g.mean(&d))
}

pub fn feature_loss_in<G: Graph>(g: &mut G, a: &G::Value, b: &G::Value, fe: &FeatureExtractor) -> Result<G::Value> {
    check_pair(g, a, b)?;
    let fa = fe.features(g, a)?;
    let fb = fe.features(g, b)?;
    let mut total: Option<G::Value> = None;
    for (x, y) in fa.iter().zip(&fb) {
        let term = l1_in(g, x, y)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(&t, &term)?,
        });
    }
    Ok(total.expect("three stages"))
}

pub fn smoothed_l1_in<G: Graph>(g: &mut G, a: &G::Value, b: &G::Value, taps: &Arc<[f32]>) -> Result<G::Value> {
    check_pair(g, a, b)?;
    let ba = g.blur(a, taps)?;
    let bb = g.blur(b, taps)?;
    l1_in(g, &ba, &bb)
}

pub fn weight_l1_in<G: Graph>(g: &mut G, params: &[G::Value]) -> Result<G::Value> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for p in params {
        let a = g.abs(p);
        let s = g.sum(&a);
        total = g.add(&total, &s)?;
    }
    Ok(total)
}

/// The full objective. `params` are the trainable tensors for the weight penalty.
pub fn loss_total_in<G: Graph>(
    g: &mut G,
    gt: &G::Value,
    out: &G::Value,
    params: &[G::Value],
    obj: &Objective,
) -> Result<LossBreakdown<G::Value>> {
    obj.weights.validate()?;
    let lam = obj.weights;
    let l1 = l1_in(g, gt, out)?;
    let feature = feature_loss_in(g, gt, out, &obj.extractor)?;
    let smooth = smoothed_l1_in(g, gt, out, &obj.blur_taps)?;
    let tv = g.tv(out)?;
    let weight_l1 = weight_l1_in(g, params)?;
    let terms = [
        (&l1, lam.l1),
        (&feature, lam.feature),
        (&smooth, lam.smooth),
        (&tv, lam.tv),
        (&weight_l1, lam.weight_l1),
    ];
    let mut total = g.scale(terms[0].0, terms[0].1);
    for (v, w) in &terms[1..] {
        let s = g.scale(v, *w);
        total = g.add(&total, &s)?;
    }
    Ok(LossBreakdown {
        total,
        l1,
        feature,
        smooth,
        tv,
        weight_l1,
    })
}

pub fn l1(a: &Tensor, b: &Tensor) -> Result<f32> {
    l1_in(&mut Eager, a, b)?.item()
}

pub fn feature_loss(a: &Tensor, b: &Tensor, fe: &FeatureExtractor) -> Result<f32> {
    feature_loss_in(&mut Eager, a, b, fe)?.item()
}

pub fn smoothed_l1(a: &Tensor, b: &Tensor, taps: &Arc<[f32]>) -> Result<f32> {
    smoothed_l1_in(&mut Eager, a, b, taps)?.item()
}

pub fn tv(x: &Tensor) -> Result<f32> {
    filters::tv(x)
}

pub fn weight_l1(store: &WeightStore) -> f32 {
    let parts: Vec<f32> = store.iter().map(|(_, t)| t.map(f32::abs).sum()).collect();
    crate::tensor::sum_f32(&parts)
}

pub fn loss_total(gt: &Tensor, out: &Tensor, weights: &WeightStore, obj: &Objective) -> Result<LossBreakdown<f32>> {
    let params: Vec<Tensor> = weights.iter().map(|(_, t)| t.clone()).collect();
    loss_total_in(&mut Eager, gt, out, &params, obj)?.scalars()
}

/// Display cap for PSNR of identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10·log10(peak² / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.expect_same_shape(b)?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr_display(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_f64(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of one `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            tmp[y * wo + x] = (0..n).map(|t| k[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|t| k[t] * tmp[(y + t) * wo + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5), data range 1,
/// population statistics, over windows fully inside the image, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let (h, w, c) = a.hwc()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_f64(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = |t: &Tensor, ch: usize| -> Vec<f64> { t.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect() };
    let mut total = 0.0;
    for ch in 0..c {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&xx, h, w, &k);
        let myy = filter_valid(&yy, h, w, &k);
        let mxy = filter_valid(&xy, h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, seed: u32) -> Tensor {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        let data = (0..h * w * 3)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 1000) as f32 / 1000.0
            })
            .collect();
        Tensor::from_vec(&[h, w, 3], data).unwrap()
    }

    #[test]
    fn defaults() {
        let l = LossWeights::default();
        assert_eq!((l.l1, l.feature, l.smooth, l.tv, l.weight_l1), (1.0, 3.0, 1.0, 400.0, 1e-6));
        let bad = LossWeights { tv: -1.0, ..l };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identical_inputs_have_zero_loss() {
        let a = img(8, 8, 1);
        let obj = Objective::default();
        let zero = WeightStore::new();
        let lb = loss_total(&a, &a, &zero, &obj).unwrap();
        assert_eq!(lb.l1, 0.0);
        assert_eq!(lb.feature, 0.0);
        assert_eq!(lb.smooth, 0.0);
        assert_eq!(lb.weight_l1, 0.0);
        assert!(lb.tv > 0.0);
        let flat = Tensor::new(&[8, 8, 3], 0.3).unwrap();
        assert_eq!(loss_total(&flat, &flat, &zero, &obj).unwrap().total, 0.0);
    }

    #[test]
    fn offsets_and_constants() {
        let a = Tensor::new(&[6, 6, 3], 0.2).unwrap();
        let b = Tensor::new(&[6, 6, 3], 0.7).unwrap();
        assert!((l1(&a, &b).unwrap() - 0.5).abs() < 1e-6);
        let taps = gaussian_taps(BLUR_SIZE, BLUR_SIGMA).unwrap();
        assert!((smoothed_l1(&a, &b, &taps).unwrap() - 0.5).abs() < 1e-6);
        let x = img(5, 7, 3);
        let shifted = x.map(|v| v + 0.25);
        assert!((tv(&x).unwrap() - tv(&shifted).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn zero_extractor_gives_zero_feature_loss() {
        let fe = FeatureExtractor::zeros().unwrap();
        assert_eq!(feature_loss(&img(8, 8, 1), &img(8, 8, 2), &fe).unwrap(), 0.0);
        assert!(feature_loss(&img(8, 8, 1), &img(8, 8, 2), &FeatureExtractor::default()).unwrap() > 0.0);
    }

    #[test]
    fn extractor_round_trips_through_store() {
        let fe = FeatureExtractor::seeded(5).unwrap();
        let mut s = WeightStore::new();
        fe.write_to(&mut s);
        let back = FeatureExtractor::from_store(&s).unwrap();
        let (a, b) = (img(8, 8, 4), img(8, 8, 9));
        assert_eq!(feature_loss(&a, &b, &fe).unwrap(), feature_loss(&a, &b, &back).unwrap());
    }

    #[test]
    fn weight_penalty() {
        let mut s = WeightStore::new();
        assert_eq!(weight_l1(&s), 0.0);
        s.insert("p", Tensor::scalar(-2.5));
        assert_eq!(weight_l1(&s), 2.5);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(&[4, 4, 3]).unwrap();
        let b = Tensor::new(&[4, 4, 3], 0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr_display(f64::INFINITY), 99.0);
        assert!(psnr(&a, &Tensor::zeros(&[4, 4, 1]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_values() {
        let x = img(16, 16, 7);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let a = Tensor::new(&[12, 12, 3], 0.2).unwrap();
        let b = Tensor::new(&[12, 12, 3], 0.8).unwrap();
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        let y = img(16, 16, 8);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        assert!(ssim(&img(8, 8, 1), &img(8, 8, 1)).is_err());
    }
}
