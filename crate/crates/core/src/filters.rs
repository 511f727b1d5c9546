//! Fixed (non-learned) image filters used by the objective: separable
//! Gaussian blur, 2× average pooling and anisotropic total variation, each
//! with its adjoint.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{sum_f32, Shape, Tensor};

/// Normalized 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Result<Arc<[f32]>> {
    if size % 2 == 0 || sigma <= 0.0 {
        return Err(Error::Config(format!(
            "Gaussian window needs odd size and positive sigma (size={size}, sigma={sigma})"
        )));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| (v / total) as f32).collect())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

/// One separable pass along `axis`, renormalizing by the taps that fall
/// inside the image. With `adjoint` the transpose of that linear map is
/// applied instead.
fn blur_axis(x: &[f32], h: usize, w: usize, c: usize, taps: &[f32], axis: Axis, adjoint: bool) -> Vec<f32> {
    let r = taps.len() / 2;
    let n = if axis == Axis::Rows { h } else { w };
    // Sum of in-range taps for each output position along the axis.
    let norm: Vec<f32> = (0..n)
        .map(|p| {
            taps.iter()
                .enumerate()
                .filter(|&(t, _)| p + t >= r && p + t - r < n)
                .map(|(_, &k)| k)
                .sum()
        })
        .collect();
    let idx = |a: usize, p: usize, ch: usize| -> usize {
        match axis {
            Axis::Rows => (p * w + a) * c + ch,
            Axis::Cols => (a * w + p) * c + ch,
        }
    };
    let other = if axis == Axis::Rows { w } else { h };
    let mut out = vec![0.0f32; x.len()];
    for a in 0..other {
        for p in 0..n {
            for (t, &k) in taps.iter().enumerate() {
                if p + t < r || p + t - r >= n {
                    continue;
                }
                let q = p + t - r;
                for ch in 0..c {
                    if adjoint {
                        out[idx(a, q, ch)] += x[idx(a, p, ch)] * k / norm[p];
                    } else {
                        out[idx(a, p, ch)] += x[idx(a, q, ch)] * k / norm[p];
                    }
                }
            }
        }
    }
    out
}

/// Per-channel Gaussian blur with edge renormalization; constants are fixed points.
pub fn blur(x: &Tensor, taps: &[f32]) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let tmp = blur_axis(x.data(), h, w, c, taps, Axis::Cols, false);
    let out = blur_axis(&tmp, h, w, c, taps, Axis::Rows, false);
    Ok(Tensor::from_shape(x.shape().clone(), out))
}

pub fn blur_backward(dy: &Tensor, taps: &[f32]) -> Result<Tensor> {
    let (h, w, c) = dy.hwc()?;
    let tmp = blur_axis(dy.data(), h, w, c, taps, Axis::Rows, true);
    let out = blur_axis(&tmp, h, w, c, taps, Axis::Cols, true);
    Ok(Tensor::from_shape(dy.shape().clone(), out))
}

/// 2×2 average pooling, stride 2, ceil mode: edge windows average only the
/// pixels they cover.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let src = x.data();
    let mut out = vec![0.0f32; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            let xs = 2 * ox..(2 * ox + 2).min(w);
            let count = (ys.len() * xs.len()) as f32;
            let d = (oy * wo + ox) * c;
            for y in ys {
                for xx in xs.clone() {
                    let s = (y * w + xx) * c;
                    for ch in 0..c {
                        out[d + ch] += src[s + ch];
                    }
                }
            }
            for v in &mut out[d..d + c] {
                *v /= count;
            }
        }
    }
    Ok(Tensor::from_shape(Shape::new(&[ho, wo, c])?, out))
}

pub fn avg_pool2_backward(x_shape: &Shape, dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = x_shape.hwc()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    if dy.dims() != [ho, wo, c] {
        return Err(Error::shape("pool gradient has wrong shape"));
    }
    let g = dy.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let (oy, ox) = (y / 2, xx / 2);
            let count = (((2 * oy + 2).min(h) - 2 * oy) * ((2 * ox + 2).min(w) - 2 * ox)) as f32;
            let s = (oy * wo + ox) * c;
            let d = (y * w + xx) * c;
            for ch in 0..c {
                out[d + ch] = g[s + ch] / count;
            }
        }
    }
    Ok(Tensor::from_shape(x_shape.clone(), out))
}

/// Anisotropic total variation normalized by element count:
/// `(Σ|x[y, x+1] − x[y, x]| + Σ|x[y+1, x] − x[y, x]|) / (H·W·C)`.
pub fn tv(x: &Tensor) -> Result<f32> {
    let (h, w, c) = x.hwc()?;
    let d = x.data();
    let mut parts = Vec::with_capacity(h);
    for y in 0..h {
        let mut row = 0.0f32;
        for xx in 0..w {
            for ch in 0..c {
                let v = d[(y * w + xx) * c + ch];
                if xx + 1 < w {
                    row += (d[(y * w + xx + 1) * c + ch] - v).abs();
                }
                if y + 1 < h {
                    row += (d[((y + 1) * w + xx) * c + ch] - v).abs();
                }
            }
        }
        parts.push(row);
    }
    Ok(sum_f32(&parts) / (h * w * c) as f32)
}

/// Subgradient of [`tv`] scaled by the upstream scalar `g` (sign(0) = 0).
pub fn tv_backward(x: &Tensor, g: f32) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    let d = x.data();
    let scale = g / (h * w * c) as f32;
    let mut out = vec![0.0f32; d.len()];
    let sign = |v: f32| -> f32 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let i = (y * w + xx) * c + ch;
                if xx + 1 < w {
                    let j = (y * w + xx + 1) * c + ch;
                    let s = sign(d[j] - d[i]) * scale;
                    out[j] += s;
                    out[i] -= s;
                }
                if y + 1 < h {
                    let j = ((y + 1) * w + xx) * c + ch;
                    let s = sign(d[j] - d[i]) * scale;
                    out[j] += s;
                    out[i] -= s;
                }
            }
        }
    }
    Ok(Tensor::from_shape(x.shape().clone(), out))
}
