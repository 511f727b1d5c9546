//! Neural-network primitives on channels-last tensors, with their
//! vector-Jacobian products.
//!
//! Kernel weights are laid out `[kh, kw, Cin, Cout]`, so the innermost loop
//! of every convolution is a contiguous update over output channels. Work is
//! split by output rows; each output element is accumulated in a fixed order,
//! so results do not depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Default negative slope of the leaky rectifier.
pub const DEFAULT_SLOPE: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Stride 1 with the padding that preserves spatial size for odd `k`.
    pub fn same(k: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: k / 2,
        }
    }
}

/// A convolution kernel with bias and geometry.
#[derive(Debug, Clone)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Tensor,
    pub geometry: ConvGeometry,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let [kh, kw, _, cout] = *weights.dims() else {
            return Err(Error::shape(format!(
                "kernel weights must be [kh, kw, Cin, Cout], got {:?}",
                weights.dims()
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
        }
        if bias.dims() != [cout] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {cout} output channels",
                bias.dims()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        if !weights.all_finite() || !bias.all_finite() {
            return Err(Error::NonFinite("kernel weights".into()));
        }
        Ok(ConvKernel {
            weights,
            bias,
            geometry: ConvGeometry { stride, padding },
        })
    }

    /// He-initialized `k×k` kernel with zero bias and "same" geometry.
    pub fn he(k: usize, cin: usize, cout: usize, seed: u64) -> Result<Self> {
        let weights = he_init(&[k, k, cin, cout], seed)?;
        let bias = Tensor::zeros(&[cout])?;
        Self::new(weights, bias, 1, k / 2)
    }

    pub fn size(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weights, Some(&self.bias), self.geometry)
    }
}

struct KernelDims {
    k: usize,
    cin: usize,
    cout: usize,
}

fn kernel_dims(w: &Tensor, cin: usize, bias: Option<&Tensor>) -> Result<KernelDims> {
    let [kh, kw, wcin, cout] = *w.dims() else {
        return Err(Error::shape(format!(
            "kernel must be [kh, kw, Cin, Cout], got {:?}",
            w.dims()
        )));
    };
    if kh != kw {
        return Err(Error::shape(format!("kernel must be square, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "kernel expects {wcin} input channels, tensor has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {cout} output channels",
                b.dims()
            )));
        }
    }
    Ok(KernelDims { k: kh, cin, cout })
}

fn conv_out_len(n: usize, k: usize, g: ConvGeometry) -> Result<usize> {
    if g.stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let padded = n + 2 * g.padding;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / g.stride + 1)
}

fn zero_pad(x: &[f32], h: usize, w: usize, c: usize, p: usize) -> Vec<f32> {
    if p == 0 {
        return x.to_vec();
    }
    let wp = w + 2 * p;
    let mut out = vec![0.0f32; (h + 2 * p) * wp * c];
    for y in 0..h {
        let d = ((y + p) * wp + p) * c;
        out[d..d + w * c].copy_from_slice(&x[y * w * c..(y + 1) * w * c]);
    }
    out
}

#[inline]
fn axpy(acc: &mut [f32], a: f32, x: &[f32]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const TILE: usize = 4;

/// Cross-correlation with zero padding:
/// `out[y, x, o] = b[o] + Σ x[y·s + u − p, x·s + v − p, i] · w[u, v, i, o]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
    let (h, wd, cin) = x.hwc()?;
    let KernelDims { k, cin, cout } = kernel_dims(w, cin, bias)?;
    let ho = conv_out_len(h, k, geom)?;
    let wo = conv_out_len(wd, k, geom)?;
    let s = geom.stride;
    let wp = wd + 2 * geom.padding;
    let xp = zero_pad(x.data(), h, wd, cin, geom.padding);
    let wt = w.data();
    let bias = bias.map(|b| b.data());

    let mut out = vec![0.0f32; ho * wo * cout];
    out.par_chunks_mut(wo * cout).enumerate().for_each(|(oy, row)| {
        if let Some(b) = bias {
            for px in row.chunks_mut(cout) {
                px.copy_from_slice(b);
            }
        }
        let mut ox0 = 0;
        while ox0 < wo {
            let n = TILE.min(wo - ox0);
            let tile = &mut row[ox0 * cout..(ox0 + n) * cout];
            for u in 0..k {
                let iy = oy * s + u;
                for v in 0..k {
                    let wbase = (u * k + v) * cin * cout;
                    for ci in 0..cin {
                        let wr = &wt[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for t in 0..n {
                            let ix = (ox0 + t) * s + v;
                            let xv = xp[(iy * wp + ix) * cin + ci];
                            axpy(&mut tile[t * cout..(t + 1) * cout], xv, wr);
                        }
                    }
                }
            }
            ox0 += n;
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[ho, wo, cout])?, out))
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub struct ConvGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, geom: ConvGeometry) -> Result<ConvGrads> {
    let (h, wd, cin) = x.hwc()?;
    let KernelDims { k, cout, .. } = kernel_dims(w, cin, None)?;
    let ho = conv_out_len(h, k, geom)?;
    let wo = conv_out_len(wd, k, geom)?;
    if dy.dims() != [ho, wo, cout] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match conv output {:?}",
            dy.dims(),
            [ho, wo, cout]
        )));
    }
    let dx = conv2d_input_grad(x.shape(), w, dy, geom)?;
    let dw = conv2d_weight_grad(x, dy, k, cout, geom)?;
    let db = channel_sums(dy.data(), cout);
    Ok(ConvGrads {
        dx,
        dw,
        db: Tensor::from_vec(&[cout], db)?,
    })
}

fn channel_sums(data: &[f32], c: usize) -> Vec<f32> {
    let mut acc = vec![0.0f32; c];
    for px in data.chunks(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc
}

/// `w[u, v, i, o]` → `w[k−1−u, k−1−v, o, i]`.
fn flip_transpose(w: &Tensor) -> Result<Tensor> {
    let [k, _, cin, cout] = *w.dims() else {
        return Err(Error::shape("kernel must be rank 4"));
    };
    let src = w.data();
    let mut out = vec![0.0f32; src.len()];
    for u in 0..k {
        for v in 0..k {
            for i in 0..cin {
                for o in 0..cout {
                    out[(((k - 1 - u) * k + (k - 1 - v)) * cout + o) * cin + i] =
                        src[((u * k + v) * cin + i) * cout + o];
                }
            }
        }
    }
    Tensor::from_vec(&[k, k, cout, cin], out)
}

fn conv2d_input_grad(x_shape: &Shape, w: &Tensor, dy: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (h, wd, cin) = x_shape.hwc()?;
    let k = w.dims()[0];
    let cout = w.dims()[3];
    if geom.stride == 1 && geom.padding < k {
        // Stride-1 adjoint is a correlation with the flipped, transposed kernel;
        // rows or columns the forward pass never reached stay zero.
        let wt = flip_transpose(w)?;
        let full = conv2d(
            dy,
            &wt,
            None,
            ConvGeometry {
                stride: 1,
                padding: k - 1 - geom.padding,
            },
        )?;
        let (fh, fw, _) = full.hwc()?;
        if fh == h && fw == wd {
            return Ok(full);
        }
        let mut out = vec![0.0f32; h * wd * cin];
        let src = full.data();
        for y in 0..fh.min(h) {
            let n = fw.min(wd) * cin;
            out[y * wd * cin..y * wd * cin + n].copy_from_slice(&src[y * fw * cin..y * fw * cin + n]);
        }
        return Tensor::from_vec(&[h, wd, cin], out);
    }

    let (ho, wo, _) = dy.hwc()?;
    let (s, p) = (geom.stride, geom.padding);
    let wt = w.data();
    let g = dy.data();
    let mut out = vec![0.0f32; h * wd * cin];
    out.par_chunks_mut(wd * cin).enumerate().for_each(|(iy, row)| {
        for u in 0..k {
            let t = iy + p;
            if t < u || (t - u) % s != 0 || (t - u) / s >= ho {
                continue;
            }
            let oy = (t - u) / s;
            for ix in 0..wd {
                let dst = &mut row[ix * cin..(ix + 1) * cin];
                for v in 0..k {
                    let t = ix + p;
                    if t < v || (t - v) % s != 0 || (t - v) / s >= wo {
                        continue;
                    }
                    let ox = (t - v) / s;
                    let gy = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    let wbase = (u * k + v) * cin * cout;
                    for (ci, d) in dst.iter_mut().enumerate() {
                        *d += dot(gy, &wt[wbase + ci * cout..wbase + (ci + 1) * cout]);
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[h, wd, cin], out)
}

fn conv2d_weight_grad(x: &Tensor, dy: &Tensor, k: usize, cout: usize, geom: ConvGeometry) -> Result<Tensor> {
    let (h, wd, cin) = x.hwc()?;
    let (ho, wo, _) = dy.hwc()?;
    let s = geom.stride;
    let wp = wd + 2 * geom.padding;
    let xp = zero_pad(x.data(), h, wd, cin, geom.padding);
    let g = dy.data();
    let mut out = vec![0.0f32; k * k * cin * cout];
    // One task per (u, v, input channel); each sums over all output pixels.
    out.par_chunks_mut(cout).enumerate().for_each(|(idx, acc)| {
        let ci = idx % cin;
        let uv = idx / cin;
        let (u, v) = (uv / k, uv % k);
        for oy in 0..ho {
            let xrow = (oy * s + u) * wp;
            for ox in 0..wo {
                let xv = xp[(xrow + ox * s + v) * cin + ci];
                axpy(acc, xv, &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout]);
            }
        }
    });
    Tensor::from_vec(&[k, k, cin, cout], out)
}

fn transposed_out_len(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let full = (n - 1) * stride + k;
    if stride == 0 || full <= 2 * padding {
        return Err(Error::shape(format!(
            "transposed conv with k={k}, stride={stride}, padding={padding} yields no output"
        )));
    }
    Ok(full - 2 * padding)
}

/// Fractionally strided convolution:
/// `out[y·s + u − p, x·s + v − p, o] += x[y, x, i] · w[u, v, i, o]`.
pub fn transposed_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (h, wd, cin) = x.hwc()?;
    let KernelDims { k, cin, cout } = kernel_dims(w, cin, bias)?;
    let ho = transposed_out_len(h, k, stride, padding)?;
    let wo = transposed_out_len(wd, k, stride, padding)?;
    let (s, p) = (stride, padding);
    let src = x.data();
    let wt = w.data();
    let bias = bias.map(|b| b.data());

    let mut out = vec![0.0f32; ho * wo * cout];
    out.par_chunks_mut(wo * cout).enumerate().for_each(|(oy, row)| {
        if let Some(b) = bias {
            for px in row.chunks_mut(cout) {
                px.copy_from_slice(b);
            }
        }
        for u in 0..k {
            let t = oy + p;
            if t < u || (t - u) % s != 0 || (t - u) / s >= h {
                continue;
            }
            let iy = (t - u) / s;
            for ox in 0..wo {
                let acc = &mut row[ox * cout..(ox + 1) * cout];
                for v in 0..k {
                    let t = ox + p;
                    if t < v || (t - v) % s != 0 || (t - v) / s >= wd {
                        continue;
                    }
                    let ix = (t - v) / s;
                    let xs = &src[(iy * wd + ix) * cin..(iy * wd + ix + 1) * cin];
                    let wbase = (u * k + v) * cin * cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        axpy(acc, xv, &wt[wbase + ci * cout..wbase + (ci + 1) * cout]);
                    }
                }
            }
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[ho, wo, cout])?, out))
}

pub fn transposed_conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads> {
    let (h, wd, cin) = x.hwc()?;
    let KernelDims { k, cin, cout } = kernel_dims(w, cin, None)?;
    let ho = transposed_out_len(h, k, stride, padding)?;
    let wo = transposed_out_len(wd, k, stride, padding)?;
    if dy.dims() != [ho, wo, cout] {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match transposed conv output {:?}",
            dy.dims(),
            [ho, wo, cout]
        )));
    }
    let (s, p) = (stride, padding);
    let (src, wt, g) = (x.data(), w.data(), dy.data());

    // Each input pixel gathers the output pixels it was scattered to.
    let in_bounds = |i: usize, t: usize, lim: usize| -> Option<usize> {
        let pos = i * s + t;
        (pos >= p && pos - p < lim).then(|| pos - p)
    };

    let mut dx = vec![0.0f32; h * wd * cin];
    dx.par_chunks_mut(wd * cin).enumerate().for_each(|(iy, row)| {
        for u in 0..k {
            let Some(oy) = in_bounds(iy, u, ho) else { continue };
            for ix in 0..wd {
                let dst = &mut row[ix * cin..(ix + 1) * cin];
                for v in 0..k {
                    let Some(ox) = in_bounds(ix, v, wo) else { continue };
                    let gy = &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                    let wbase = (u * k + v) * cin * cout;
                    for (ci, d) in dst.iter_mut().enumerate() {
                        *d += dot(gy, &wt[wbase + ci * cout..wbase + (ci + 1) * cout]);
                    }
                }
            }
        }
    });

    let mut dw = vec![0.0f32; k * k * cin * cout];
    dw.par_chunks_mut(cout).enumerate().for_each(|(idx, acc)| {
        let ci = idx % cin;
        let uv = idx / cin;
        let (u, v) = (uv / k, uv % k);
        for iy in 0..h {
            let Some(oy) = in_bounds(iy, u, ho) else { continue };
            for ix in 0..wd {
                let Some(ox) = in_bounds(ix, v, wo) else { continue };
                let xv = src[(iy * wd + ix) * cin + ci];
                axpy(acc, xv, &g[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout]);
            }
        }
    });

    Ok(ConvGrads {
        dx: Tensor::from_vec(&[h, wd, cin], dx)?,
        dw: Tensor::from_vec(&[k, k, cin, cout], dw)?,
        db: Tensor::from_vec(&[cout], channel_sums(g, cout))?,
    })
}

/// Nearest-neighbour upsampling: every pixel becomes an α×α block.
pub fn interpolate_nearest(x: &Tensor, alpha: usize) -> Result<Tensor> {
    if alpha == 0 {
        return Err(Error::shape("alpha must be at least 1"));
    }
    let (h, w, c) = x.hwc()?;
    let (hh, ww) = (h * alpha, w * alpha);
    let src = x.data();
    let mut out = vec![0.0f32; hh * ww * c];
    out.par_chunks_mut(ww * c).enumerate().for_each(|(yy, row)| {
        let srow = &src[(yy / alpha) * w * c..(yy / alpha + 1) * w * c];
        for (xx, px) in row.chunks_mut(c).enumerate() {
            let s = (xx / alpha) * c;
            px.copy_from_slice(&srow[s..s + c]);
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[hh, ww, c])?, out))
}

/// Adjoint of [`interpolate_nearest`]: sum over each α×α block.
pub fn interpolate_nearest_backward(dy: &Tensor, alpha: usize) -> Result<Tensor> {
    let (hh, ww, c) = dy.hwc()?;
    if alpha == 0 || hh % alpha != 0 || ww % alpha != 0 {
        return Err(Error::shape("gradient dims not divisible by alpha"));
    }
    let (h, w) = (hh / alpha, ww / alpha);
    let g = dy.data();
    let mut out = vec![0.0f32; h * w * c];
    for yy in 0..hh {
        for xx in 0..ww {
            let d = ((yy / alpha) * w + xx / alpha) * c;
            let s = (yy * ww + xx) * c;
            for ch in 0..c {
                out[d + ch] += g[s + ch];
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f32) -> Result<Tensor> {
    x.zip_map(dy, |v, g| if v > 0.0 { g } else { slope * g })
}

fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
    let [n, m] = *w.dims() else {
        return Err(Error::shape(format!("linear weight must be [n, m], got {:?}", w.dims())));
    };
    if x.dims() != [n] {
        return Err(Error::shape(format!(
            "linear input {:?} does not match weight {:?}",
            x.dims(),
            w.dims()
        )));
    }
    Ok((n, m))
}

/// `x·W + b` for a vector `x` of length n and `W` of shape `[n, m]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = linear_dims(x, w)?;
    if b.dims() != [m] {
        return Err(Error::shape(format!("linear bias {:?} must be [{m}]", b.dims())));
    }
    let mut out = b.to_vec();
    let wt = w.data();
    for (i, &xv) in x.data().iter().enumerate().take(n) {
        axpy(&mut out, xv, &wt[i * m..(i + 1) * m]);
    }
    Tensor::from_vec(&[m], out)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<LinearGrads> {
    let (n, m) = linear_dims(x, w)?;
    if dy.dims() != [m] {
        return Err(Error::shape("linear upstream gradient has wrong length"));
    }
    let (wt, g, xs) = (w.data(), dy.data(), x.data());
    let dx: Vec<f32> = (0..n).map(|i| dot(&wt[i * m..(i + 1) * m], g)).collect();
    let mut dw = vec![0.0f32; n * m];
    for (i, row) in dw.chunks_mut(m).enumerate() {
        axpy(row, xs[i], g);
    }
    Ok(LinearGrads {
        dx: Tensor::from_vec(&[n], dx)?,
        dw: Tensor::from_vec(&[n, m], dw)?,
        db: dy.clone(),
    })
}

/// Stack `(H, W, ·)` tensors along channels, in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let (h, w, _) = first.hwc()?;
    let mut widths = Vec::with_capacity(xs.len());
    for t in xs {
        let (th, tw, tc) = t.hwc()?;
        if (th, tw) != (h, w) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {h}x{w} vs {th}x{tw}"
            )));
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0f32; h * w * total];
    out.par_chunks_mut(total).enumerate().for_each(|(px, dst)| {
        let mut off = 0;
        for (t, &c) in xs.iter().zip(&widths) {
            dst[off..off + c].copy_from_slice(&t.data()[px * c..(px + 1) * c]);
            off += c;
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[h, w, total])?, out))
}

/// Channels `start..start + len` of an `(H, W, C)` tensor.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if len == 0 || start + len > c {
        return Err(Error::shape(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let src = x.data();
    let mut out = vec![0.0f32; h * w * len];
    for (px, dst) in out.chunks_mut(len).enumerate() {
        dst.copy_from_slice(&src[px * c + start..px * c + start + len]);
    }
    Tensor::from_vec(&[h, w, len], out)
}

/// Zero-mean normal samples with variance `2 / fan_in`.
///
/// Fan-in is `kh·kw·Cin` for `[kh, kw, Cin, Cout]` kernels and `n` for
/// `[n, m]` matrices.
pub fn he_init(dims: &[usize], seed: u64) -> Result<Tensor> {
    let shape = Shape::new(dims)?;
    let fan_in = match *dims {
        [kh, kw, cin, _] => kh * kw * cin,
        [n, _] => n,
        _ => {
            return Err(Error::shape(format!(
                "cannot derive fan-in from shape {dims:?}"
            )))
        }
    };
    let std = (2.0 / fan_in as f64).sqrt() as f32;
    let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
    Ok(Tensor::from_shape(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(dims: &[usize], f: impl Fn(usize) -> f32) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = seq(&[4, 5, 1], |i| i as f32 * 0.1);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = Tensor::from_vec(&[3, 3, 1, 1], w).unwrap();
        let y = conv2d(&x, &w, None, ConvGeometry::same(3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let c = 0.5;
        let x = Tensor::new(&[5, 5, 1], c).unwrap();
        let w = Tensor::new(&[3, 3, 1, 1], 1.0).unwrap();
        let y = conv2d(&x, &w, None, ConvGeometry::same(3)).unwrap();
        assert_eq!(y.at(&[2, 2, 0]), 9.0 * c);
        assert_eq!(y.at(&[0, 0, 0]), 4.0 * c);
        assert_eq!(y.at(&[4, 4, 0]), 4.0 * c);
        assert_eq!(y.at(&[0, 2, 0]), 6.0 * c);
        assert_eq!(y.at(&[2, 4, 0]), 6.0 * c);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[4, 4, 2]).unwrap();
        let w = Tensor::zeros(&[3, 3, 3, 1]).unwrap();
        assert!(matches!(
            conv2d(&x, &w, None, ConvGeometry::same(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::zeros(&[7, 9, 1]).unwrap();
        let w = Tensor::zeros(&[3, 3, 1, 2]).unwrap();
        let y = conv2d(&x, &w, None, ConvGeometry { stride: 2, padding: 1 }).unwrap();
        assert_eq!(y.dims(), &[4, 5, 2]);
    }

    #[test]
    fn transposed_identity_and_zero() {
        let x = seq(&[3, 3, 2], |i| i as f32);
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        w[3] = 1.0;
        let w = Tensor::from_vec(&[1, 1, 2, 2], w).unwrap();
        assert_eq!(transposed_conv2d(&x, &w, None, 1, 0).unwrap(), x);

        let z = Tensor::zeros(&[3, 3, 2]).unwrap();
        let w = Tensor::new(&[2, 2, 2, 4], 0.7).unwrap();
        let y = transposed_conv2d(&z, &w, None, 2, 0).unwrap();
        assert_eq!(y.dims(), &[6, 6, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_interpolation() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        let y = interpolate_nearest(&x, 2).unwrap();
        assert_eq!(y.dims(), &[2, 4, 1]);
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(interpolate_nearest(&x, 1).unwrap(), x);
        let c = Tensor::new(&[2, 3, 2], 0.3).unwrap();
        assert!(interpolate_nearest(&c, 3).unwrap().data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn leaky_values() {
        let x = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let eye = Tensor::from_vec(&[3, 3], eye).unwrap();
        let zero_b = Tensor::zeros(&[3]).unwrap();
        assert_eq!(linear(&x, &eye, &zero_b).unwrap(), x);

        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let w = Tensor::new(&[3, 2], 0.9).unwrap();
        let z = Tensor::zeros(&[3]).unwrap();
        assert_eq!(linear(&z, &w, &b).unwrap(), b);
        assert!(linear(&Tensor::zeros(&[2]).unwrap(), &w, &b).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::new(&[1, 1, 1], 1.0).unwrap();
        let b = Tensor::new(&[1, 1, 1], 2.0).unwrap();
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.data(), &[1.0, 2.0]);
        assert_eq!(slice_channels(&ab, 1, 1).unwrap(), b);
        let c = Tensor::new(&[2, 1, 1], 0.0).unwrap();
        assert!(concat_channels(&[&a, &c]).is_err());
        assert!(slice_channels(&ab, 1, 2).is_err());
    }

    #[test]
    fn he_init_is_seeded() {
        let a = he_init(&[3, 3, 4, 8], 7).unwrap();
        let b = he_init(&[3, 3, 4, 8], 7).unwrap();
        let c = he_init(&[3, 3, 4, 8], 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
        assert!(he_init(&[5], 0).is_err());
        let k = ConvKernel::he(3, 4, 8, 1).unwrap();
        assert!(k.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(k.param_count(), 3 * 3 * 4 * 8 + 8);
    }

    #[test]
    fn he_init_variance() {
        // 10^5 draws from fan-in 50: variance should sit near 2/50.
        let t = he_init(&[100_000, 1], 3).unwrap();
        let t2 = he_init(&[5, 5, 2, 2_000], 3).unwrap();
        for (t, fan) in [(t, 100_000.0), (t2, 50.0)] {
            let n = t.len() as f64;
            let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let target = 2.0 / fan;
            assert!((var - target).abs() / target < 0.05, "var {var} vs {target}");
            assert!(mean.abs() < 4.0 * (target / n).sqrt());
        }
    }
}
