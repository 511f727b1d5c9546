//! Lossless space-to-depth (`pack`) and depth-to-space (`unpack`) kernels.
//!
//! Layout contract, for a tensor of `G` channels and factor `α`:
//!
//! ```text
//! pack:   lr[y, x, (r*α + c)*G + g] = hr[y*α + r, x*α + c, g]
//! unpack: the exact inverse of pack
//! ```
//!
//! i.e. the α×α offsets are visited row-major and each one owns a
//! contiguous block of `G` channels. This keeps the `G` colours of one HR
//! pixel adjacent in LR channel space. [`pixel_shuffle`] is the usual
//! depth-to-space layout (`lr channel = g*α² + r*α + c`), which spreads the
//! colours of one HR pixel `α²` channels apart.
//!
//! The module also carries the HR-space reference used to check that a
//! convolution in LR followed by `unpack` is the same linear map as zero
//! insertion, an HR convolution, and a fixed regrouping of HR pixels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Scaling factor plus the number of channels that travel together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RearrangeSpec {
    pub alpha: usize,
    pub group: usize,
}

impl RearrangeSpec {
    pub fn new(alpha: usize, group: usize) -> Result<Self> {
        if alpha == 0 || group == 0 {
            return Err(Error::Config(format!(
                "alpha and channel group must be positive (alpha={alpha}, group={group})"
            )));
        }
        Ok(RearrangeSpec { alpha, group })
    }

    /// `pack` with the group checked against the input channel count.
    pub fn pack(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, c) = x.hwc()?;
        if c != self.group {
            return Err(Error::shape(format!(
                "pack expects {} channels, got {c}",
                self.group
            )));
        }
        pack(x, self.alpha)
    }

    pub fn unpack(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, c) = x.hwc()?;
        if c != self.group * self.alpha * self.alpha {
            return Err(Error::shape(format!(
                "unpack {}x with group {} expects {} channels, got {c}",
                self.alpha,
                self.group,
                self.group * self.alpha * self.alpha
            )));
        }
        unpack(x, self.alpha)
    }
}

fn check_alpha(alpha: usize) -> Result<()> {
    if alpha == 0 {
        return Err(Error::shape("alpha must be at least 1"));
    }
    Ok(())
}

/// Space-to-depth in loop order `for row in 0..α { for col in 0..α { .. } }`.
pub fn pack(x: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (h, w, g) = x.hwc()?;
    if h % alpha != 0 || w % alpha != 0 {
        return Err(Error::shape(format!(
            "pack {alpha}x needs spatial dims divisible by {alpha}, got {h}x{w}"
        )));
    }
    let (lh, lw, lc) = (h / alpha, w / alpha, g * alpha * alpha);
    let src = x.data();
    let mut out = vec![0.0f32; lh * lw * lc];
    out.par_chunks_mut(lw * lc).enumerate().for_each(|(y, row)| {
        for x_lr in 0..lw {
            let dst = &mut row[x_lr * lc..(x_lr + 1) * lc];
            for r in 0..alpha {
                let src_row = (y * alpha + r) * w * g;
                for c in 0..alpha {
                    let s = src_row + (x_lr * alpha + c) * g;
                    let d = (r * alpha + c) * g;
                    dst[d..d + g].copy_from_slice(&src[s..s + g]);
                }
            }
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[lh, lw, lc])?, out))
}

/// Depth-to-space; exact inverse of [`pack`].
pub fn unpack(x: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (lh, lw, lc) = x.hwc()?;
    let a2 = alpha * alpha;
    if lc % a2 != 0 {
        return Err(Error::shape(format!(
            "unpack {alpha}x needs channels divisible by {a2}, got {lc}"
        )));
    }
    let g = lc / a2;
    let (h, w) = (lh * alpha, lw * alpha);
    let src = x.data();
    let mut out = vec![0.0f32; h * w * g];
    out.par_chunks_mut(w * g).enumerate().for_each(|(yy, row)| {
        let (y, r) = (yy / alpha, yy % alpha);
        for xx in 0..w {
            let (x_lr, c) = (xx / alpha, xx % alpha);
            let s = (y * lw + x_lr) * lc + (r * alpha + c) * g;
            row[xx * g..(xx + 1) * g].copy_from_slice(&src[s..s + g]);
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[h, w, g])?, out))
}

/// Standard depth-to-space: output channel `g` at block offset `(r, c)`
/// reads input channel `g*α² + r*α + c`.
pub fn pixel_shuffle(x: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (lh, lw, lc) = x.hwc()?;
    let a2 = alpha * alpha;
    if lc % a2 != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle {alpha}x needs channels divisible by {a2}, got {lc}"
        )));
    }
    let g = lc / a2;
    let (h, w) = (lh * alpha, lw * alpha);
    let src = x.data();
    let mut out = vec![0.0f32; h * w * g];
    out.par_chunks_mut(w * g).enumerate().for_each(|(yy, row)| {
        let (y, r) = (yy / alpha, yy % alpha);
        for xx in 0..w {
            let (x_lr, c) = (xx / alpha, xx % alpha);
            let base = (y * lw + x_lr) * lc + r * alpha + c;
            for ch in 0..g {
                row[xx * g + ch] = src[base + ch * a2];
            }
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[h, w, g])?, out))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (h, w, g) = x.hwc()?;
    if h % alpha != 0 || w % alpha != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle {alpha}x needs spatial dims divisible by {alpha}, got {h}x{w}"
        )));
    }
    let a2 = alpha * alpha;
    let (lh, lw, lc) = (h / alpha, w / alpha, g * a2);
    let src = x.data();
    let mut out = vec![0.0f32; lh * lw * lc];
    out.par_chunks_mut(lw * lc).enumerate().for_each(|(y, row)| {
        for x_lr in 0..lw {
            for ch in 0..g {
                for r in 0..alpha {
                    for c in 0..alpha {
                        let s = ((y * alpha + r) * w + x_lr * alpha + c) * g + ch;
                        row[x_lr * lc + ch * a2 + r * alpha + c] = src[s];
                    }
                }
            }
        }
    });
    Ok(Tensor::from_shape(Shape::new(&[lh, lw, lc])?, out))
}

/// LR channel read by `unpack` for colour `g` at block offset `(r, c)`.
pub fn unpack_source_channel(g: usize, r: usize, c: usize, groups: usize, alpha: usize) -> usize {
    (r * alpha + c) * groups + g
}

/// LR channel read by `pixel_shuffle` for colour `g` at block offset `(r, c)`.
pub fn pixel_shuffle_source_channel(g: usize, r: usize, c: usize, alpha: usize) -> usize {
    g * alpha * alpha + r * alpha + c
}

/// Channel permutation `p` with `unpack(x) == pixel_shuffle(permute_channels(x, p))`.
pub fn unpack_to_pixel_shuffle_permutation(channels: usize, alpha: usize) -> Result<Vec<usize>> {
    let a2 = alpha * alpha;
    if alpha == 0 || channels % a2 != 0 {
        return Err(Error::shape(format!(
            "{channels} channels cannot be split into {alpha}x{alpha} blocks"
        )));
    }
    let groups = channels / a2;
    let mut perm = vec![0; channels];
    for g in 0..groups {
        for r in 0..alpha {
            for c in 0..alpha {
                perm[pixel_shuffle_source_channel(g, r, c, alpha)] =
                    unpack_source_channel(g, r, c, groups, alpha);
            }
        }
    }
    Ok(perm)
}

/// `out[.., k] = x[.., perm[k]]`.
pub fn permute_channels(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if perm.len() != c || perm.iter().any(|&p| p >= c) {
        return Err(Error::shape(format!(
            "permutation of length {} does not index {c} channels",
            perm.len()
        )));
    }
    let src = x.data();
    let mut out = vec![0.0f32; h * w * c];
    for (px, dst) in out.chunks_mut(c).enumerate() {
        let s = &src[px * c..(px + 1) * c];
        for (d, &p) in dst.iter_mut().zip(perm) {
            *d = s[p];
        }
    }
    Ok(Tensor::from_shape(x.shape().clone(), out))
}

/// 2×2 colour-filter arrangement, named by the top-left 2×2 block read
/// row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BayerPhase {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}

impl BayerPhase {
    pub const ALL: [BayerPhase; 4] = [
        BayerPhase::Rggb,
        BayerPhase::Bggr,
        BayerPhase::Grbg,
        BayerPhase::Gbrg,
    ];

    /// Block offsets `(row, col)` of R, G1 (green on the red row), G2 and B.
    pub fn offsets(self) -> [(usize, usize); 4] {
        match self {
            BayerPhase::Rggb => [(0, 0), (0, 1), (1, 0), (1, 1)],
            BayerPhase::Bggr => [(1, 1), (1, 0), (0, 1), (0, 0)],
            BayerPhase::Grbg => [(0, 1), (0, 0), (1, 1), (1, 0)],
            BayerPhase::Gbrg => [(1, 0), (1, 1), (0, 0), (0, 1)],
        }
    }

    /// RGB channel index (0, 1, 2) sampled at block offset `(r, c)`.
    pub fn color_at(self, r: usize, c: usize) -> usize {
        let slot = self
            .offsets()
            .iter()
            .position(|&o| o == (r % 2, c % 2))
            .expect("offsets cover the 2x2 block");
        [0, 1, 1, 2][slot]
    }

    pub fn name(self) -> &'static str {
        match self {
            BayerPhase::Rggb => "RGGB",
            BayerPhase::Bggr => "BGGR",
            BayerPhase::Grbg => "GRBG",
            BayerPhase::Gbrg => "GBRG",
        }
    }
}

impl std::str::FromStr for BayerPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BayerPhase::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown Bayer phase `{s}`")))
    }
}

impl std::fmt::Display for BayerPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Channel permutation that reorders `pack(raw, 2)` into (R, G1, G2, B).
pub fn bayer_channel_order(phase: BayerPhase) -> [usize; 4] {
    phase.offsets().map(|(r, c)| r * 2 + c)
}

/// Split a single-channel mosaic into half-resolution (R, G1, G2, B) planes.
pub fn bayer_split(raw: &Tensor, phase: BayerPhase) -> Result<Tensor> {
    let (h, w, c) = raw.hwc()?;
    if c != 1 {
        return Err(Error::shape(format!("Bayer mosaic must have 1 channel, got {c}")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("Bayer mosaic dims must be even, got {h}x{w}")));
    }
    let packed = pack(raw, 2)?;
    if phase == BayerPhase::Rggb {
        return Ok(packed);
    }
    permute_channels(&packed, &bayer_channel_order(phase))
}

/// Place each LR pixel at `(α·y, α·x)` of an otherwise zero HR grid.
pub fn zero_insert(x: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (h, w, c) = x.hwc()?;
    let (hh, ww) = (h * alpha, w * alpha);
    let mut out = vec![0.0f32; hh * ww * c];
    let src = x.data();
    for y in 0..h {
        for xx in 0..w {
            let d = ((y * alpha) * ww + xx * alpha) * c;
            let s = (y * w + xx) * c;
            out[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(Tensor::from_shape(Shape::new(&[hh, ww, c])?, out))
}

/// Assemble the HR kernel equivalent to an LR convolution followed by
/// `pixel_shuffle`.
///
/// `w_lr` is `[k, k, Cin, G·α²]` with odd `k`; LR output channel
/// `g·α² + i·α + j` is the small kernel for colour `g` at HR phase `(i, j)`.
/// Its tap `(a, b)` lands at HR tap `(α·a + α−1−i, α·b + α−1−j)` of the
/// `[α·k, α·k, Cin, G]` result, so every HR tap belongs to exactly one phase.
pub fn compose_hr_kernel(w_lr: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let [k, k2, cin, cout_lr] = *w_lr.dims() else {
        return Err(Error::shape("LR kernel must be rank 4"));
    };
    let a2 = alpha * alpha;
    if k != k2 || k % 2 == 0 || cout_lr % a2 != 0 {
        return Err(Error::shape(format!(
            "LR kernel {:?} must be square, odd, with outputs divisible by {a2}",
            w_lr.dims()
        )));
    }
    let groups = cout_lr / a2;
    let kk = alpha * k;
    let mut out = vec![0.0f32; kk * kk * cin * groups];
    let src = w_lr.data();
    for a in 0..k {
        for b in 0..k {
            for i in 0..alpha {
                for j in 0..alpha {
                    let u = alpha * a + (alpha - 1 - i);
                    let v = alpha * b + (alpha - 1 - j);
                    for ci in 0..cin {
                        for g in 0..groups {
                            let m = pixel_shuffle_source_channel(g, i, j, alpha);
                            out[((u * kk + v) * cin + ci) * groups + g] =
                                src[((a * k + b) * cin + ci) * cout_lr + m];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[kk, kk, cin, groups], out)
}

/// Zero-insertion upsampling by `α` followed by an HR cross-correlation with
/// `w_hr` (`[α·k, α·k, Cin, G]`). Accumulates in `f64`; meant for small
/// reference instances.
pub fn upsample_conv_hr(t_lr: &Tensor, w_hr: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (h, w, cin) = t_lr.hwc()?;
    let [kk, kk2, wcin, groups] = *w_hr.dims() else {
        return Err(Error::shape("HR kernel must be rank 4"));
    };
    if kk != kk2 || kk % alpha != 0 || (kk / alpha) % 2 == 0 || wcin != cin {
        return Err(Error::shape(format!(
            "HR kernel {:?} incompatible with alpha {alpha} and {cin} input channels",
            w_hr.dims()
        )));
    }
    let k = kk / alpha;
    let pad = (k - 1) / 2;
    let offset = (alpha * pad + alpha - 1) as isize;
    let t_hr = zero_insert(t_lr, alpha)?;
    let (hh, ww) = (h * alpha, w * alpha);
    let (src, wts) = (t_hr.data(), w_hr.data());
    let mut out = vec![0.0f32; hh * ww * groups];
    for yy in 0..hh {
        for xx in 0..ww {
            for g in 0..groups {
                let mut acc = 0.0f64;
                for u in 0..kk {
                    let sy = yy as isize + u as isize - offset;
                    if sy < 0 || sy >= hh as isize {
                        continue;
                    }
                    for v in 0..kk {
                        let sx = xx as isize + v as isize - offset;
                        if sx < 0 || sx >= ww as isize {
                            continue;
                        }
                        let s = (sy as usize * ww + sx as usize) * cin;
                        for ci in 0..cin {
                            acc += src[s + ci] as f64
                                * wts[((u * kk + v) * cin + ci) * groups + g] as f64;
                        }
                    }
                }
                out[(yy * ww + xx) * groups + g] = acc as f32;
            }
        }
    }
    Tensor::from_vec(&[hh, ww, groups], out)
}

/// Move HR pixels within each α×α block so the pixel-shuffle arrangement
/// becomes the unpack arrangement.
///
/// Destination `(offset (i, j), colour g)` takes the source at
/// `(offset (i', j'), colour g')` where `m = (i·α + j)·G + g`,
/// `g' = m / α²` and `i'·α + j' = m mod α²`.
pub fn regroup_hr(o_hr: &Tensor, alpha: usize) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (hh, ww, groups) = o_hr.hwc()?;
    if hh % alpha != 0 || ww % alpha != 0 {
        return Err(Error::shape("regroup needs spatial dims divisible by alpha"));
    }
    let a2 = alpha * alpha;
    let src = o_hr.data();
    let mut out = vec![0.0f32; src.len()];
    for by in 0..hh / alpha {
        for bx in 0..ww / alpha {
            for i in 0..alpha {
                for j in 0..alpha {
                    for g in 0..groups {
                        let m = unpack_source_channel(g, i, j, groups, alpha);
                        let (gs, phase) = (m / a2, m % a2);
                        let (is, js) = (phase / alpha, phase % alpha);
                        let d = ((by * alpha + i) * ww + bx * alpha + j) * groups + g;
                        let s = ((by * alpha + is) * ww + bx * alpha + js) * groups + gs;
                        out[d] = src[s];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[hh, ww, groups], out)
}

/// HR-space ground truth for an LR convolution followed by `unpack`:
/// zero insertion, HR convolution with `w_hr`, then [`regroup_hr`].
pub fn reference_upsample_conv_hr(t_lr: &Tensor, w_hr: &Tensor, alpha: usize) -> Result<Tensor> {
    regroup_hr(&upsample_conv_hr(t_lr, w_hr, alpha)?, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn alpha_one_is_identity() {
        let x = iota(&[3, 5, 2]);
        assert!(pack(&x, 1).unwrap().bit_eq(&x));
        assert!(unpack(&x, 1).unwrap().bit_eq(&x));
        assert!(pixel_shuffle(&x, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn pack_rejects_indivisible_dims() {
        let x = iota(&[6, 4, 3]);
        assert!(matches!(pack(&x, 4), Err(Error::Shape(_))));
        let y = iota(&[2, 2, 6]);
        assert!(matches!(unpack(&y, 2), Err(Error::Shape(_))));
        assert!(matches!(pixel_shuffle(&y, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn wrappers_check_group() {
        let spec = RearrangeSpec::new(2, 3).unwrap();
        assert!(spec.pack(&iota(&[4, 4, 3])).is_ok());
        assert!(spec.pack(&iota(&[4, 4, 1])).is_err());
        assert!(spec.unpack(&iota(&[2, 2, 12])).is_ok());
        assert!(spec.unpack(&iota(&[2, 2, 16])).is_err());
        assert!(RearrangeSpec::new(0, 3).is_err());
    }

    #[test]
    fn bayer_split_2x2() {
        let raw = Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = bayer_split(&raw, BayerPhase::Rggb).unwrap();
        assert_eq!(s.dims(), &[1, 1, 4]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = bayer_split(&raw, BayerPhase::Bggr).unwrap();
        assert_eq!(s.data(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn bayer_split_4x4_red_plane() {
        // Hand-enumerated: red sits at even rows and even columns.
        let raw = iota(&[4, 4, 1]);
        let s = bayer_split(&raw, BayerPhase::Rggb).unwrap();
        let red: Vec<f32> = s.data().iter().step_by(4).copied().collect();
        assert_eq!(red, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn bayer_split_constant_and_odd() {
        let raw = Tensor::new(&[4, 6, 1], 0.25).unwrap();
        let s = bayer_split(&raw, BayerPhase::Grbg).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
        assert!(bayer_split(&Tensor::new(&[3, 4, 1], 0.0).unwrap(), BayerPhase::Rggb).is_err());
        assert!(bayer_split(&Tensor::new(&[4, 4, 2], 0.0).unwrap(), BayerPhase::Rggb).is_err());
    }

    #[test]
    fn phase_colour_lookup() {
        assert_eq!(BayerPhase::Rggb.color_at(0, 0), 0);
        assert_eq!(BayerPhase::Rggb.color_at(1, 1), 2);
        assert_eq!(BayerPhase::Gbrg.color_at(0, 1), 2);
        assert_eq!("bggr".parse::<BayerPhase>().unwrap(), BayerPhase::Bggr);
    }

    #[test]
    fn channel_distance_at_alpha_8() {
        let ps = pixel_shuffle_source_channel(2, 0, 0, 8) - pixel_shuffle_source_channel(0, 0, 0, 8);
        assert_eq!(ps, 128);
        let up = unpack_source_channel(2, 0, 0, 3, 8) - unpack_source_channel(0, 0, 0, 3, 8);
        assert_eq!(up, 2);
    }

    #[test]
    fn zero_conv_input_gives_zero_reference() {
        let t = Tensor::zeros(&[4, 4, 2]).unwrap();
        let w = Tensor::new(&[6, 6, 2, 1], 0.3).unwrap();
        let o = reference_upsample_conv_hr(&t, &w, 2).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }
}
