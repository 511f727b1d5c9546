//! The operator set shared by eager evaluation and the differentiation tape.
//!
//! Model, loss and amplifier code is written once against [`Graph`]. Running
//! it on [`Eager`] computes values and drops intermediates as soon as they go
//! out of scope; running it on [`crate::autodiff::Tape`] records every
//! operation for a later backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::filters;
use crate::nnops::{self, ConvGeometry};
use crate::rearrange;
use crate::tensor::Tensor;

pub trait Graph {
    type Value: Clone;

    /// Bring a tensor into the graph without tracking gradients for it.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    /// Bring in a trainable tensor; on a tape its gradient is tracked.
    fn parameter(&mut self, t: Tensor) -> Self::Value;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, a: &Self::Value, c: f32) -> Self::Value;
    /// Multiply every element by a one-element value.
    fn scale_by(&mut self, a: &Self::Value, s: &Self::Value) -> Result<Self::Value>;
    fn abs(&mut self, a: &Self::Value) -> Self::Value;
    fn exp(&mut self, a: &Self::Value) -> Self::Value;
    fn clamp(&mut self, a: &Self::Value, lo: f32, hi: f32) -> Self::Value;
    fn sum(&mut self, a: &Self::Value) -> Self::Value;
    fn mean(&mut self, a: &Self::Value) -> Self::Value;
    fn reshape(&mut self, a: &Self::Value, dims: &[usize]) -> Result<Self::Value>;

    fn leaky_relu(&mut self, a: &Self::Value, slope: f32) -> Self::Value;
    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        geom: ConvGeometry,
    ) -> Result<Self::Value>;
    fn transposed_conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;
    fn interpolate_nearest(&mut self, x: &Self::Value, alpha: usize) -> Result<Self::Value>;
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn concat_channels(&mut self, xs: &[Self::Value]) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;

    fn pack(&mut self, x: &Self::Value, alpha: usize) -> Result<Self::Value>;
    fn unpack(&mut self, x: &Self::Value, alpha: usize) -> Result<Self::Value>;
    fn pixel_shuffle(&mut self, x: &Self::Value, alpha: usize) -> Result<Self::Value>;
    fn permute_channels(&mut self, x: &Self::Value, perm: &[usize]) -> Result<Self::Value>;

    fn avg_pool2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn blur(&mut self, x: &Self::Value, taps: &Arc<[f32]>) -> Result<Self::Value>;
    fn tv(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

/// Straight evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

pub(crate) fn scalar_of(t: &Tensor) -> Result<f32> {
    t.item()
        .map_err(|_| Error::shape(format!("expected a one-element tensor, got {:?}", t.dims())))
}

impl Graph for Eager {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn parameter(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x + y)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x - y)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.zip_map(b, |x, y| x * y)
    }

    fn scale(&mut self, a: &Tensor, c: f32) -> Tensor {
        a.map(|x| x * c)
    }

    fn scale_by(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let s = scalar_of(s)?;
        Ok(a.map(|x| x * s))
    }

    fn abs(&mut self, a: &Tensor) -> Tensor {
        a.map(f32::abs)
    }

    fn exp(&mut self, a: &Tensor) -> Tensor {
        a.map(f32::exp)
    }

    fn clamp(&mut self, a: &Tensor, lo: f32, hi: f32) -> Tensor {
        a.map(|x| x.clamp(lo, hi))
    }

    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }

    fn mean(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.mean())
    }

    fn reshape(&mut self, a: &Tensor, dims: &[usize]) -> Result<Tensor> {
        a.reshape(dims)
    }

    fn leaky_relu(&mut self, a: &Tensor, slope: f32) -> Tensor {
        nnops::leaky_relu(a, slope)
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, geom: ConvGeometry) -> Result<Tensor> {
        nnops::conv2d(x, w, b, geom)
    }

    fn transposed_conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        nnops::transposed_conv2d(x, w, b, stride, padding)
    }

    fn interpolate_nearest(&mut self, x: &Tensor, alpha: usize) -> Result<Tensor> {
        nnops::interpolate_nearest(x, alpha)
    }

    fn linear(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        nnops::linear(x, w, b)
    }

    fn concat_channels(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = xs.iter().collect();
        nnops::concat_channels(&refs)
    }

    fn slice_channels(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        nnops::slice_channels(x, start, len)
    }

    fn pack(&mut self, x: &Tensor, alpha: usize) -> Result<Tensor> {
        rearrange::pack(x, alpha)
    }

    fn unpack(&mut self, x: &Tensor, alpha: usize) -> Result<Tensor> {
        rearrange::unpack(x, alpha)
    }

    fn pixel_shuffle(&mut self, x: &Tensor, alpha: usize) -> Result<Tensor> {
        rearrange::pixel_shuffle(x, alpha)
    }

    fn permute_channels(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        rearrange::permute_channels(x, perm)
    }

    fn avg_pool2(&mut self, x: &Tensor) -> Result<Tensor> {
        filters::avg_pool2(x)
    }

    fn blur(&mut self, x: &Tensor, taps: &Arc<[f32]>) -> Result<Tensor> {
        filters::blur(x, taps)
    }

    fn tv(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(filters::tv(x)?))
    }
}
