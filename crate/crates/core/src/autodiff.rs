//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value, its parents and
//! whatever context its backward rule needs. Parents always precede their
//! children, so [`Tape::backward`] is a single reverse sweep. A node feeding
//! several consumers receives the sum of their contributions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::filters;
use crate::graph::{scalar_of, Graph};
use crate::nnops::{self, ConvGeometry};
use crate::rearrange;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    ScaleBy(Var, Var),
    Abs(Var),
    Exp(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LeakyRelu { x: Var, slope: f32 },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    TransposedConv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    InterpolateNearest { x: Var, alpha: usize },
    Linear { x: Var, w: Var, b: Var },
    Concat(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    Pack { x: Var, alpha: usize },
    Unpack { x: Var, alpha: usize },
    PixelShuffle { x: Var, alpha: usize },
    PermuteChannels { x: Var, perm: Arc<[usize]> },
    AvgPool2(Var),
    Blur { x: Var, taps: Arc<[f32]> },
    Tv(Var),
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | ScaleBy(a, b) => vec![*a, *b],
            Scale(a, _) | Abs(a) | Exp(a) | Sum(a) | Mean(a) | Reshape(a) | AvgPool2(a) | Tv(a) => {
                vec![*a]
            }
            Clamp { x, .. }
            | LeakyRelu { x, .. }
            | InterpolateNearest { x, .. }
            | SliceChannels { x, .. }
            | Pack { x, .. }
            | Unpack { x, .. }
            | PixelShuffle { x, .. }
            | PermuteChannels { x, .. }
            | Blur { x, .. } => vec![*x],
            Conv2d { x, w, b, .. } | TransposedConv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Linear { x, w, b } => vec![*x, *w, *b],
            Concat(xs) => xs.clone(),
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            ScaleBy(..) => "scale_by",
            Abs(_) => "abs",
            Exp(_) => "exp",
            Clamp { .. } => "clamp",
            Sum(_) => "sum",
            Mean(_) => "mean",
            Reshape(_) => "reshape",
            LeakyRelu { .. } => "leaky_relu",
            Conv2d { .. } => "conv2d",
            TransposedConv2d { .. } => "transposed_conv2d",
            InterpolateNearest { .. } => "interpolate_nearest",
            Linear { .. } => "linear",
            Concat(_) => "concat",
            SliceChannels { .. } => "slice_channels",
            Pack { .. } => "pack",
            Unpack { .. } => "unpack",
            PixelShuffle { .. } => "pixel_shuffle",
            PermuteChannels { .. } => "permute_channels",
            AvgPool2(_) => "avg_pool2",
            Blur { .. } => "blur",
            Tv(_) => "tv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` requires gradients
    /// and the root depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::from_shape(like.shape().clone(), vec![0.0; like.len()]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    fn push(&mut self, value: Tensor, op: Op, leaf_grad: bool) -> Var {
        let requires_grad = match op {
            Op::Leaf => leaf_grad,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(TapeNode {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Differentiate a one-element `root` with respect to every node that
    /// requires gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract(format!("unknown node {}", root.0)))?;
        if root_value.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, node {} has shape {:?}",
                root.0,
                root_value.value.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !root_value.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::from_shape(root_value.value.shape().clone(), vec![1.0]));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, contribution) in self.vjp(&node.op, &node.value, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contribution.dims(), self.val(parent).dims());
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Contributions of one node's upstream gradient `g` to its parents.
    fn vjp(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Op::*;
        let like = |v: Var, data: Vec<f32>| Tensor::from_shape(self.val(v).shape().clone(), data);
        Ok(match op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Mul(a, b) => vec![
                (*a, g.zip_map(self.val(*b), |g, y| g * y)?),
                (*b, g.zip_map(self.val(*a), |g, x| g * x)?),
            ],
            Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            ScaleBy(a, s) => {
                let sv = scalar_of(self.val(*s))?;
                let ds = crate::tensor::sum_f32(
                    &g.data()
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(g, x)| g * x)
                        .collect::<Vec<_>>(),
                );
                vec![
                    (*a, g.map(|v| v * sv)),
                    (*s, like(*s, vec![ds])),
                ]
            }
            Abs(a) => vec![(*a, self.val(*a).zip_map(g, |x, g| g * sign(x))?)],
            Exp(a) => vec![(*a, out.zip_map(g, |y, g| g * y)?)],
            Clamp { x, lo, hi } => vec![(
                *x,
                self.val(*x)
                    .zip_map(g, |v, g| if v >= *lo && v <= *hi { g } else { 0.0 })?,
            )],
            Sum(a) => {
                let gv = g.item()?;
                vec![(*a, like(*a, vec![gv; self.val(*a).len()]))]
            }
            Mean(a) => {
                let n = self.val(*a).len();
                let gv = g.item()? / n as f32;
                vec![(*a, like(*a, vec![gv; n]))]
            }
            Reshape(a) => vec![(*a, g.reshape(self.val(*a).dims())?)],
            LeakyRelu { x, slope } => vec![(*x, nnops::leaky_relu_backward(self.val(*x), g, *slope)?)],
            Conv2d { x, w, b, geom } => {
                let gr = nnops::conv2d_backward(self.val(*x), self.val(*w), g, *geom)?;
                let mut v = vec![(*x, gr.dx), (*w, gr.dw)];
                v.extend(b.map(|b| (b, gr.db)));
                v
            }
            TransposedConv2d { x, w, b, stride, padding } => {
                let gr = nnops::transposed_conv2d_backward(self.val(*x), self.val(*w), g, *stride, *padding)?;
                let mut v = vec![(*x, gr.dx), (*w, gr.dw)];
                v.extend(b.map(|b| (b, gr.db)));
                v
            }
            InterpolateNearest { x, alpha } => {
                vec![(*x, nnops::interpolate_nearest_backward(g, *alpha)?)]
            }
            Linear { x, w, b } => {
                let gr = nnops::linear_backward(self.val(*x), self.val(*w), g)?;
                vec![(*x, gr.dx), (*w, gr.dw), (*b, gr.db)]
            }
            Concat(xs) => {
                let mut start = 0;
                let mut v = Vec::with_capacity(xs.len());
                for x in xs {
                    let c = self.val(*x).hwc()?.2;
                    v.push((*x, nnops::slice_channels(g, start, c)?));
                    start += c;
                }
                v
            }
            SliceChannels { x, start } => {
                let (h, w, c) = self.val(*x).hwc()?;
                let len = g.hwc()?.2;
                let mut d = vec![0.0f32; h * w * c];
                for (px, src) in g.data().chunks(len).enumerate() {
                    d[px * c + start..px * c + start + len].copy_from_slice(src);
                }
                vec![(*x, like(*x, d))]
            }
            Pack { x, alpha } => vec![(*x, rearrange::unpack(g, *alpha)?)],
            Unpack { x, alpha } => vec![(*x, rearrange::pack(g, *alpha)?)],
            PixelShuffle { x, alpha } => vec![(*x, rearrange::pixel_unshuffle(g, *alpha)?)],
            PermuteChannels { x, perm } => {
                let c = perm.len();
                let mut d = vec![0.0f32; g.len()];
                for (px, src) in g.data().chunks(c).enumerate() {
                    for (k, &p) in perm.iter().enumerate() {
                        d[px * c + p] += src[k];
                    }
                }
                vec![(*x, like(*x, d))]
            }
            AvgPool2(x) => vec![(*x, filters::avg_pool2_backward(self.val(*x).shape(), g)?)],
            Blur { x, taps } => vec![(*x, filters::blur_backward(g, taps)?)],
            Tv(x) => vec![(*x, filters::tv_backward(self.val(*x), g.item()?)?)],
        })
    }
}

fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn parameter(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.val(*a).zip_map(self.val(*b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(*a, *b), false))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.val(*a).zip_map(self.val(*b), |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(*a, *b), false))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.val(*a).zip_map(self.val(*b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(*a, *b), false))
    }

    fn scale(&mut self, a: &Var, c: f32) -> Var {
        let t = self.val(*a).map(|x| x * c);
        self.push(t, Op::Scale(*a, c), false)
    }

    fn scale_by(&mut self, a: &Var, s: &Var) -> Result<Var> {
        let sv = scalar_of(self.val(*s))?;
        let t = self.val(*a).map(|x| x * sv);
        Ok(self.push(t, Op::ScaleBy(*a, *s), false))
    }

    fn abs(&mut self, a: &Var) -> Var {
        let t = self.val(*a).map(f32::abs);
        self.push(t, Op::Abs(*a), false)
    }

    fn exp(&mut self, a: &Var) -> Var {
        let t = self.val(*a).map(f32::exp);
        self.push(t, Op::Exp(*a), false)
    }

    fn clamp(&mut self, a: &Var, lo: f32, hi: f32) -> Var {
        let t = self.val(*a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp { x: *a, lo, hi }, false)
    }

    fn sum(&mut self, a: &Var) -> Var {
        let t = Tensor::scalar(self.val(*a).sum());
        self.push(t, Op::Sum(*a), false)
    }

    fn mean(&mut self, a: &Var) -> Var {
        let t = Tensor::scalar(self.val(*a).mean());
        self.push(t, Op::Mean(*a), false)
    }

    fn reshape(&mut self, a: &Var, dims: &[usize]) -> Result<Var> {
        let t = self.val(*a).reshape(dims)?;
        Ok(self.push(t, Op::Reshape(*a), false))
    }

    fn leaky_relu(&mut self, a: &Var, slope: f32) -> Var {
        let t = nnops::leaky_relu(self.val(*a), slope);
        self.push(t, Op::LeakyRelu { x: *a, slope }, false)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, geom: ConvGeometry) -> Result<Var> {
        let t = nnops::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), geom)?;
        Ok(self.push(t, Op::Conv2d { x: *x, w: *w, b: b.copied(), geom }, false))
    }

    fn transposed_conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let t = nnops::transposed_conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), stride, padding)?;
        let op = Op::TransposedConv2d {
            x: *x,
            w: *w,
            b: b.copied(),
            stride,
            padding,
        };
        Ok(self.push(t, op, false))
    }

    fn interpolate_nearest(&mut self, x: &Var, alpha: usize) -> Result<Var> {
        let t = nnops::interpolate_nearest(self.val(*x), alpha)?;
        Ok(self.push(t, Op::InterpolateNearest { x: *x, alpha }, false))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        let t = nnops::linear(self.val(*x), self.val(*w), self.val(*b))?;
        Ok(self.push(t, Op::Linear { x: *x, w: *w, b: *b }, false))
    }

    fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = xs.iter().map(|v| self.val(*v)).collect();
        let t = nnops::concat_channels(&refs)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), false))
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let t = nnops::slice_channels(self.val(*x), start, len)?;
        Ok(self.push(t, Op::SliceChannels { x: *x, start }, false))
    }

    fn pack(&mut self, x: &Var, alpha: usize) -> Result<Var> {
        let t = rearrange::pack(self.val(*x), alpha)?;
        Ok(self.push(t, Op::Pack { x: *x, alpha }, false))
    }

    fn unpack(&mut self, x: &Var, alpha: usize) -> Result<Var> {
        let t = rearrange::unpack(self.val(*x), alpha)?;
        Ok(self.push(t, Op::Unpack { x: *x, alpha }, false))
    }

    fn pixel_shuffle(&mut self, x: &Var, alpha: usize) -> Result<Var> {
        let t = rearrange::pixel_shuffle(self.val(*x), alpha)?;
        Ok(self.push(t, Op::PixelShuffle { x: *x, alpha }, false))
    }

    fn permute_channels(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        let t = rearrange::permute_channels(self.val(*x), perm)?;
        Ok(self.push(t, Op::PermuteChannels { x: *x, perm: perm.into() }, false))
    }

    fn avg_pool2(&mut self, x: &Var) -> Result<Var> {
        let t = filters::avg_pool2(self.val(*x))?;
        Ok(self.push(t, Op::AvgPool2(*x), false))
    }

    fn blur(&mut self, x: &Var, taps: &Arc<[f32]>) -> Result<Var> {
        let t = filters::blur(self.val(*x), taps)?;
        Ok(self.push(t, Op::Blur { x: *x, taps: taps.clone() }, false))
    }

    fn tv(&mut self, x: &Var) -> Result<Var> {
        let t = Tensor::scalar(filters::tv(self.val(*x))?);
        Ok(self.push(t, Op::Tv(*x), false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap());
        let s = tape.sum(&x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let s = tape.sum(&sq);
        let half = tape.scale(&s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]).unwrap());
        let y = tape.scale(&x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let a = tape.scale(&x, 3.0);
        let b = tape.add(&a, &x).unwrap();
        let g = tape.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn parents_precede_children_and_grads_match_shapes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[4, 4, 2], 0.3).unwrap());
        let w = tape.param(Tensor::new(&[3, 3, 2, 3], 0.1).unwrap());
        let y = tape.conv2d(&x, &w, None, ConvGeometry::same(3)).unwrap();
        let p = tape.pack(&y, 2).unwrap();
        let m = tape.mean(&p);
        for (i, n) in tape.nodes().iter().enumerate() {
            assert!(n.op.parents().iter().all(|p| p.id() < i));
        }
        let g = tape.backward(m).unwrap();
        for (i, n) in tape.nodes().iter().enumerate() {
            if n.requires_grad {
                assert_eq!(g.get(Var(i)).unwrap().dims(), n.value.dims());
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(&[2], 1.0).unwrap());
        let x = tape.param(Tensor::new(&[2], 2.0).unwrap());
        let y = tape.mul(&c, &x).unwrap();
        let s = tape.sum(&y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
