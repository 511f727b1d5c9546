//! Low-light image enhancement built around lossless Pack/UnPack
//! rearrangements between high- and low-resolution feature maps.
//!
//! Tensors are channels-last (`H x W x C`), row-major, 32-bit. Model and
//! loss code is written once against [`graph::Graph`] and runs either eagerly
//! or on the differentiation tape in [`autodiff`].

pub mod amplifier;
pub mod autodiff;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod filters;
pub mod graph;
pub mod model;
pub mod nnops;
pub mod objective;
pub mod rearrange;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
