//! Dense `f32` tensors, channels-last and row-major.
//!
//! A [`Tensor`] is an immutable value: its storage sits behind an `Arc`, so
//! cloning is cheap and a tensor recorded on a tape can never change under
//! the tape's feet. Every storage allocation is reported to a per-thread
//! [`AllocCounter`] so benchmarks can read peak tensor memory without going
//! through the operating system.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Tensor dimensions: rank 1 to 4, every extent at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!(
                "dimension {pos} is zero in {dims:?}"
            )));
        }
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// `(height, width, channels)` of a rank-3 shape.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!(
                "expected (H, W, C) tensor, got {:?}",
                self.dims
            ))),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

/// Live and peak bytes held by tensor storage created on one thread.
#[derive(Debug, Default)]
pub struct AllocCounter {
    current: AtomicI64,
    peak: AtomicI64,
}

impl AllocCounter {
    fn acquire(&self, bytes: i64) {
        let now = self.current.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn release(&self, bytes: i64) {
        self.current.fetch_sub(bytes, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    pub current_bytes: u64,
    pub peak_bytes: u64,
}

thread_local! {
    static COUNTER: RefCell<Arc<AllocCounter>> = RefCell::new(Arc::new(AllocCounter::default()));
}

fn thread_counter() -> Arc<AllocCounter> {
    COUNTER.with(|c| c.borrow().clone())
}

/// Tracked allocation statistics for the calling thread.
pub fn alloc_stats() -> AllocStats {
    let c = thread_counter();
    AllocStats {
        current_bytes: c.current.load(Ordering::Relaxed).max(0) as u64,
        peak_bytes: c.peak.load(Ordering::Relaxed).max(0) as u64,
    }
}

/// Restart peak tracking from the current live byte count.
pub fn reset_peak() {
    let c = thread_counter();
    c.peak
        .store(c.current.load(Ordering::Relaxed), Ordering::Relaxed);
}

struct Storage {
    data: Vec<f32>,
    counter: Arc<AllocCounter>,
}

impl Storage {
    fn new(data: Vec<f32>) -> Self {
        let counter = thread_counter();
        counter.acquire(bytes_of(&data));
        Storage { data, counter }
    }
}

impl Clone for Storage {
    fn clone(&self) -> Self {
        Storage::new(self.data.clone())
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        self.counter.release(bytes_of(&self.data));
    }
}

fn bytes_of(data: &[f32]) -> i64 {
    std::mem::size_of_val(data) as i64
}

#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    storage: Arc<Storage>,
}

impl Tensor {
    /// A tensor of the given shape with every element equal to `fill`.
    pub fn new(dims: &[usize], fill: f32) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![fill; shape.numel()];
        Ok(Self::from_shape(shape, data))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::new(dims, 0.0)
    }

    pub fn from_vec(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "{} elements do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self::from_shape(shape, data))
    }

    /// Single-element rank-1 tensor.
    pub fn scalar(v: f32) -> Self {
        Self::from_shape(Shape { dims: vec![1] }, vec![v])
    }

    pub(crate) fn from_shape(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        self.shape.hwc()
    }

    pub fn len(&self) -> usize {
        self.storage.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.storage.data
    }

    /// Mutable access, copying the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut Arc::make_mut(&mut self.storage).data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.storage.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        match self.data() {
            [v] => Ok(*v),
            d => Err(Error::Contract(format!(
                "item() on tensor with {} elements",
                d.len()
            ))),
        }
    }

    /// Element at a multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.rank(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(self.dims()) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims());
            flat = flat * d + i;
        }
        self.data()[flat]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims()
            )));
        }
        Ok(Tensor {
            shape,
            storage: self.storage.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Self::from_shape(self.shape.clone(), data)
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_shape(self.shape.clone(), data))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Sum with fixed-size blocking so the result does not depend on threading.
    pub fn sum(&self) -> f32 {
        sum_f32(self.data())
    }

    pub fn mean(&self) -> f32 {
        self.sum() / self.len() as f32
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data().iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.len() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

pub(crate) fn sum_f32(values: &[f32]) -> f32 {
    values
        .chunks(1024)
        .map(|c| c.iter().sum::<f32>())
        .sum::<f32>()
}
