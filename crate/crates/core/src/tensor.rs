//! Dense row-major tensors and the seeded random source used for initialization.
//!
//! A tensor stores its elements in batch/channel/height/width order, so the
//! element `(n, c, h, w)` of an `N×C×H×W` tensor lives at
//! `((n·C + c)·H + h)·W + w`. Tensors of lower rank (per-channel vectors,
//! matrices) use the same row-major rule over their own axes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Element type of a tensor. Deployment paths use `f32`; `f64` exists for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// Dtype code used by the model file format.
    const DTYPE_CODE: u8;
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const NAME: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn checked_len(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::InvalidShape(format!(
            "rank must be 1..={MAX_RANK}, got {shape:?}"
        )));
    }
    let mut len = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero extent in {shape:?}")));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidShape(format!("element count overflows for {shape:?}")))?;
    }
    Ok(len)
}

impl<T: Scalar> Tensor<T> {
    /// Tensor of the given shape with every element equal to `fill`.
    pub fn new(shape: &[usize], fill: T) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian samples drawn in storage order from `rng`.
    pub fn rand_normal(shape: &[usize], mean: T, std: T, rng: &mut Rng) -> Result<Self> {
        if !(std >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "standard deviation must be non-negative, got {std}"
            )));
        }
        let len = checked_len(shape)?;
        let (mean, std) = (mean.as_f64(), std.as_f64());
        let data = (0..len).map(|_| T::of(mean + std * rng.normal())).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `[N, C, H, W]` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::InvalidShape(format!("expected rank 4, got {s:?}"))),
        }
    }

    /// Flat index of a multi-index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let at = self.offset(index);
        self.data[at] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = checked_len(shape)?;
        if len != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Maximum absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack rank-4 tensors with identical `C×H×W` along the batch axis.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.dims4()?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::InvalidShape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Self::from_vec(&[n, c, h, w], data)
    }

    /// Sample `n` of a rank-4 tensor as a `1×C×H×W` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let [bn, c, h, w] = self.dims4()?;
        if n >= bn {
            return Err(Error::InvalidArgument(format!("sample {n} out of {bn}")));
        }
        let plane = c * h * w;
        Self::from_vec(&[1, c, h, w], self.data[n * plane..(n + 1) * plane].to_vec())
    }
}

/// Seeded random source.
///
/// Backed by ChaCha8 seeded through `SeedableRng::seed_from_u64`; Gaussian
/// draws use the ziggurat sampler of `rand_distr::StandardNormal`. The stream
/// for a given seed is the same on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        items.shuffle(&mut self.inner);
    }
}
