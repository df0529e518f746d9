//! Dense row-major tensors and a tape-based reverse-mode differentiation
//! engine.
//!
//! A [`Tensor`] is an immutable value (shape plus shared data) with an
//! optional gradient buffer. Differentiable computation happens on a
//! [`Graph`]: every operation applied to a [`Var`] records a backward
//! closure, and [`Graph::backward`] replays those closures in reverse
//! insertion order, visiting each node once.

mod graph;
pub mod io;
mod ops;
mod scalar;
mod shape;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub use graph::{Gradients, Graph, StatUpdate, Var};
pub use ops::{Elementwise, Reduce};
pub use scalar::{gemm, MatLayout, Scalar};
pub use shape::{broadcast_shapes, Shape};

use crate::error::{shape_err, Result};

/// How to fill a freshly created tensor.
#[derive(Clone, Debug)]
pub enum Fill<T> {
    Scalar(T),
    Values(Vec<T>),
    /// Independent draws from N(mean, std²) using a seeded ChaCha8 stream.
    Normal { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn create(shape: &[usize], fill: Fill<T>) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let n = shape.numel();
        let data = match fill {
            Fill::Scalar(v) => vec![v; n],
            Fill::Values(v) => {
                if v.len() != n {
                    return Err(shape_err!(
                        "{} values supplied for shape {} ({} elements)",
                        v.len(),
                        shape,
                        n
                    ));
                }
                v
            }
            Fill::Normal { mean, std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                normal_values(n, mean, std, &mut rng)?
            }
        };
        Ok(Self::from_parts(shape, data))
    }

    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self> {
        Self::create(shape, Fill::Values(values))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Panics on an invalid shape; use [`Tensor::create`] for fallible
    /// construction.
    pub fn full(shape: &[usize], v: T) -> Self {
        Self::create(shape, Fill::Scalar(v)).expect("valid shape")
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Shape::scalar(), vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        Ok(Self::from_parts(shape, data))
    }

    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = normal_values(shape.numel(), mean, std, rng)?;
        Ok(Self::from_parts(shape, data))
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shape = Shape::new(shape)?;
        let data = if hi > lo {
            let dist = Uniform::new(lo, hi).map_err(|e| shape_err!("uniform({lo}, {hi}): {e}"))?;
            (0..shape.numel()).map(|_| T::cast(dist.sample(rng))).collect()
        } else {
            vec![T::cast(lo); shape.numel()]
        };
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data: Arc::new(data), requires_grad: false, grad: None }
    }

    pub(crate) fn from_shared(shape: Shape, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the values; copies if the buffer is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    /// Address of the shared buffer; stable identity for parameters.
    pub(crate) fn data_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.numel() {
            return Err(shape_err!(
                "gradient of {} elements for tensor {}",
                g.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(shape_err!("cannot reshape {} into {}", self.shape, shape));
        }
        Ok(Self::from_shared(shape, self.shared()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| U::cast(v.as_f64())).collect(),
        )
    }

    /// Row-major element lookup; panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.shape.offset(index)]
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff shapes");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn normal_values<T: Scalar>(n: usize, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Result<Vec<T>> {
    let dist = Normal::new(mean, std).map_err(|e| shape_err!("normal({mean}, {std}): {e}"))?;
    Ok((0..n).map(|_| T::cast(dist.sample(rng))).collect())
}
