use rand_chacha::ChaCha8Rng;

use super::fused::{attend, TokenAxis};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv3d, ConvGeometry, Module, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Pointwise query/key/value projections for one attention stage.
#[derive(Clone, Debug)]
pub struct Projections<T: Scalar = f32> {
    pub q: Conv3d<T>,
    pub k: Conv3d<T>,
    pub v: Conv3d<T>,
}

impl<T: Scalar> Projections<T> {
    fn new(channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let geom = ConvGeometry::same([1, 1, 1]);
        Ok(Self {
            q: Conv3d::new(channels, channels, geom, true, rng)?,
            k: Conv3d::new(channels, channels, geom, false, rng)?,
            v: Conv3d::new(channels, channels, geom, true, rng)?,
        })
    }

    fn forward(&self, g: &Graph<'_, T>, x: &Var<T>, heads: usize, axis: TokenAxis) -> Result<Var<T>> {
        let (q, k, v) = (self.q.forward(g, x)?, self.k.forward(g, x)?, self.v.forward(g, x)?);
        attend(g, &q, &k, &v, heads, axis)
    }
}

impl<T: Scalar> Module<T> for Projections<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.q.for_each(&join(prefix, "q"), f);
        self.k.for_each(&join(prefix, "k"), f);
        self.v.for_each(&join(prefix, "v"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.q.for_each_mut(&join(prefix, "q"), f);
        self.k.for_each_mut(&join(prefix, "k"), f);
        self.v.for_each_mut(&join(prefix, "v"), f);
    }
}

/// Attention over the spatial positions of each frame, then over the frames
/// at each position. No position terms.
#[derive(Clone, Debug)]
pub struct FactoredMhsa<T: Scalar = f32> {
    pub channels: usize,
    pub heads: usize,
    pub spatial: Projections<T>,
    pub temporal: Projections<T>,
}

impl<T: Scalar> FactoredMhsa<T> {
    pub fn new(channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels are not divisible by {heads} heads")));
        }
        Ok(Self { channels, heads, spatial: Projections::new(channels, rng)?, temporal: Projections::new(channels, rng)? })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        if x.dims().len() != 5 || x.dims()[1] != self.channels {
            return Err(shape_err!("attention block for {} channels got {:?}", self.channels, x.dims()));
        }
        let y = self.spatial.forward(g, x, self.heads, TokenAxis::Spatial)?;
        self.temporal.forward(g, &y, self.heads, TokenAxis::Temporal)
    }
}

impl<T: Scalar> Module<T> for FactoredMhsa<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.spatial.for_each(&join(prefix, "spatial"), f);
        self.temporal.for_each(&join(prefix, "temporal"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.spatial.for_each_mut(&join(prefix, "spatial"), f);
        self.temporal.for_each_mut(&join(prefix, "temporal"), f);
    }
}
