use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::nn::{join, Conv3d, ConvGeometry, Module, StateKind};
use crate::tensor::{Graph, Reduce, Scalar, Tensor, Var};

const SPATIAL: [usize; 3] = [1, 3, 3];
const TEMPORAL: [usize; 3] = [3, 1, 1];

/// Conv → ReLU → Conv → sigmoid, both convolutions channel-preserving with
/// bias.
#[derive(Clone, Debug)]
pub struct GateBranch<T: Scalar = f32> {
    pub first: Conv3d<T>,
    pub second: Conv3d<T>,
}

impl<T: Scalar> GateBranch<T> {
    fn new(channels: usize, first: [usize; 3], second: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            first: Conv3d::new(channels, channels, ConvGeometry::same(first), true, rng)?,
            second: Conv3d::new(channels, channels, ConvGeometry::same(second), true, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = g.relu(&self.first.forward(g, x)?);
        Ok(g.sigmoid(&self.second.forward(g, &h)?))
    }

    fn check(&self, x: &Var<T>) -> Result<()> {
        if x.dims().len() != 5 || x.dims()[1] != self.first.in_channels {
            return Err(shape_err!("gate for {} channels got {:?}", self.first.in_channels, x.dims()));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for GateBranch<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.first.for_each(&join(prefix, "first"), f);
        self.second.for_each(&join(prefix, "second"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.first.for_each_mut(&join(prefix, "first"), f);
        self.second.for_each_mut(&join(prefix, "second"), f);
    }
}

/// Per-channel gating: the sigmoid map of a spatial-then-temporal branch is
/// averaged over frames and positions and scales each channel of `x`.
#[derive(Clone, Debug)]
pub struct ChannelGate<T: Scalar = f32> {
    pub branch: GateBranch<T>,
}

impl<T: Scalar> ChannelGate<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { branch: GateBranch::new(channels, SPATIAL, TEMPORAL, rng)? })
    }

    /// Per-channel weights `[N, C, 1, 1, 1]`.
    pub fn weights(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.branch.check(x)?;
        let s = self.branch.forward(g, x)?;
        g.reduce(Reduce::Mean, &s, &[2, 3, 4], true)
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(g, x)?;
        g.mul(x, &w)
    }
}

impl<T: Scalar> Module<T> for ChannelGate<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.branch.for_each(prefix, f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.branch.for_each_mut(prefix, f);
    }
}

/// Two voxel-wise gates in sequence: one from spatial kernels, then one
/// from temporal kernels applied to the spatially gated input.
#[derive(Clone, Debug)]
pub struct FactoredGate<T: Scalar = f32> {
    pub spatial: GateBranch<T>,
    pub temporal: GateBranch<T>,
}

impl<T: Scalar> FactoredGate<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            spatial: GateBranch::new(channels, SPATIAL, SPATIAL, rng)?,
            temporal: GateBranch::new(channels, TEMPORAL, TEMPORAL, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.spatial.check(x)?;
        let y = g.mul(x, &self.spatial.forward(g, x)?)?;
        let gate = self.temporal.forward(g, &y)?;
        g.mul(&y, &gate)
    }
}

impl<T: Scalar> Module<T> for FactoredGate<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.spatial.for_each(&join(prefix, "spatial"), f);
        self.temporal.for_each(&join(prefix, "temporal"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.spatial.for_each_mut(&join(prefix, "spatial"), f);
        self.temporal.for_each_mut(&join(prefix, "temporal"), f);
    }
}
