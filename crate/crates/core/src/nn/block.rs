use rand_chacha::ChaCha8Rng;

use super::{join, BatchNorm3d, Conv3d, ConvGeometry, Module, StateKind};
use crate::error::Result;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Width of the hidden layer of a factored `kt×k×k` convolution chosen so
/// the pair has roughly the parameter count of the full 3D kernel.
pub fn midplanes(inputs: usize, outputs: usize, kt: usize, k: usize) -> usize {
    (inputs * outputs * kt * k * k) / (inputs * k * k + kt * outputs)
}

/// Bias-free convolution followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Scalar = f32> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm3d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(inputs: usize, outputs: usize, geometry: ConvGeometry, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self { conv: Conv3d::new(inputs, outputs, geometry, false, rng)?, bn: BatchNorm3d::new(outputs) })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>, relu: bool) -> Result<Var<T>> {
        let y = self.bn.forward(g, &self.conv.forward(g, x)?)?;
        Ok(if relu { g.relu(&y) } else { y })
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.conv.for_each(&join(prefix, "conv"), f);
        self.bn.for_each(&join(prefix, "bn"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.conv.for_each_mut(&join(prefix, "conv"), f);
        self.bn.for_each_mut(&join(prefix, "bn"), f);
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        f(&mut self.bn);
    }
}

/// A spatial `1×k×k` Conv-BN-ReLU followed by a temporal `kt×1×1`
/// Conv-BN-ReLU. The spatial stride goes on the first convolution and the
/// temporal stride on the second.
#[derive(Clone, Debug)]
pub struct SpatialTemporal<T: Scalar = f32> {
    pub spatial: ConvBn<T>,
    pub temporal: ConvBn<T>,
}

impl<T: Scalar> SpatialTemporal<T> {
    pub fn new(
        inputs: usize,
        outputs: usize,
        mid: usize,
        k: usize,
        kt: usize,
        stride: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let spatial = ConvGeometry::same_strided([1, k, k], [1, stride[1], stride[2]]);
        let temporal = ConvGeometry::same_strided([kt, 1, 1], [stride[0], 1, 1]);
        Ok(Self {
            spatial: ConvBn::new(inputs, mid, spatial, rng)?,
            temporal: ConvBn::new(mid, outputs, temporal, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.spatial.forward(g, x, true)?;
        self.temporal.forward(g, &h, true)
    }
}

impl<T: Scalar> Module<T> for SpatialTemporal<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.spatial.for_each(&join(prefix, "spatial"), f);
        self.temporal.for_each(&join(prefix, "temporal"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.spatial.for_each_mut(&join(prefix, "spatial"), f);
        self.temporal.for_each_mut(&join(prefix, "temporal"), f);
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        self.spatial.for_each_norm_mut(f);
        self.temporal.for_each_norm_mut(f);
    }
}
