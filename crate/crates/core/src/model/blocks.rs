use rand_chacha::ChaCha8Rng;

use super::spec::Backbone;
use crate::attention::Attention;
use crate::error::Result;
use crate::nn::{join, midplanes, BatchNorm3d, ConvBn, ConvGeometry, Module, SpatialTemporal, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// One spatial-temporal operation ending in ReLU: a factored pair or a
/// single full 3D convolution.
#[derive(Clone, Debug)]
pub enum StOp<T: Scalar = f32> {
    Factored(SpatialTemporal<T>),
    Full(ConvBn<T>),
}

impl<T: Scalar> StOp<T> {
    pub fn new(
        backbone: Backbone,
        inputs: usize,
        outputs: usize,
        k: usize,
        stride: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match backbone {
            Backbone::R2plus1d => {
                let mid = midplanes(inputs, outputs, 3, k);
                StOp::Factored(SpatialTemporal::new(inputs, outputs, mid, k, 3, stride, rng)?)
            }
            Backbone::R3d => {
                let geom = ConvGeometry::same_strided([3, k, k], stride);
                StOp::Full(ConvBn::new(inputs, outputs, geom, rng)?)
            }
        })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            StOp::Factored(m) => m.forward(g, x),
            StOp::Full(m) => m.forward(g, x, true),
        }
    }

    fn inner(&self) -> &dyn Module<T> {
        match self {
            StOp::Factored(m) => m,
            StOp::Full(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module<T> {
        match self {
            StOp::Factored(m) => m,
            StOp::Full(m) => m,
        }
    }
}

impl<T: Scalar> Module<T> for StOp<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.inner().for_each(prefix, f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.inner_mut().for_each_mut(prefix, f);
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        self.inner_mut().for_each_norm_mut(f);
    }
}

/// The second operation of a residual block: another convolution, or an
/// attention module followed by BN and ReLU.
#[derive(Clone, Debug)]
pub enum SecondOp<T: Scalar = f32> {
    Conv(StOp<T>),
    Attention { attn: Attention<T>, bn: BatchNorm3d<T> },
}

/// `F(x) + shortcut(x)` with `F` two spatial-temporal operations.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Scalar = f32> {
    pub first: StOp<T>,
    pub second: SecondOp<T>,
    /// 1×1×1 strided convolution plus BN when the shape changes.
    pub shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        backbone: Backbone,
        inputs: usize,
        outputs: usize,
        stride: [usize; 3],
        attention: Option<Attention<T>>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let first = StOp::new(backbone, inputs, outputs, 3, stride, rng)?;
        let second = match attention {
            Some(attn) => SecondOp::Attention { attn, bn: BatchNorm3d::new(outputs) },
            None => SecondOp::Conv(StOp::new(backbone, outputs, outputs, 3, [1, 1, 1], rng)?),
        };
        let shortcut = if inputs != outputs || stride != [1, 1, 1] {
            let geom = ConvGeometry { kernel: [1, 1, 1], stride, padding: [0, 0, 0] };
            Some(ConvBn::new(inputs, outputs, geom, rng)?)
        } else {
            None
        };
        Ok(Self { first, second, shortcut })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.first.forward(g, x)?;
        let h = match &self.second {
            SecondOp::Conv(op) => op.forward(g, &h)?,
            SecondOp::Attention { attn, bn } => {
                let a = attn.forward(g, &h)?;
                g.relu(&bn.forward(g, &a)?)
            }
        };
        let s = match &self.shortcut {
            Some(sc) => sc.forward(g, x, false)?,
            None => x.clone(),
        };
        g.add(&h, &s)
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.first.for_each(&join(prefix, "first"), f);
        match &self.second {
            SecondOp::Conv(op) => op.for_each(&join(prefix, "second"), f),
            SecondOp::Attention { attn, bn } => {
                attn.for_each(&join(prefix, "attn"), f);
                bn.for_each(&join(prefix, "attn_bn"), f);
            }
        }
        if let Some(sc) = &self.shortcut {
            sc.for_each(&join(prefix, "shortcut"), f);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.first.for_each_mut(&join(prefix, "first"), f);
        match &mut self.second {
            SecondOp::Conv(op) => op.for_each_mut(&join(prefix, "second"), f),
            SecondOp::Attention { attn, bn } => {
                attn.for_each_mut(&join(prefix, "attn"), f);
                bn.for_each_mut(&join(prefix, "attn_bn"), f);
            }
        }
        if let Some(sc) = &mut self.shortcut {
            sc.for_each_mut(&join(prefix, "shortcut"), f);
        }
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        self.first.for_each_norm_mut(f);
        match &mut self.second {
            SecondOp::Conv(op) => op.for_each_norm_mut(f),
            SecondOp::Attention { bn, .. } => f(bn),
        }
        if let Some(sc) = &mut self.shortcut {
            sc.for_each_norm_mut(f);
        }
    }
}
