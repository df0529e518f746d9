//! Layers: 3D convolution, batch normalization, pooling, linear projection
//! and the factored spatial-temporal convolution block.

mod block;
mod conv;
pub mod init;
mod linear;
mod norm;

pub use block::{midplanes, ConvBn, SpatialTemporal};
pub use conv::{conv3d, Conv3d, ConvGeometry};
pub use linear::{global_avg_pool, linear, Linear};
pub use norm::{batch_norm, BatchNorm3d, NormMode};

use crate::tensor::{Scalar, StatUpdate, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateKind {
    /// Learnable, updated by the optimizer.
    Param,
    /// Persistent but not learned (running statistics).
    Buffer,
}

/// Anything holding named tensors.
pub trait Module<T: Scalar> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>));

    /// Visits every batch-norm layer, for folding in running statistics.
    fn for_each_norm_mut(&mut self, _f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, kind, t| {
            if kind == StateKind::Param {
                n += t.numel();
            }
        });
        n
    }

    /// Folds training-mode batch statistics into the running buffers.
    fn apply_stats(&mut self, updates: &[StatUpdate<T>]) {
        self.for_each_norm_mut(&mut |bn| {
            let id = bn.id();
            for u in updates.iter().filter(|u| u.layer == id) {
                bn.update_running(u);
            }
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
