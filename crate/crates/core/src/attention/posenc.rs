use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::nn::{init, join, Module, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Learned per-axis position embeddings whose broadcast sum covers the
/// whole `[C, L, H, W]` volume.
#[derive(Clone, Debug)]
pub struct RelPosEmbeddings<T: Scalar = f32> {
    /// `[C, 1, H, 1]`
    pub height: Tensor<T>,
    /// `[C, 1, 1, W]`
    pub width: Tensor<T>,
    /// `[C, L, 1, 1]`
    pub frames: Tensor<T>,
}

impl<T: Scalar> RelPosEmbeddings<T> {
    /// Draws every entry from N(0, 0.02²).
    pub fn new(channels: usize, frames: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            height: init::normal(&[channels, 1, height, 1], 0.02, rng)?,
            width: init::normal(&[channels, 1, 1, width], 0.02, rng)?,
            frames: init::normal(&[channels, frames, 1, 1], 0.02, rng)?,
        })
    }

    pub fn from_parts(height: Tensor<T>, width: Tensor<T>, frames: Tensor<T>) -> Result<Self> {
        let (h, w, f) = (height.dims(), width.dims(), frames.dims());
        let ok = h.len() == 4
            && w.len() == 4
            && f.len() == 4
            && h[0] == w[0]
            && h[0] == f[0]
            && h[1] == 1
            && h[3] == 1
            && w[1] == 1
            && w[2] == 1
            && f[2] == 1
            && f[3] == 1;
        if !ok {
            return Err(shape_err!("position embeddings must be [C,1,H,1], [C,1,1,W], [C,L,1,1]; got {h:?}, {w:?}, {f:?}"));
        }
        Ok(Self { height, width, frames })
    }

    /// `[C, L, H, W]` extents covered.
    pub fn extent(&self) -> [usize; 4] {
        [self.height.dims()[0], self.frames.dims()[1], self.height.dims()[2], self.width.dims()[3]]
    }

    /// `E = E_H + E_W + E_F` broadcast to `[C, L, H, W]`.
    pub fn sum(&self, g: &Graph<'_, T>) -> Result<Var<T>> {
        let hw = g.add(&g.param(&self.height), &g.param(&self.width))?;
        g.add(&hw, &g.param(&self.frames))
    }

    pub fn num_params(&self) -> usize {
        self.height.numel() + self.width.numel() + self.frames.numel()
    }
}

impl<T: Scalar> Module<T> for RelPosEmbeddings<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        f(&join(prefix, "height"), StateKind::Param, &self.height);
        f(&join(prefix, "width"), StateKind::Param, &self.width);
        f(&join(prefix, "frames"), StateKind::Param, &self.frames);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        f(&join(prefix, "height"), StateKind::Param, &mut self.height);
        f(&join(prefix, "width"), StateKind::Param, &mut self.width);
        f(&join(prefix, "frames"), StateKind::Param, &mut self.frames);
    }
}

/// Broadcast sum of three per-axis embeddings without a graph.
pub fn rel_pos_sum<T: Scalar>(e: &RelPosEmbeddings<T>) -> Result<Tensor<T>> {
    let g = Graph::inference();
    Ok(e.sum(&g)?.into_value())
}

/// Splits `E: [C, L, H, W]` into per-head token matrices
/// `[heads, L, H·W, C/heads]`.
pub fn to_head_layout<T: Scalar>(e: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let d = e.dims();
    if d.len() != 4 || heads == 0 || !d[0].is_multiple_of(heads) {
        return Err(shape_err!("cannot split {:?} into {heads} heads", d));
    }
    let g = Graph::inference();
    let r = g.reshape(&g.constant(e.clone()), &[heads, d[0] / heads, d[1], d[2] * d[3]])?;
    Ok(g.permute(&r, &[0, 2, 3, 1])?.into_value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |i| i as f64).unwrap()
    }

    #[test]
    fn zero_embeddings_sum_to_zero() {
        let e = RelPosEmbeddings::from_parts(
            Tensor::<f64>::zeros(&[2, 1, 3, 1]),
            Tensor::zeros(&[2, 1, 1, 4]),
            Tensor::zeros(&[2, 5, 1, 1]),
        )
        .unwrap();
        let s = rel_pos_sum(&e).unwrap();
        assert_eq!(s.dims(), &[2, 5, 3, 4]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn index_embeddings_add_up() {
        let e = RelPosEmbeddings::from_parts(idx(&[1, 1, 3, 1]), idx(&[1, 1, 1, 4]), idx(&[1, 2, 1, 1])).unwrap();
        let s = rel_pos_sum(&e).unwrap();
        for f in 0..2 {
            for h in 0..3 {
                for w in 0..4 {
                    assert_eq!(s.at(&[0, f, h, w]), (f + h + w) as f64);
                }
            }
        }
    }

    #[test]
    fn head_layout_matches_index_arithmetic() {
        let e = idx(&[8, 3, 4, 4]);
        let m = to_head_layout(&e, 4).unwrap();
        assert_eq!(m.dims(), &[4, 3, 16, 2]);
        for head in 0..4 {
            for f in 0..3 {
                for t in 0..16 {
                    for c in 0..2 {
                        assert_eq!(m.at(&[head, f, t, c]), e.at(&[head * 2 + c, f, t / 4, t % 4]));
                    }
                }
            }
        }
        assert!(to_head_layout(&e, 3).is_err());
    }

    #[test]
    fn rejects_misaligned_parts() {
        assert!(RelPosEmbeddings::<f64>::from_parts(idx(&[1, 1, 3, 2]), idx(&[1, 1, 1, 4]), idx(&[1, 2, 1, 1])).is_err());
    }
}
