//! Multi-head scaled dot-product attention evaluated directly on the
//! `[N, C, L, H, W]` layout.
//!
//! Channels split into heads of `d = C / n_head` features. Tokens are either
//! the `H·W` positions of one frame or the `L` frames of one position; every
//! (sample, head, frame-or-position) group attends independently. Scores are
//! recomputed in the backward pass rather than stored.

use crate::error::{shape_err, Error, Result};
use crate::par::{chunks3_mut, chunks_mut};
use crate::tensor::{gemm, Graph, MatLayout, Scalar, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenAxis {
    /// Tokens are the spatial positions of one frame.
    Spatial,
    /// Tokens are the frames at one spatial position.
    Temporal,
}

#[derive(Clone, Copy, Debug)]
struct Groups {
    c: usize,
    l: usize,
    hw: usize,
    heads: usize,
    d: usize,
    axis: TokenAxis,
}

impl Groups {
    fn new(dims: &[usize], heads: usize, axis: TokenAxis) -> Result<Self> {
        if dims.len() != 5 {
            return Err(shape_err!("attention input must be [N, C, L, H, W], got {:?}", dims));
        }
        if heads == 0 || !dims[1].is_multiple_of(heads) {
            return Err(Error::Config(format!("{} channels do not split into {heads} heads", dims[1])));
        }
        Ok(Self { c: dims[1], l: dims[2], hw: dims[3] * dims[4], heads, d: dims[1] / heads, axis })
    }

    fn tokens(&self) -> usize {
        match self.axis {
            TokenAxis::Spatial => self.hw,
            TokenAxis::Temporal => self.l,
        }
    }

    fn inner(&self) -> usize {
        match self.axis {
            TokenAxis::Spatial => self.l,
            TokenAxis::Temporal => self.hw,
        }
    }

    fn count(&self) -> usize {
        self.heads * self.inner()
    }

    fn sample_len(&self) -> usize {
        self.c * self.l * self.hw
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    /// Group `gi` of one sample as a `tokens × d` matrix.
    fn layout(&self, gi: usize) -> MatLayout {
        let (head, j) = (gi / self.inner(), gi % self.inner());
        let lhw = self.l * self.hw;
        let (base, token_stride) = match self.axis {
            TokenAxis::Spatial => (j * self.hw, 1),
            TokenAxis::Temporal => (j, self.hw),
        };
        MatLayout::new(head * self.d * lhw + base, self.tokens(), self.d, token_stride, lhw)
    }

    /// Row-softmaxed attention weights of one group into `a` (`T × T`).
    fn weights<T: Scalar>(&self, q: &[T], k: &[T], gi: usize, a: &mut [T]) {
        let t = self.tokens();
        let lay = self.layout(gi);
        gemm(T::cast(self.scale()), q, lay, k, lay.t(), T::zero(), a, MatLayout::row_major(0, t, t));
        for row in a.chunks_mut(t) {
            softmax_row(row);
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

fn check_same(q: &Var<impl Scalar>, k: &Var<impl Scalar>, v: &Var<impl Scalar>) -> Result<()> {
    if q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(shape_err!("attention operands differ: q {:?}, k {:?}, v {:?}", q.dims(), k.dims(), v.dims()));
    }
    Ok(())
}

/// `softmax(Q·Kᵀ/√d)·V` per head and group; output has the input layout.
pub fn attend<T: Scalar>(
    g: &Graph<'_, T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    axis: TokenAxis,
) -> Result<Var<T>> {
    check_same(q, k, v)?;
    let grp = Groups::new(q.dims(), heads, axis)?;
    let n = q.dims()[0];
    let s = grp.sample_len();
    let t = grp.tokens();
    let mut out = vec![T::zero(); n * s];
    {
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        chunks_mut(&mut out, s, |i, o| {
            let (qs, ks, vs) = (&qd[i * s..][..s], &kd[i * s..][..s], &vd[i * s..][..s]);
            let mut a = vec![T::zero(); t * t];
            for gi in 0..grp.count() {
                grp.weights(qs, ks, gi, &mut a);
                let lay = grp.layout(gi);
                gemm(T::one(), &a, MatLayout::row_major(0, t, t), vs, lay, T::zero(), o, lay);
            }
        });
    }
    let out = Tensor::from_parts(q.shape().clone(), out);
    let (qv, kv, vv) = (q.value().clone(), k.value().clone(), v.value().clone());
    Ok(g.record(out, &[q, k, v], move |gout| {
        let mut dq = vec![T::zero(); n * s];
        let mut dk = vec![T::zero(); n * s];
        let mut dv = vec![T::zero(); n * s];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let scale = T::cast(grp.scale());
        chunks3_mut(&mut dq, &mut dk, &mut dv, s, |i, dqs, dks, dvs| {
            let (qs, ks, vs) = (&qd[i * s..][..s], &kd[i * s..][..s], &vd[i * s..][..s]);
            let gs = &gout[i * s..][..s];
            let sq = MatLayout::row_major(0, t, t);
            let mut a = vec![T::zero(); t * t];
            let mut da = vec![T::zero(); t * t];
            for gi in 0..grp.count() {
                let lay = grp.layout(gi);
                grp.weights(qs, ks, gi, &mut a);
                gemm(T::one(), &a, sq.t(), gs, lay, T::zero(), dvs, lay);
                gemm(T::one(), gs, lay, vs, lay.t(), T::zero(), &mut da, sq);
                for (ar, dr) in a.chunks(t).zip(da.chunks_mut(t)) {
                    let dot: T = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                    for (d, &x) in dr.iter_mut().zip(ar) {
                        *d = x * (*d - dot);
                    }
                }
                gemm(scale, &da, sq, ks, lay, T::zero(), dqs, lay);
                gemm(scale, &da, sq.t(), qs, lay, T::zero(), dks, lay);
            }
        });
        vec![Some(dq), Some(dk), Some(dv)]
    }))
}

/// Attention weights as `[N, heads, groups, T, T]` where groups are frames
/// (spatial tokens) or positions (temporal tokens).
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize, axis: TokenAxis) -> Result<Tensor<T>> {
    if q.dims() != k.dims() {
        return Err(shape_err!("attention operands differ: q {:?}, k {:?}", q.dims(), k.dims()));
    }
    let grp = Groups::new(q.dims(), heads, axis)?;
    let (n, s, t) = (q.dims()[0], grp.sample_len(), grp.tokens());
    let mut out = vec![T::zero(); n * grp.count() * t * t];
    chunks_mut(&mut out, grp.count() * t * t, |i, o| {
        for (gi, a) in o.chunks_mut(t * t).enumerate() {
            grp.weights(&q.data()[i * s..][..s], &k.data()[i * s..][..s], gi, a);
        }
    });
    Ok(Tensor::from_parts(Shape::new(&[n, heads, grp.inner(), t, t])?, out))
}
