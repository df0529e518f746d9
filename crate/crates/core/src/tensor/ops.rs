use super::shape::{broadcast_shapes, broadcast_strides, contiguous_strides};
use super::{gemm, Graph, MatLayout, Scalar, Shape, Tensor, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Walks `out` in row-major order, handing the callback the output offset
/// and the matching offsets into two (possibly broadcast) operands.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n: usize = out.iter().product();
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    while o < n {
        for j in 0..last {
            f(o + j, oa + j * la, ob + j * lb);
        }
        o += last;
        let mut ax = rank as isize - 2;
        while ax >= 0 {
            let a = ax as usize;
            idx[a] += 1;
            oa += sa[a];
            ob += sb[a];
            if idx[a] < out[a] {
                break;
            }
            oa -= sa[a] * out[a];
            ob -= sb[a] * out[a];
            idx[a] = 0;
            ax -= 1;
        }
    }
}

fn binary_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.dims() == b.dims() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().clone(), data));
    }
    let out = broadcast_shapes(a.dims(), b.dims())?;
    let sa = broadcast_strides(a.dims(), &out);
    let sb = broadcast_strides(b.dims(), &out);
    let n: usize = out.iter().product();
    let mut data = vec![T::zero(); n];
    let (ad, bd) = (a.data(), b.data());
    walk2(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(Shape::new(&out)?, data))
}

/// Sums a gradient of shape `out` down to the broadcast operand `src`.
/// `scale`, when present, is multiplied in elementwise (read through its
/// own broadcast strides).
fn reduce_to<T: Scalar>(g: &[T], out: &[usize], src: &[usize], scale: Option<&Tensor<T>>) -> Vec<T> {
    if out == src && scale.is_none_or(|s| s.dims() == out) {
        return match scale {
            None => g.to_vec(),
            Some(s) => g.iter().zip(s.data()).map(|(&a, &b)| a * b).collect(),
        };
    }
    let ss = broadcast_strides(src, out);
    let n: usize = src.iter().product();
    let mut res = vec![T::zero(); n];
    match scale {
        None => {
            let zero = vec![0; out.len()];
            walk2(out, &ss, &zero, |o, is, _| res[is] += g[o]);
        }
        Some(s) => {
            let sc = broadcast_strides(s.dims(), out);
            let sd = s.data();
            walk2(out, &ss, &sc, |o, is, ic| res[is] += g[o] * sd[ic]);
        }
    }
    res
}

/// Output dims of a broadcasting batched matmul.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err!("matmul needs rank ≥ 2 operands, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: {a:?} · {b:?}"));
    }
    let lead = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])
        .map_err(|_| shape_err!("matmul batch extents do not broadcast: {a:?} · {b:?}"))?;
    Ok((lead, m, k, n))
}

/// Per-batch matrix offsets for an operand with leading dims `src` read
/// while iterating the broadcast leading dims `lead`.
fn batch_offsets(src: &[usize], lead: &[usize], mat: usize) -> Vec<usize> {
    let count: usize = lead.iter().product();
    if lead.is_empty() {
        return vec![0];
    }
    let strides = broadcast_strides(if src.is_empty() { &[1] } else { src }, lead);
    let zero = vec![0; lead.len()];
    let mut offs = vec![0; count];
    walk2(lead, &strides, &zero, |o, i, _| offs[o] = i * mat);
    offs
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn normalize_axes(shape: &Shape, axes: &[isize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(axes.len());
    for &a in axes {
        let ax = shape.axis(a)?;
        if out.contains(&ax) {
            return Err(shape_err!("axis {a} listed twice"));
        }
        out.push(ax);
    }
    out.sort_unstable();
    Ok(out)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn elementwise(&self, op: Elementwise, a: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        match (op, b) {
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Sub, Some(b)) => self.sub(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (op, _) => Err(shape_err!("wrong operand count for {op:?}")),
        }
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = binary_values(a.value(), b.value(), |x, y| x + y)?;
        let (od, ad, bd) = (out.dims().to_vec(), a.dims().to_vec(), b.dims().to_vec());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                ta.then(|| reduce_to(g, &od, &ad, None)),
                tb.then(|| reduce_to(g, &od, &bd, None)),
            ]
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = binary_values(a.value(), b.value(), |x, y| x - y)?;
        let (od, ad, bd) = (out.dims().to_vec(), a.dims().to_vec(), b.dims().to_vec());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                ta.then(|| reduce_to(g, &od, &ad, None)),
                tb.then(|| reduce_to(g, &od, &bd, None).into_iter().map(|v| -v).collect()),
            ]
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = binary_values(a.value(), b.value(), |x, y| x * y)?;
        let od = out.dims().to_vec();
        let (av, bv) = (a.value().clone(), b.value().clone());
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(self.record(out, &[a, b], move |g| {
            vec![
                ta.then(|| reduce_to(g, &od, av.dims(), Some(&bv))),
                tb.then(|| reduce_to(g, &od, bv.dims(), Some(&av))),
            ]
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value().map(|v| v * c);
        self.record(out, &[a], move |g| vec![Some(g.iter().map(|&v| v * c).collect())])
    }

    pub fn relu(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.note_kinks(a.data().iter().map(|&v| v > T::zero()));
        let keep = out.clone();
        self.record(out, &[a], move |g| {
            let d = g
                .iter()
                .zip(keep.data())
                .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(d)]
        })
    }

    pub fn sigmoid(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(sigmoid);
        let keep = out.clone();
        self.record(out, &[a], move |g| {
            let d = g
                .iter()
                .zip(keep.data())
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            vec![Some(d)]
        })
    }

    /// Batched matrix product over the trailing two axes with broadcast
    /// leading axes.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ad, bd) = (a.dims().to_vec(), b.dims().to_vec());
        let (lead, m, k, n) = matmul_dims(&ad, &bd)?;
        let oa = batch_offsets(&ad[..ad.len() - 2], &lead, m * k);
        let ob = batch_offsets(&bd[..bd.len() - 2], &lead, k * n);
        let mut out_dims = lead.clone();
        out_dims.extend([m, n]);
        let mut out = vec![T::zero(); oa.len() * m * n];
        let (av, bv) = (a.value().clone(), b.value().clone());
        for (bi, (&pa, &pb)) in oa.iter().zip(&ob).enumerate() {
            gemm(
                T::one(),
                av.data(),
                MatLayout::row_major(pa, m, k),
                bv.data(),
                MatLayout::row_major(pb, k, n),
                T::zero(),
                &mut out,
                MatLayout::row_major(bi * m * n, m, n),
            );
        }
        let out = Tensor::from_parts(Shape::new(&out_dims)?, out);
        let (ta, tb) = (a.is_tracked(), b.is_tracked());
        Ok(self.record(out, &[a, b], move |g| {
            let ga = ta.then(|| {
                let mut ga = vec![T::zero(); av.numel()];
                for (bi, (&pa, &pb)) in oa.iter().zip(&ob).enumerate() {
                    // dA = dY · Bᵀ
                    gemm(
                        T::one(),
                        g,
                        MatLayout::row_major(bi * m * n, m, n),
                        bv.data(),
                        MatLayout::row_major(pb, k, n).t(),
                        T::one(),
                        &mut ga,
                        MatLayout::row_major(pa, m, k),
                    );
                }
                ga
            });
            let gb = tb.then(|| {
                let mut gb = vec![T::zero(); bv.numel()];
                for (bi, (&pa, &pb)) in oa.iter().zip(&ob).enumerate() {
                    // dB = Aᵀ · dY
                    gemm(
                        T::one(),
                        av.data(),
                        MatLayout::row_major(pa, m, k).t(),
                        g,
                        MatLayout::row_major(bi * m * n, m, n),
                        T::one(),
                        &mut gb,
                        MatLayout::row_major(pb, k, n),
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Reinterprets the element order under new extents (no copy).
    pub fn reshape(&self, a: &Var<T>, dims: &[usize]) -> Result<Var<T>> {
        let out = a.value().reshaped(dims)?;
        Ok(self.record(out, &[a], |g| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(&self, a: &Var<T>, order: &[usize]) -> Result<Var<T>> {
        let dims = a.dims();
        let rank = dims.len();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&o| o >= rank || std::mem::replace(&mut seen[o], true)) {
            return Err(shape_err!("{order:?} is not a permutation of {rank} axes"));
        }
        let in_strides = contiguous_strides(dims);
        let out_dims: Vec<usize> = order.iter().map(|&o| dims[o]).collect();
        let gather: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
        let zero = vec![0; rank];
        let src = a.data();
        let mut out = vec![T::zero(); src.len()];
        walk2(&out_dims, &gather, &zero, |o, i, _| out[o] = src[i]);
        let out = Tensor::from_parts(Shape::new(&out_dims)?, out);
        Ok(self.record(out, &[a], move |g| {
            let mut back = vec![T::zero(); g.len()];
            walk2(&out_dims, &gather, &zero, |o, i, _| back[i] = g[o]);
            vec![Some(back)]
        }))
    }

    pub fn reduce(&self, op: Reduce, a: &Var<T>, axes: &[isize], keep_dims: bool) -> Result<Var<T>> {
        let axes = normalize_axes(a.shape(), axes)?;
        let dims = a.dims().to_vec();
        let kept: Vec<usize> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let final_dims: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            let v: Vec<usize> = kept.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
            if v.is_empty() {
                vec![1]
            } else {
                v
            }
        };
        let in_strides = contiguous_strides(&dims);
        let out_strides = broadcast_strides(&kept, &dims);
        let count: usize = axes.iter().map(|&ax| dims[ax]).product();
        let n_out: usize = kept.iter().product();
        let src = a.data();
        let shape = Shape::new(&final_dims)?;
        match op {
            Reduce::Sum | Reduce::Mean => {
                let mut out = vec![T::zero(); n_out];
                walk2(&dims, &in_strides, &out_strides, |_, i, o| out[o] += src[i]);
                let factor = if op == Reduce::Mean { T::one() / T::cast(count as f64) } else { T::one() };
                if op == Reduce::Mean {
                    out.iter_mut().for_each(|v| *v *= factor);
                }
                let out = Tensor::from_parts(shape, out);
                Ok(self.record(out, &[a], move |g| {
                    let mut back = vec![T::zero(); dims.iter().product()];
                    walk2(&dims, &in_strides, &out_strides, |_, i, o| back[i] = g[o] * factor);
                    vec![Some(back)]
                }))
            }
            Reduce::Max => {
                let mut out = vec![T::neg_infinity(); n_out];
                let mut arg = vec![usize::MAX; n_out];
                // Strict comparison keeps the lowest flat index on ties.
                walk2(&dims, &in_strides, &out_strides, |_, i, o| {
                    if arg[o] == usize::MAX || src[i] > out[o] {
                        out[o] = src[i];
                        arg[o] = i;
                    }
                });
                arg.iter().for_each(|&i| self.note_kink_index(i));
                let numel = src.len();
                let out = Tensor::from_parts(shape, out);
                Ok(self.record(out, &[a], move |g| {
                    let mut back = vec![T::zero(); numel];
                    for (o, &i) in arg.iter().enumerate() {
                        back[i] += g[o];
                    }
                    vec![Some(back)]
                }))
            }
        }
    }

    pub fn sum_all(&self, a: &Var<T>) -> Var<T> {
        let axes: Vec<isize> = (0..a.shape().rank() as isize).collect();
        self.reduce(Reduce::Sum, a, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&self, a: &Var<T>) -> Var<T> {
        let axes: Vec<isize> = (0..a.shape().rank() as isize).collect();
        self.reduce(Reduce::Mean, a, &axes, false).expect("valid axes")
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, a: &Var<T>, axis: isize) -> Result<Var<T>> {
        let ax = a.shape().axis(axis)?;
        let dims = a.dims();
        let outer: usize = dims[..ax].iter().product();
        let len = dims[ax];
        let inner: usize = dims[ax + 1..].iter().product();
        let src = a.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        let out = Tensor::from_parts(a.shape().clone(), out);
        let keep = out.clone();
        Ok(self.record(out, &[a], move |g| {
            let s = keep.data();
            let mut back = vec![T::zero(); s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: T = (0..len).map(|j| g[base + j * inner] * s[base + j * inner]).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        back[p] = s[p] * (g[p] - dot);
                    }
                }
            }
            vec![Some(back)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(dims, v).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let g = Graph::<f64>::inference();
        let r = g.relu(&g.constant(t(&[3], vec![-1.0, 0.0, 2.0])));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(&g.constant(t(&[1], vec![0.0])));
        assert_eq!(s.data(), &[0.5]);
    }

    #[test]
    fn add_backward_gives_ones() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2], vec![1.0, 2.0]).with_requires_grad());
        let b = g.leaf(&t(&[2], vec![3.0, 4.0]).with_requires_grad());
        let c = g.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        let grads = g.backward_with(&c, vec![1.0, 1.0]).unwrap();
        assert_eq!(grads.get(&a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(&b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]).with_requires_grad());
        let b = g.leaf(&t(&[3], vec![1.0, 2.0, 3.0]).with_requires_grad());
        let c = g.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = g.sum_all(&c);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap(), &[2.0, 2.0, 2.0]);
        let g2 = Graph::<f64>::inference();
        assert!(g2.add(&g2.constant(Tensor::zeros(&[2, 3])), &g2.constant(Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn matmul_examples() {
        let g = Graph::<f64>::inference();
        let eye = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.matmul(&eye, &m).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let row = g.constant(t(&[1, 2], vec![1.0, 2.0]));
        let col = g.constant(t(&[2, 1], vec![3.0, 4.0]));
        assert_eq!(g.matmul(&row, &col).unwrap().data(), &[11.0]);
        assert!(g.matmul(&row, &row).is_err());
    }

    #[test]
    fn batched_matmul_broadcasts_lhs() {
        let g = Graph::<f64>::new();
        let a = g.leaf(&t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_requires_grad());
        let b = g.leaf(&Tensor::ones(&[3, 2, 1]).with_requires_grad());
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[3, 2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0, 3.0, 7.0, 3.0, 7.0]);
        let loss = g.sum_all(&c);
        let grads = g.backward(&loss).unwrap();
        // a is reused by all three batches.
        assert_eq!(grads.get(&a).unwrap(), &[3.0, 3.0, 3.0, 3.0]);
        assert_eq!(grads.get(&b).unwrap(), &[4.0, 6.0, 4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn reshape_and_permute_round_trip() {
        let g = Graph::<f64>::inference();
        let x = g.constant(t(&[6], (0..6).map(f64::from).collect()));
        let r = g.reshape(&x, &[2, 3]).unwrap();
        let back = g.reshape(&r, &[6]).unwrap();
        assert_eq!(back.data(), x.data());
        let p = g.permute(&r, &[1, 0]).unwrap();
        assert_eq!(p.dims(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let pp = g.permute(&p, &[1, 0]).unwrap();
        assert_eq!(pp.data(), r.data());
        assert!(g.reshape(&x, &[4]).is_err());
        assert!(g.permute(&r, &[0, 0]).is_err());
    }

    #[test]
    fn head_layout_reshape_preserves_count() {
        // (C, L, H, W) = (8, 3, 4, 4) → (heads, L, H·W, C/heads) = (4, 3, 16, 2)
        let g = Graph::<f64>::inference();
        let e = g.constant(Tensor::from_fn(&[8, 3, 4, 4], |i| i as f64).unwrap());
        let heads = g.reshape(&e, &[4, 2, 3, 16]).unwrap();
        let m = g.permute(&heads, &[0, 2, 3, 1]).unwrap();
        assert_eq!(m.dims(), &[4, 3, 16, 2]);
        assert_eq!(m.value().numel(), 384);
        // head 1, frame 2, token 5, feature 1 ← channel 3 of E at (2, 1, 1)
        assert_eq!(m.value().at(&[1, 2, 5, 1]), e.value().at(&[3, 2, 1, 1]));
    }

    #[test]
    fn reductions() {
        let g = Graph::<f64>::new();
        let x = g.leaf(&t(&[3], vec![1.0, 3.0, 3.0]).with_requires_grad());
        let s = g.reduce(Reduce::Sum, &x, &[0], false).unwrap();
        assert_eq!(s.data(), &[7.0]);
        let m = g.reduce(Reduce::Max, &x, &[0], false).unwrap();
        assert_eq!(m.data(), &[3.0]);
        let grads = g.backward(&m).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 1.0, 0.0]);

        let g = Graph::<f64>::inference();
        let c = g.constant(Tensor::full(&[2, 3, 4], 2.5));
        assert_eq!(g.mean_all(&c).data(), &[2.5]);
        let k = g.reduce(Reduce::Sum, &c, &[1], true).unwrap();
        assert_eq!(k.dims(), &[2, 1, 4]);
        assert!(g.reduce(Reduce::Sum, &c, &[3], false).is_err());
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::<f64>::inference();
        let u = g.softmax(&g.constant(Tensor::zeros(&[4])), 0).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let big = g.softmax(&g.constant(t(&[2], vec![1000.0, 1000.0])), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
        let l = g
            .softmax(&g.constant(t(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()])), -1)
            .unwrap();
        for (v, e) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-6);
        }
    }
}
