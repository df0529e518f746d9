use rand_chacha::ChaCha8Rng;

use super::{init, join, Module, StateKind};
use crate::error::{shape_err, Result};
use crate::par::chunks_mut;
use crate::tensor::{gemm, Graph, MatLayout, Scalar, Shape, Tensor, Var};

/// Kernel, stride and padding per (frames, height, width) axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride 1 with "same" padding `(k−1)/2` on every axis.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::same_strided(kernel, [1, 1, 1])
    }

    pub fn same_strided(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self { kernel, stride, padding: kernel.map(|k| (k - 1) / 2) }
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.stride[a] == 0 || span < self.kernel[a] {
                return Err(shape_err!(
                    "kernel {:?} with padding {:?} does not fit input {:?}",
                    self.kernel,
                    self.padding,
                    input
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    fn spatial_pointwise(&self) -> bool {
        self.kernel[1] == 1 && self.kernel[2] == 1 && self.stride[1] == 1 && self.stride[2] == 1
            && self.padding[1] == 0 && self.padding[2] == 0
    }
}

/// Learnable 3D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Debug)]
pub struct Conv3d<T: Scalar = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    /// `[out, in, k_t, k_h, k_w]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Conv3d<T> {
    /// Kaiming-uniform (fan-in) weights; a bias, when requested, is drawn
    /// uniformly from ±1/√fan_in.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let [kt, kh, kw] = geometry.kernel;
        let fan_in = in_channels * kt * kh * kw;
        let weight = init::kaiming_uniform(&[out_channels, in_channels, kt, kh, kw], fan_in, rng)?;
        let bias = if bias { Some(init::fan_in_uniform(&[out_channels], fan_in, rng)?) } else { None };
        Ok(Self { in_channels, out_channels, geometry, weight, bias })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        conv3d(g, x, &w, b.as_ref(), self.geometry)
    }

    pub fn zero_(&mut self) {
        self.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = &mut self.bias {
            b.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

impl<T: Scalar> Module<T> for Conv3d<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), StateKind::Param, b);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), StateKind::Param, b);
        }
    }
}

/// Dimensions shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
struct Plan {
    n: usize,
    c: usize,
    o: usize,
    input: [usize; 3],
    output: [usize; 3],
    geom: ConvGeometry,
}

impl Plan {
    fn in_frame(&self) -> usize {
        self.input[1] * self.input[2]
    }
    fn out_frame(&self) -> usize {
        self.output[1] * self.output[2]
    }
    fn in_sample(&self) -> usize {
        self.c * self.input[0] * self.in_frame()
    }
    fn out_sample(&self) -> usize {
        self.o * self.output[0] * self.out_frame()
    }
    fn ckk(&self) -> usize {
        self.c * self.geom.kernel[1] * self.geom.kernel[2]
    }

    /// `(dt, t_out)` pairs that read input frame `t_in`.
    fn targets(&self, t_in: usize) -> Vec<(usize, usize)> {
        let [kt, _, _] = self.geom.kernel;
        let (st, pt) = (self.geom.stride[0], self.geom.padding[0]);
        (0..kt)
            .filter_map(|dt| {
                let num = t_in as isize + pt as isize - dt as isize;
                if num < 0 || !(num as usize).is_multiple_of(st) {
                    return None;
                }
                let t_out = num as usize / st;
                (t_out < self.output[0]).then_some((dt, t_out))
            })
            .collect()
    }

    /// Column matrix of one input frame: rows `(c, i, j)`, columns the
    /// output positions.
    fn im2col<T: Scalar>(&self, x: &[T], t_in: usize, cols: &mut [T]) {
        let [_, kh, kw] = self.geom.kernel;
        let [_, sh, sw] = self.geom.stride;
        let [_, ph, pw] = self.geom.padding;
        let [_, h, w] = self.input;
        let [_, ho, wo] = self.output;
        let frame = self.in_frame();
        let lhw = self.input[0] * frame;
        for c in 0..self.c {
            let src = &x[c * lhw + t_in * frame..][..frame];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * ho * wo;
                    for y in 0..ho {
                        let dst = &mut cols[row + y * wo..][..wo];
                        let hi = (y * sh + i) as isize - ph as isize;
                        if hi < 0 || hi as usize >= h {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let line = &src[hi as usize * w..][..w];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            let wi = (xo * sw + j) as isize - pw as isize;
                            *d = if wi < 0 || wi as usize >= w { T::zero() } else { line[wi as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of a column matrix back into one input frame.
    fn col2im<T: Scalar>(&self, cols: &[T], t_in: usize, dx: &mut [T]) {
        let [_, kh, kw] = self.geom.kernel;
        let [_, sh, sw] = self.geom.stride;
        let [_, ph, pw] = self.geom.padding;
        let [_, h, w] = self.input;
        let [_, ho, wo] = self.output;
        let frame = self.in_frame();
        let lhw = self.input[0] * frame;
        for c in 0..self.c {
            let dst = &mut dx[c * lhw + t_in * frame..][..frame];
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * ho * wo;
                    for y in 0..ho {
                        let hi = (y * sh + i) as isize - ph as isize;
                        if hi < 0 || hi as usize >= h {
                            continue;
                        }
                        let src = &cols[row + y * wo..][..wo];
                        let line = &mut dst[hi as usize * w..][..w];
                        for (xo, &v) in src.iter().enumerate() {
                            let wi = (xo * sw + j) as isize - pw as isize;
                            if wi >= 0 && (wi as usize) < w {
                                line[wi as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Input frame `t_in` of one sample viewed as a `C × H·W` matrix.
    fn frame_layout(&self, t_in: usize) -> MatLayout {
        MatLayout::new(t_in * self.in_frame(), self.c, self.in_frame(), self.input[0] * self.in_frame(), 1)
    }

    /// Output frame `t_out` of one sample viewed as an `O × Ho·Wo` matrix.
    fn out_layout(&self, t_out: usize) -> MatLayout {
        MatLayout::new(t_out * self.out_frame(), self.o, self.out_frame(), self.output[0] * self.out_frame(), 1)
    }
}

/// Weight re-laid out as `[k_t][O × C·k_h·k_w]` so each temporal tap is a
/// contiguous matrix.
fn taps<T: Scalar>(w: &[T], plan: &Plan) -> Vec<T> {
    let [kt, kh, kw] = plan.geom.kernel;
    if kt == 1 {
        return w.to_vec();
    }
    let kk = kh * kw;
    let mut out = vec![T::zero(); w.len()];
    for o in 0..plan.o {
        for c in 0..plan.c {
            for dt in 0..kt {
                let src = ((o * plan.c + c) * kt + dt) * kk;
                let dst = (dt * plan.o + o) * plan.ckk() + c * kk;
                out[dst..dst + kk].copy_from_slice(&w[src..src + kk]);
            }
        }
    }
    out
}

fn untap<T: Scalar>(t: &[T], plan: &Plan) -> Vec<T> {
    let [kt, kh, kw] = plan.geom.kernel;
    if kt == 1 {
        return t.to_vec();
    }
    let kk = kh * kw;
    let mut out = vec![T::zero(); t.len()];
    for o in 0..plan.o {
        for c in 0..plan.c {
            for dt in 0..kt {
                let dst = ((o * plan.c + c) * kt + dt) * kk;
                let src = (dt * plan.o + o) * plan.ckk() + c * kk;
                out[dst..dst + kk].copy_from_slice(&t[src..src + kk]);
            }
        }
    }
    out
}

fn forward_sample<T: Scalar>(plan: &Plan, wt: &[T], x: &[T], out: &mut [T]) {
    let ckk = plan.ckk();
    let pointwise = plan.geom.spatial_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plan.out_frame()] };
    for t_in in 0..plan.input[0] {
        let targets = plan.targets(t_in);
        if targets.is_empty() {
            continue;
        }
        let (src, layout) = if pointwise {
            (x, plan.frame_layout(t_in))
        } else {
            plan.im2col(x, t_in, &mut cols);
            (&cols[..], MatLayout::row_major(0, ckk, plan.out_frame()))
        };
        for (dt, t_out) in targets {
            gemm(
                T::one(),
                wt,
                MatLayout::row_major(dt * plan.o * ckk, plan.o, ckk),
                src,
                layout,
                T::one(),
                out,
                plan.out_layout(t_out),
            );
        }
    }
}

fn input_grad_sample<T: Scalar>(plan: &Plan, wt: &[T], gout: &[T], dx: &mut [T]) {
    let ckk = plan.ckk();
    let pointwise = plan.geom.spatial_pointwise();
    let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plan.out_frame()] };
    for t_in in 0..plan.input[0] {
        let targets = plan.targets(t_in);
        if targets.is_empty() {
            continue;
        }
        if pointwise {
            for (dt, t_out) in targets {
                gemm(
                    T::one(),
                    wt,
                    MatLayout::row_major(dt * plan.o * ckk, plan.o, ckk).t(),
                    gout,
                    plan.out_layout(t_out),
                    T::one(),
                    dx,
                    plan.frame_layout(t_in),
                );
            }
        } else {
            for (q, (dt, t_out)) in targets.into_iter().enumerate() {
                gemm(
                    T::one(),
                    wt,
                    MatLayout::row_major(dt * plan.o * ckk, plan.o, ckk).t(),
                    gout,
                    plan.out_layout(t_out),
                    if q == 0 { T::zero() } else { T::one() },
                    &mut dcols,
                    MatLayout::row_major(0, ckk, plan.out_frame()),
                );
            }
            plan.col2im(&dcols, t_in, dx);
        }
    }
}

fn weight_grad_sample<T: Scalar>(plan: &Plan, x: &[T], gout: &[T], dwt: &mut [T], cols: &mut [T]) {
    let ckk = plan.ckk();
    let pointwise = plan.geom.spatial_pointwise();
    for t_in in 0..plan.input[0] {
        let targets = plan.targets(t_in);
        if targets.is_empty() {
            continue;
        }
        let (src, layout) = if pointwise {
            (x, plan.frame_layout(t_in))
        } else {
            plan.im2col(x, t_in, cols);
            (&cols[..], MatLayout::row_major(0, ckk, plan.out_frame()))
        };
        for (dt, t_out) in targets {
            gemm(
                T::one(),
                gout,
                plan.out_layout(t_out),
                src,
                layout.t(),
                T::one(),
                dwt,
                MatLayout::row_major(dt * plan.o * ckk, plan.o, ckk),
            );
        }
    }
}

/// 3D cross-correlation of `x: [N, C, L, H, W]` with `w: [O, C, k_t, k_h, k_w]`.
pub fn conv3d<T: Scalar>(
    g: &Graph<'_, T>,
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
    geom: ConvGeometry,
) -> Result<Var<T>> {
    let xd = x.dims();
    let wd = w.dims();
    if xd.len() != 5 {
        return Err(shape_err!("conv3d input must be [N, C, L, H, W], got {:?}", xd));
    }
    if wd.len() != 5 || wd[2..] != geom.kernel {
        return Err(shape_err!("conv3d weight {:?} does not match kernel {:?}", wd, geom.kernel));
    }
    if wd[1] != xd[1] {
        return Err(shape_err!("conv3d expects {} input channels, got {}", wd[1], xd[1]));
    }
    if let Some(b) = bias {
        if b.dims() != [wd[0]] {
            return Err(shape_err!("conv3d bias {:?} for {} output channels", b.dims(), wd[0]));
        }
    }
    let input = [xd[2], xd[3], xd[4]];
    let plan = Plan { n: xd[0], c: xd[1], o: wd[0], input, output: geom.output_extent(input)?, geom };
    let wt = taps(w.data(), &plan);
    let mut out = vec![T::zero(); plan.n * plan.out_sample()];
    {
        let xs = x.data();
        let bias = bias.map(|b| b.data());
        let of = plan.output[0] * plan.out_frame();
        chunks_mut(&mut out, plan.out_sample(), |n, chunk| {
            if let Some(b) = bias {
                for (o, row) in chunk.chunks_mut(of).enumerate() {
                    row.iter_mut().for_each(|v| *v = b[o]);
                }
            }
            forward_sample(&plan, &wt, &xs[n * plan.in_sample()..][..plan.in_sample()], chunk);
        });
    }
    let out_dims = [plan.n, plan.o, plan.output[0], plan.output[1], plan.output[2]];
    let out = Tensor::from_parts(Shape::new(&out_dims)?, out);

    let (xv, tx, tw) = (x.value().clone(), x.is_tracked(), w.is_tracked());
    let has_bias = bias.is_some();
    let tb = bias.is_some_and(|b| b.is_tracked());
    let mut parents = vec![x, w];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(g.record(out, &parents, move |gout| {
        let (in_s, out_s) = (plan.in_sample(), plan.out_sample());
        let dx = tx.then(|| {
            let mut dx = vec![T::zero(); plan.n * in_s];
            chunks_mut(&mut dx, in_s, |n, chunk| {
                input_grad_sample(&plan, &wt, &gout[n * out_s..][..out_s], chunk);
            });
            dx
        });
        let dw = tw.then(|| {
            let mut dwt = vec![T::zero(); wt.len()];
            let mut cols = vec![T::zero(); plan.ckk() * plan.out_frame()];
            for n in 0..plan.n {
                weight_grad_sample(&plan, &xv.data()[n * in_s..][..in_s], &gout[n * out_s..][..out_s], &mut dwt, &mut cols);
            }
            untap(&dwt, &plan)
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(tb.then(|| {
                let of = plan.output[0] * plan.out_frame();
                let mut db = vec![T::zero(); plan.o];
                for n in 0..plan.n {
                    for (o, row) in gout[n * out_s..][..out_s].chunks(of).enumerate() {
                        db[o] += row.iter().copied().sum();
                    }
                }
                db
            }));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    /// Direct nested-loop cross-correlation.
    fn brute(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, geom: ConvGeometry) -> Vec<f64> {
        let (xd, wd) = (x.dims(), w.dims());
        let out = geom.output_extent([xd[2], xd[3], xd[4]]).unwrap();
        let mut res = Vec::new();
        for n in 0..xd[0] {
            for o in 0..wd[0] {
                for t in 0..out[0] {
                    for y in 0..out[1] {
                        for z in 0..out[2] {
                            let mut acc = b.map_or(0.0, |b| b[o]);
                            for c in 0..xd[1] {
                                for dt in 0..wd[2] {
                                    for i in 0..wd[3] {
                                        for j in 0..wd[4] {
                                            let p = [
                                                (t * geom.stride[0] + dt) as isize - geom.padding[0] as isize,
                                                (y * geom.stride[1] + i) as isize - geom.padding[1] as isize,
                                                (z * geom.stride[2] + j) as isize - geom.padding[2] as isize,
                                            ];
                                            if p.iter().zip(&xd[2..]).all(|(&q, &e)| q >= 0 && (q as usize) < e) {
                                                let xi = [n, c, p[0] as usize, p[1] as usize, p[2] as usize];
                                                acc += x.at(&xi) * w.at(&[o, c, dt, i, j]);
                                            }
                                        }
                                    }
                                }
                            }
                            res.push(acc);
                        }
                    }
                }
            }
        }
        res
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, geom: ConvGeometry) -> Result<Var<f64>> {
        let g = Graph::<f64>::inference();
        let bias = b.map(|b| g.constant(b.clone()));
        conv3d(&g, &g.constant(x.clone()), &g.constant(w.clone()), bias.as_ref(), geom)
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3, 3], |i| i as f64).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1, 1]);
        let y = run(&x, &w, Some(&Tensor::zeros(&[1])), ConvGeometry::same([1, 1, 1])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn box_filter_preserves_constant_interior() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 5, 5], 3.0);
        let w = Tensor::full(&[1, 1, 1, 3, 3], 1.0 / 9.0);
        let y = run(&x, &w, None, ConvGeometry::same([1, 3, 3])).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.value().at(&[0, 0, 0, i, j]) - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_brute_force_on_spec_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[1, 1, 2, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::randn(&[1, 1, 1, 3, 3], 0.0, 1.0, &mut rng).unwrap();
        let geom = ConvGeometry::same([1, 3, 3]);
        let y = run(&x, &w, None, geom).unwrap();
        let want = brute(&x, &w, None, geom);
        let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5);
    }

    #[test]
    fn errors() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 3, 3]);
        let w = Tensor::<f64>::zeros(&[1, 1, 1, 1, 1]);
        assert!(run(&x, &w, None, ConvGeometry::same([1, 1, 1])).is_err());
        let w = Tensor::<f64>::zeros(&[1, 2, 3, 1, 1]);
        let geom = ConvGeometry { kernel: [3, 1, 1], stride: [1, 1, 1], padding: [0, 0, 0] };
        assert!(run(&x, &w, None, geom).is_err());
    }

    #[test]
    fn factored_delta_pair_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
        let delta = |kt: usize, k: usize| {
            let dims = [2, 2, kt, k, k];
            let centre = [kt / 2, k / 2, k / 2];
            Tensor::<f64>::from_fn(&dims, |i| {
                let o = i / (2 * kt * k * k);
                let r = i % (2 * kt * k * k);
                let (c, rest) = (r / (kt * k * k), r % (kt * k * k));
                let pos = [rest / (k * k), (rest / k) % k, rest % k];
                if o == c && pos == centre { 1.0 } else { 0.0 }
            })
            .unwrap()
        };
        let g = Graph::<f64>::inference();
        let h = conv3d(&g, &g.constant(x.clone()), &g.constant(delta(1, 3)), None, ConvGeometry::same([1, 3, 3])).unwrap();
        let y = conv3d(&g, &h, &g.constant(delta(3, 1)), None, ConvGeometry::same([3, 1, 1])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn matches_brute_force(
            seed in any::<u64>(),
            n in 1usize..3, c in 1usize..4, o in 1usize..4,
            ext in prop::array::uniform3(1usize..5),
            k in prop::array::uniform3(1usize..4),
            s in prop::array::uniform3(1usize..3),
            p in prop::array::uniform3(0usize..2),
            bias in any::<bool>(),
        ) {
            let geom = ConvGeometry { kernel: k, stride: s, padding: p };
            prop_assume!(geom.output_extent(ext).is_ok());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[n, c, ext[0], ext[1], ext[2]], 0.0, 1.0, &mut rng).unwrap();
            let w = Tensor::<f64>::randn(&[o, c, k[0], k[1], k[2]], 0.0, 1.0, &mut rng).unwrap();
            let b = Tensor::<f64>::randn(&[o], 0.0, 1.0, &mut rng).unwrap();
            let y = run(&x, &w, bias.then_some(&b), geom).unwrap();
            let want = brute(&x, &w, bias.then_some(b.data()), geom);
            let diff = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-5, "diff {}", diff);
        }
    }
}
