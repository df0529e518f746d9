use std::sync::atomic::{AtomicU64, Ordering};

use super::{join, Module, StateKind};
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Scalar, StatUpdate, Tensor, Var};

static NEXT_LAYER: AtomicU64 = AtomicU64::new(1);

/// Source of the normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'s, T> {
    /// Statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'s [T], var: &'s [T] },
}

/// Per-channel normalization of `x: [N, C, ...]` followed by `γ·x̂ + β`.
///
/// In batch mode the second return value holds the batch mean and the
/// unbiased batch variance.
#[allow(clippy::type_complexity)]
pub fn batch_norm<T: Scalar>(
    g: &Graph<'_, T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    mode: NormMode<'_, T>,
    eps: f64,
) -> Result<(Var<T>, Option<(Vec<T>, Vec<T>)>)> {
    let d = x.dims();
    if d.len() < 2 {
        return Err(shape_err!("batch norm needs a channel axis, got {:?}", d));
    }
    let (n, c) = (d[0], d[1]);
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(shape_err!("batch norm over {c} channels given affine {:?}/{:?}", gamma.dims(), beta.dims()));
    }
    let s: usize = d[2..].iter().product();
    let m = n * s;
    let xs = x.data();
    let mut mean = vec![0.0f64; c];
    let mut inv = vec![0.0f64; c];
    let mut batch = None;
    match mode {
        NormMode::Batch => {
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let rows = (0..n).map(|i| &xs[(i * c + ch) * s..][..s]);
                let mu = rows.clone().flatten().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let ss: f64 = rows.flatten().map(|v| (v.as_f64() - mu).powi(2)).sum();
                mean[ch] = mu;
                var[ch] = ss / m as f64;
                inv[ch] = 1.0 / (var[ch] + eps).sqrt();
            }
            let unbiased = var.iter().map(|&v| T::cast(if m > 1 { v * m as f64 / (m - 1) as f64 } else { v }));
            batch = Some((mean.iter().map(|&v| T::cast(v)).collect(), unbiased.collect()));
        }
        NormMode::Running { mean: rm, var: rv } => {
            if rm.len() != c || rv.len() != c {
                return Err(shape_err!("running statistics of {} channels for input with {c}", rm.len()));
            }
            for ch in 0..c {
                mean[ch] = rm[ch].as_f64();
                inv[ch] = 1.0 / (rv[ch].as_f64() + eps).sqrt();
            }
        }
    }
    let (gm, bt) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); xs.len()];
    for i in 0..n {
        for ch in 0..c {
            let (mu, iv) = (T::cast(mean[ch]), T::cast(inv[ch]));
            let (ga, be) = (gm[ch], bt[ch]);
            let off = (i * c + ch) * s;
            for (o, &v) in out[off..off + s].iter_mut().zip(&xs[off..off + s]) {
                *o = ga * (v - mu) * iv + be;
            }
        }
    }
    let out = Tensor::from_parts(x.shape().clone(), out);
    let (xv, gv) = (x.value().clone(), gamma.data().to_vec());
    let per_batch = matches!(mode, NormMode::Batch);
    let var = g.record(out, &[x, gamma, beta], move |gout| {
        let xs = xv.data();
        let mut dx = vec![T::zero(); xs.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, iv) = (mean[ch], inv[ch]);
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for i in 0..n {
                let off = (i * c + ch) * s;
                for (&gv, &xv) in gout[off..off + s].iter().zip(&xs[off..off + s]) {
                    let gv = gv.as_f64();
                    sg += gv;
                    sgx += gv * (xv.as_f64() - mu) * iv;
                }
            }
            dbeta[ch] = T::cast(sg);
            dgamma[ch] = T::cast(sgx);
            let scale = gv[ch].as_f64() * iv;
            for i in 0..n {
                let off = (i * c + ch) * s;
                for ((d, &gv), &xv) in dx[off..off + s].iter_mut().zip(&gout[off..off + s]).zip(&xs[off..off + s]) {
                    let gv = gv.as_f64();
                    *d = T::cast(if per_batch {
                        let xh = (xv.as_f64() - mu) * iv;
                        scale * (gv - sg / m as f64 - xh * sgx / m as f64)
                    } else {
                        scale * gv
                    });
                }
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    });
    Ok((var, batch))
}

/// Batch normalization with learnable affine and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T: Scalar = f32> {
    layer: u64,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm3d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            layer: NEXT_LAYER.fetch_add(1, Ordering::Relaxed),
            gamma: Tensor::ones(&[channels]).with_requires_grad(),
            beta: Tensor::zeros(&[channels]).with_requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Process-unique identity used to route batch statistics back here.
    pub fn id(&self) -> u64 {
        self.layer
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Batch statistics when the graph is in training mode, running
    /// statistics otherwise.
    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let mode = if g.training() {
            NormMode::Batch
        } else {
            NormMode::Running { mean: self.running_mean.data(), var: self.running_var.data() }
        };
        let (gamma, beta) = (g.param(&self.gamma), g.param(&self.beta));
        let (y, stats) = batch_norm(g, x, &gamma, &beta, mode, self.eps)?;
        if let Some((mean, var)) = stats {
            g.push_stat(StatUpdate { layer: self.layer, mean, var });
        }
        Ok(y)
    }

    pub fn update_running(&mut self, u: &StatUpdate<T>) {
        let m = T::cast(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&u.var) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm3d<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &self.gamma);
        f(&join(prefix, "bias"), StateKind::Param, &self.beta);
        f(&join(prefix, "running_mean"), StateKind::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), StateKind::Buffer, &self.running_var);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &mut self.gamma);
        f(&join(prefix, "bias"), StateKind::Param, &mut self.beta);
        f(&join(prefix, "running_mean"), StateKind::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), StateKind::Buffer, &mut self.running_var);
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        f(self);
    }
}
