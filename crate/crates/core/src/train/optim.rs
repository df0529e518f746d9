use crate::nn::{Module, StateKind};
use crate::tensor::Scalar;

use super::schedule::OptimizerKind;

/// First-order optimizers over a module's parameters, visited in
/// `for_each_mut` order; `grads[i]` belongs to the i-th parameter.
#[derive(Clone, Debug)]
pub enum Optimizer<T: Scalar = f32> {
    Adam { beta1: f64, beta2: f64, eps: f64, step: i32, m: Vec<Vec<T>>, v: Vec<Vec<T>> },
    Sgd { momentum: f64, velocity: Vec<Vec<T>> },
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() },
            OptimizerKind::Sgd => Self::Sgd { momentum: 0.9, velocity: Vec::new() },
        }
    }

    pub fn step(&mut self, module: &mut dyn Module<T>, grads: &[Vec<T>], lr: f64) {
        let fresh = |state: &mut Vec<Vec<T>>| {
            if state.is_empty() {
                *state = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            }
        };
        match self {
            Self::Adam { beta1, beta2, eps, step, m, v } => {
                fresh(m);
                fresh(v);
                *step += 1;
                let (b1, b2, eps) = (*beta1, *beta2, *eps);
                let c1 = 1.0 - b1.powi(*step);
                let c2 = 1.0 - b2.powi(*step);
                let mut i = 0;
                module.for_each_mut("", &mut |_, kind, t| {
                    if kind != StateKind::Param {
                        return;
                    }
                    let (mi, vi, g) = (&mut m[i], &mut v[i], &grads[i]);
                    for (((p, m), v), &g) in t.data_mut().iter_mut().zip(mi.iter_mut()).zip(vi.iter_mut()).zip(g) {
                        let g = g.as_f64();
                        let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                        let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                        *m = T::cast(mn);
                        *v = T::cast(vn);
                        let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                        *p = T::cast(p.as_f64() - update);
                    }
                    i += 1;
                });
            }
            Self::Sgd { momentum, velocity } => {
                fresh(velocity);
                let mu = *momentum;
                let mut i = 0;
                module.for_each_mut("", &mut |_, kind, t| {
                    if kind != StateKind::Param {
                        return;
                    }
                    for ((p, u), &g) in t.data_mut().iter_mut().zip(velocity[i].iter_mut()).zip(&grads[i]) {
                        let un = mu * u.as_f64() + g.as_f64();
                        *u = T::cast(un);
                        *p = T::cast(p.as_f64() - lr * un);
                    }
                    i += 1;
                });
            }
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
