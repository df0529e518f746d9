use rand_chacha::ChaCha8Rng;

use super::{init, join, Module, StateKind};
use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Reduce, Scalar, Tensor, Var};

/// `x·W + b` for `x: [N, F]`, `W: [F, O]`, `b: [O]`.
pub fn linear<T: Scalar>(g: &Graph<'_, T>, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    if x.dims().len() != 2 || w.dims().len() != 2 || x.dims()[1] != w.dims()[0] {
        return Err(shape_err!("linear: input {:?} with weight {:?}", x.dims(), w.dims()));
    }
    if b.dims() != [w.dims()[1]] {
        return Err(shape_err!("linear: bias {:?} for {} outputs", b.dims(), w.dims()[1]));
    }
    let y = g.matmul(x, w)?;
    g.add(&y, b)
}

/// Mean over every axis after the channel axis: `[N, C, ...] → [N, C]`.
pub fn global_avg_pool<T: Scalar>(g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
    let r = x.dims().len();
    if r < 3 {
        return Err(shape_err!("global pooling needs spatial axes, got {:?}", x.dims()));
    }
    let axes: Vec<isize> = (2..r as isize).collect();
    g.reduce(Reduce::Mean, x, &axes, false)
}

#[derive(Clone, Debug)]
pub struct Linear<T: Scalar = f32> {
    /// `[in, out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            weight: init::fan_in_uniform(&[inputs, outputs], inputs, rng)?,
            bias: init::fan_in_uniform(&[outputs], inputs, rng)?,
        })
    }

    pub fn forward(&self, g: &Graph<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        linear(g, x, &g.param(&self.weight), &g.param(&self.bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &self.weight);
        f(&join(prefix, "bias"), StateKind::Param, &self.bias);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), StateKind::Param, &mut self.weight);
        f(&join(prefix, "bias"), StateKind::Param, &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_linear() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        assert_eq!(linear(&g, &x, &w, &b).unwrap().data(), &[3.5]);
        let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2]));
        assert_eq!(linear(&g, &x, &eye, &zero).unwrap().data(), &[1.0, 2.0]);
        assert!(linear(&g, &x, &b, &b).is_err());
    }

    #[test]
    fn pooling_means() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(global_avg_pool(&g, &x).unwrap().data(), &[2.5]);
        let big = g.constant(Tensor::full(&[2, 512, 3, 16, 16], 0.75));
        let p = global_avg_pool(&g, &big).unwrap();
        assert_eq!(p.dims(), &[2, 512]);
        assert!(p.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }
}
