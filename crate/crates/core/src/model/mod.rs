//! Network assembly: stem, four residual layers with optional attention in
//! layers 3 and 4, and a pooled linear head producing one logit.

mod blocks;
mod checkpoint;
mod params;
mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{ResidualBlock, SecondOp, StOp};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, MANIFEST};
pub use params::{count_parameters, ParamReport};
pub use spec::{Backbone, ModelSpec, ShapePlan, DEFAULT_INPUT, LAYER_STRIDES, RESNET18_WIDTHS};

use crate::attention::Attention;
use crate::error::{shape_err, Result};
use crate::nn::{global_avg_pool, join, BatchNorm3d, Linear, Module, StateKind};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub spec: ModelSpec,
    pub plan: ShapePlan,
    pub stem: StOp<T>,
    pub layers: Vec<Vec<ResidualBlock<T>>>,
    pub head: Linear<T>,
    /// Recompute the stem and layer 1 during backward instead of keeping
    /// their full-resolution activations.
    pub recompute_early: bool,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = ShapePlan::new(spec.input);
        let w = spec.widths;
        let stem = StOp::new(spec.backbone, 1, w[0], 7, [1, 1, 1], &mut rng)?;
        let mut layers = Vec::with_capacity(4);
        for layer in 1..=4 {
            let mut blocks = Vec::with_capacity(spec.blocks_per_layer);
            for b in 0..spec.blocks_per_layer {
                let (inputs, stride) = if b == 0 { (w[layer - 1], LAYER_STRIDES[layer - 1]) } else { (w[layer], [1, 1, 1]) };
                let attention = if spec.has_attention(layer) {
                    Attention::build(&spec.attention, w[layer], plan.layer(layer), &mut rng)?
                } else {
                    None
                };
                blocks.push(ResidualBlock::new(spec.backbone, inputs, w[layer], stride, attention, &mut rng)?);
            }
            layers.push(blocks);
        }
        let head = Linear::new(w[4], spec.num_classes, &mut rng)?;
        Ok(Self { spec: spec.clone(), plan, stem, layers, head, recompute_early: true })
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let d = x.dims();
        if d.len() != 5 || d[1] != 1 || d[2..] != self.spec.input {
            return Err(shape_err!("model expects [N, 1, {:?}] input, got {:?}", self.spec.input, d));
        }
        Ok(())
    }

    fn early(&self, g: &Graph<'_, T>, x: &Var<T>, trace: Option<&mut Vec<Vec<usize>>>) -> Result<Var<T>> {
        let mut h = self.stem.forward(g, x)?;
        let mut shapes = vec![h.dims().to_vec()];
        for b in &self.layers[0] {
            h = b.forward(g, &h)?;
        }
        shapes.push(h.dims().to_vec());
        if let Some(t) = trace {
            t.extend(shapes);
        }
        Ok(h)
    }

    fn run<'a>(&'a self, g: &Graph<'a, T>, x: &Var<T>, mut trace: Option<&mut Vec<Vec<usize>>>) -> Result<Var<T>> {
        self.check_input(x)?;
        let mut h = if self.recompute_early && g.grad_enabled() && trace.is_none() {
            let mut params = Vec::new();
            let mut collect = |_: &str, kind: StateKind, t: &Tensor<T>| {
                if kind == StateKind::Param {
                    params.push(t.clone());
                }
            };
            self.stem.for_each("", &mut collect);
            for b in &self.layers[0] {
                b.for_each("", &mut collect);
            }
            g.checkpoint(&[x], params, move |sg, xs| self.early(sg, &xs[0], None))?
        } else {
            self.early(g, x, trace.as_deref_mut())?
        };
        for blocks in &self.layers[1..] {
            for b in blocks {
                h = b.forward(g, &h)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(h.dims().to_vec());
            }
        }
        let pooled = global_avg_pool(g, &h)?;
        let logits = self.head.forward(g, &pooled)?;
        if let Some(t) = trace {
            t.push(pooled.dims().to_vec());
            t.push(logits.dims().to_vec());
        }
        Ok(logits)
    }

    /// Logits `[N, 1]` for input `[N, 1, L, H, W]`.
    pub fn forward<'a>(&'a self, g: &Graph<'a, T>, x: &Var<T>) -> Result<Var<T>> {
        self.run(g, x, None)
    }

    /// Logits plus the output shape of the stem, each layer, the pooled
    /// features and the head.
    pub fn forward_traced<'a>(&'a self, g: &Graph<'a, T>, x: &Var<T>) -> Result<(Var<T>, Vec<Vec<usize>>)> {
        let mut trace = Vec::new();
        let y = self.run(g, x, Some(&mut trace))?;
        Ok((y, trace))
    }

    /// Evaluation-mode logits, one per sample.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let g = Graph::inference();
        Ok(self.forward(&g, &g.constant(x.clone()))?.data().to_vec())
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &Tensor<T>)) {
        self.stem.for_each(&join(prefix, "stem"), f);
        for (l, blocks) in self.layers.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.for_each(&join(prefix, &format!("layer{}.{b}", l + 1)), f);
            }
        }
        self.head.for_each(&join(prefix, "head"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateKind, &mut Tensor<T>)) {
        self.stem.for_each_mut(&join(prefix, "stem"), f);
        for (l, blocks) in self.layers.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.for_each_mut(&join(prefix, &format!("layer{}.{b}", l + 1)), f);
            }
        }
        self.head.for_each_mut(&join(prefix, "head"), f);
    }

    fn for_each_norm_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm3d<T>)) {
        self.stem.for_each_norm_mut(f);
        for block in self.layers.iter_mut().flatten() {
            block.for_each_norm_mut(f);
        }
    }
}
