use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Gradient contributions for each parent of a node, in parent order.
pub(crate) type ParentGrads<T> = Vec<Option<Vec<T>>>;
type BackwardFn<'a, T> = Box<dyn FnOnce(&[T]) -> ParentGrads<T> + 'a>;

struct Node<'a, T: Scalar> {
    parents: Vec<usize>,
    numel: usize,
    backward: Option<BackwardFn<'a, T>>,
}

/// Batch statistics produced by a training-mode normalization layer; the
/// owner folds them into its running buffers after the step.
#[derive(Clone, Debug)]
pub struct StatUpdate<T: Scalar> {
    pub layer: u64,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

/// A value flowing through a [`Graph`]. Untracked values (constants, or
/// anything computed with gradients disabled) carry no node id.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar = f32> {
    id: Option<usize>,
    value: Tensor<T>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn dims(&self) -> &[usize] {
        self.value.dims()
    }

    pub fn shape(&self) -> &Shape {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

/// Operation tape for one forward/backward pass.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and reverse insertion order is a valid topological order.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: RefCell<Vec<Node<'a, T>>>,
    params: RefCell<HashMap<usize, usize>>,
    grad_enabled: bool,
    training: bool,
    stats: Option<Rc<RefCell<Vec<StatUpdate<T>>>>>,
    kink_tracking: bool,
    kink_hash: Cell<u64>,
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Gradient-recording graph in training mode.
    pub fn new() -> Self {
        Self::with_mode(true, true)
    }

    /// No recording, evaluation-mode normalization.
    pub fn inference() -> Self {
        Self::with_mode(false, false)
    }

    pub fn with_mode(grad_enabled: bool, training: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled,
            training,
            stats: Some(Rc::new(RefCell::new(Vec::new()))),
            kink_tracking: false,
            kink_hash: Cell::new(FNV_OFFSET),
        }
    }

    /// Enables hashing of every non-differentiable branch decision (ReLU
    /// signs, max positions) so finite-difference checks can detect when a
    /// perturbation crosses a kink.
    pub fn track_kinks(mut self) -> Self {
        self.kink_tracking = true;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that is tracked when the tensor asks for gradients.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<T> {
        if self.grad_enabled && t.requires_grad() {
            self.push_leaf(t.clone())
        } else {
            self.constant(t.clone())
        }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var { id: None, value: t }
    }

    /// A learnable parameter. Registered once per graph; gradients are
    /// looked up again with [`Gradients::param`].
    pub fn param(&self, t: &Tensor<T>) -> Var<T> {
        if !self.grad_enabled || !t.requires_grad() {
            return self.constant(t.clone());
        }
        let key = t.data_id();
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { id: Some(id), value: t.clone() };
        }
        let v = self.push_leaf(t.clone());
        self.params.borrow_mut().insert(key, v.id.expect("tracked"));
        v
    }

    fn push_leaf(&self, t: Tensor<T>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), numel: t.numel(), backward: None });
        Var { id: Some(nodes.len() - 1), value: t }
    }

    /// Records an operation. `backward` receives the upstream gradient of
    /// the output and returns one optional gradient per parent.
    pub(crate) fn record<F>(&self, value: Tensor<T>, parents: &[&Var<T>], backward: F) -> Var<T>
    where
        F: FnOnce(&[T]) -> ParentGrads<T> + 'a,
    {
        if !self.grad_enabled || parents.iter().all(|p| p.id.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id.unwrap_or(usize::MAX)).collect();
        nodes.push(Node { parents: ids, numel: value.numel(), backward: Some(Box::new(backward)) });
        Var { id: Some(nodes.len() - 1), value }
    }

    pub(crate) fn note_kinks(&self, decisions: impl Iterator<Item = bool>) {
        if !self.kink_tracking {
            return;
        }
        let mut h = self.kink_hash.get();
        for d in decisions {
            h ^= d as u64 + 1;
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.kink_hash.set(h);
    }

    pub(crate) fn note_kink_index(&self, index: usize) {
        if self.kink_tracking {
            let h = (self.kink_hash.get() ^ index as u64).wrapping_mul(FNV_PRIME);
            self.kink_hash.set(h);
        }
    }

    /// Fingerprint of every branch decision taken so far.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash.get()
    }

    pub(crate) fn push_stat(&self, update: StatUpdate<T>) {
        if let Some(stats) = &self.stats {
            stats.borrow_mut().push(update);
        }
    }

    pub fn take_stats(&self) -> Vec<StatUpdate<T>> {
        self.stats.as_ref().map(|s| std::mem::take(&mut *s.borrow_mut())).unwrap_or_default()
    }

    /// Recomputation boundary: `f` runs without recording now and is re-run
    /// with recording during backward, so only the inputs are kept alive.
    /// Normalization statistics are reported once, from the first run.
    pub fn checkpoint<F>(&self, inputs: &[&Var<T>], params: Vec<Tensor<T>>, f: F) -> Result<Var<T>>
    where
        F: Fn(&Graph<'a, T>, &[Var<T>]) -> Result<Var<T>> + 'a,
    {
        let first = Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: false,
            training: self.training,
            stats: self.stats.clone(),
            kink_tracking: false,
            kink_hash: Cell::new(FNV_OFFSET),
        };
        let xs: Vec<Var<T>> = inputs.iter().map(|v| first.constant(v.value.clone())).collect();
        let out = f(&first, &xs)?.into_value();
        if !self.grad_enabled {
            return Ok(self.constant(out));
        }
        let param_vars: Vec<Var<T>> = params.iter().map(|p| self.param(p)).collect();
        let mut parents: Vec<&Var<T>> = inputs.to_vec();
        parents.extend(param_vars.iter());
        let input_values: Vec<Tensor<T>> = inputs.iter().map(|v| v.value.clone()).collect();
        let training = self.training;
        Ok(self.record(out, &parents, move |g| {
            let sub: Graph<'a, T> = Graph {
                nodes: RefCell::new(Vec::new()),
                params: RefCell::new(HashMap::new()),
                grad_enabled: true,
                training,
                stats: None,
                kink_tracking: false,
                kink_hash: Cell::new(FNV_OFFSET),
            };
            let xs: Vec<Var<T>> = input_values.into_iter().map(|t| sub.push_leaf(t)).collect();
            let out = f(&sub, &xs).expect("recomputation of a checkpointed segment failed");
            let grads = sub.backward_with(&out, g.to_vec()).expect("checkpoint backward");
            let mut res: ParentGrads<T> = xs.iter().map(|x| grads.get(x).map(<[T]>::to_vec)).collect();
            res.extend(params.iter().map(|p| grads.param(p).map(<[T]>::to_vec)));
            res
        }))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                loss.value.shape()
            )));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(self, out: &Var<T>, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != out.value.numel() {
            return Err(Error::Contract(format!(
                "seed of {} elements for output {}",
                seed.len(),
                out.value.shape()
            )));
        }
        let mut nodes = self.nodes.into_inner();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut visited = 0;
        if let Some(id) = out.id {
            grads[id] = Some(seed);
            for i in (0..=id).rev() {
                visited += 1;
                let node = &mut nodes[i];
                let Some(backward) = node.backward.take() else { continue };
                let Some(g) = grads[i].take() else { continue };
                debug_assert_eq!(g.len(), node.numel);
                let contributions = backward(&g);
                debug_assert_eq!(contributions.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contributions) {
                    let (Some(c), true) = (c, p != usize::MAX) else { continue };
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            visited += n - 1 - id;
        } else {
            visited = n;
        }
        // Non-leaf gradients were consumed above; what remains belongs to
        // leaves (or to nodes not upstream of `out`).
        let leaf_grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, node)| if node.parents.is_empty() { g } else { None })
            .collect();
        Ok(Gradients { grads: leaf_grads, params: self.params.into_inner(), visited })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, usize>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&[T]> {
        v.id.and_then(|id| self.grads.get(id)).and_then(|g| g.as_deref())
    }

    pub fn param(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params
            .get(&t.data_id())
            .and_then(|&id| self.grads[id].as_deref())
    }

    /// Number of tape nodes visited by the reverse pass.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: &Var<T>, t: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Like [`Gradients::accumulate_into`] for a tensor registered through
    /// [`Graph::param`].
    pub fn accumulate_param(&self, t: &mut Tensor<T>) -> Result<()> {
        if let Some(&id) = self.params.get(&t.data_id()) {
            if let Some(g) = &self.grads[id] {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
