//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf that requires them, including parameters pulled in from a
//! [`ParamStore`](crate::nn::ParamStore).

mod ops;

use std::collections::HashMap;

pub use ops::{bce_logit, smooth_l1_slope, smooth_l1_value, BnStatUpdate};
pub(crate) use ops::sigmoid;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Maps the output gradient to one optional gradient per parent.
type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnStatUpdate<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, param_vars: HashMap::new(), bn_updates: Vec::new() }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Free variable whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let rg = self.grad_enabled;
        self.push_leaf(value, rg, None)
    }

    /// Pulls a parameter into the graph. Repeated calls return the same node,
    /// so a shared parameter accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && store.is_trainable(id);
        let v = self.push_leaf(store.value(id).clone(), rg, Some(id));
        self.param_vars.insert(id, v);
        v
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Records an op node. The closure is dropped when no parent needs a gradient.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<F>,
        parents: &[Var],
        backward: impl Fn(&Tensor<F>, &[&Tensor<F>], &Tensor<F>) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<F>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn record_bn_update(&mut self, update: BnStatUpdate<F>) {
        self.bn_updates.push(update);
    }

    /// Batch-norm running-statistics updates gathered during a training pass.
    pub fn take_bn_updates(&mut self) -> Vec<BnStatUpdate<F>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), F::one()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_vals: Vec<&Tensor<F>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pg = bw(&g, &parent_vals, &node.value);
            debug_assert_eq!(pg.len(), node.parents.len());
            for (&p, gp) in node.parents.iter().zip(pg) {
                let Some(gp) = gp else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape(), "gradient shape for node {}", p);
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&gp),
                    None => grads[p] = Some(gp),
                }
            }
        }
        let mut out = Gradients { by_node: HashMap::new(), by_param: Vec::new() };
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &self.nodes[i];
            if node.backward.is_some() || !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out.by_param.push((pid, g));
            } else {
                out.by_node.insert(i, g);
            }
        }
        out.by_param.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Gradients of free leaves and parameters after a reverse pass.
pub struct Gradients<F: Scalar> {
    by_node: HashMap<usize, Tensor<F>>,
    by_param: Vec<(ParamId, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf created with [`Graph::leaf`]; `None` if unreached.
    pub fn of(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_node.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Parameter gradients, sorted by parameter id.
    pub fn params(&self) -> &[(ParamId, Tensor<F>)] {
        &self.by_param
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<F>)> {
        self.by_param
    }
}
