//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted node. Operations on vars record a
//! backward closure only when grad mode is on and at least one input
//! requires a gradient, so inference under [`no_grad`] keeps no graph and
//! intermediate buffers are released as soon as the last `Var` drops.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::nn::{Param, ParamId};
use crate::tensor::Tensor;

/// Backward closure: `(grad_out, parents, out_value) -> grad per parent`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[Var], &Tensor) -> Vec<Option<Tensor>>>;

static NEXT_NODE: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    fn make(value: Tensor, requires_grad: bool, parents: Vec<Var>, backward: Option<BackwardFn>, param: Option<ParamId>) -> Var {
        Var(Rc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            parents,
            backward,
            param,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var::make(value, false, Vec::new(), None, None)
    }

    /// A free leaf that receives gradients (when grad mode is on).
    pub fn leaf(value: Tensor) -> Var {
        Var::make(value, grad_enabled(), Vec::new(), None, None)
    }

    pub fn from_param(p: &Param) -> Var {
        Var::make(
            p.value().clone(),
            p.is_trainable() && grad_enabled(),
            Vec::new(),
            None,
            Some(p.id()),
        )
    }

    /// Records an op result. `backward` is dropped when nothing upstream needs a gradient.
    pub fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Var::make(value, true, parents, Some(backward), None)
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Same value, cut from the graph (stop-gradient).
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Backpropagates from a scalar.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar output");
        self.backward_with(Tensor::ones(self.shape()))
    }

    pub fn backward_with(&self, seed: Tensor) -> Gradients {
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Tensor> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.0.id) else {
                continue;
            };
            match &node.0.backward {
                Some(bw) => {
                    let parent_grads = bw(&g, &node.0.parents, &node.0.value);
                    debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                    for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                        match pending.get_mut(&p.0.id) {
                            Some(acc) => acc.axpy(1.0, &pg),
                            None => {
                                pending.insert(p.0.id, pg);
                            }
                        }
                    }
                }
                None => grads.insert_leaf(node, g),
            }
        }
        grads
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((v, child)) = stack.pop() {
            if child < v.0.parents.len() {
                let p = v.0.parents[child].clone();
                stack.push((v, child + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(v);
            }
        }
        order
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, grad={})", self.id(), self.value(), self.requires_grad())
    }
}

/// Gradients of leaf vars, addressable by var or by parameter.
#[derive(Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    fn insert_leaf(&mut self, node: &Var, g: Tensor) {
        if let Some(pid) = node.0.param {
            match self.by_param.get_mut(&pid) {
                Some(acc) => acc.axpy(1.0, &g),
                None => {
                    self.by_param.insert(pid, g.clone());
                }
            }
        }
        self.by_node.insert(node.id(), g);
    }

    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.by_node.get(&v.id())
    }

    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.by_param.get(&p.id())
    }

    pub fn param_id(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.by_param.keys()
    }

    /// Euclidean norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.by_param.keys().copied().collect();
        ids.sort();
        ids.iter().map(|id| self.by_param[id].sq_norm()).sum::<f64>().sqrt()
    }

    /// Rescales parameter gradients so their joint norm is at most `max_norm`.
    pub fn clip_param_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.param_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.by_param.values_mut() {
                *g = g.scale(s);
            }
        }
        norm
    }
}
