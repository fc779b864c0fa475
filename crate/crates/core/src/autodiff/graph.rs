use std::cell::RefCell;
use std::collections::HashMap;
use std::marker::PhantomData;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackFn<T>>,
}

/// A value in a computation. Values that depend on a tracked parameter or
/// leaf carry a node id on the tape; everything else is a constant.
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    node: Option<usize>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            value: Arc::clone(&self.value),
            node: self.node,
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn rc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

/// Reverse-mode tape. Parameters are borrowed for the lifetime `'p` so they
/// cannot change while the tape refers to them.
pub struct Graph<'p, T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<*const Tensor<T>, Var<T>>>,
    track: bool,
    _params: PhantomData<&'p Tensor<T>>,
}

/// Gradients produced by [`Graph::backward`], keyed by tape node.
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.node.and_then(|id| self.grads.get(&id))
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, v: &Var<T>) -> Tensor<T> {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A tape that records operations on parameters for backpropagation.
    pub fn new() -> Self {
        Self::with_tracking(true)
    }

    /// An untracked graph: every value is a constant and nothing is kept.
    pub fn inference() -> Self {
        Self::with_tracking(false)
    }

    fn with_tracking(track: bool) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            track,
            _params: PhantomData,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        self.shared(Arc::new(t))
    }

    /// A constant that shares storage with the caller, e.g. frozen weights.
    pub fn shared(&self, t: Arc<Tensor<T>>) -> Var<T> {
        Var { value: t, node: None }
    }

    /// A differentiable input that is not a model parameter.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        if !self.track {
            return self.constant(t);
        }
        let id = self.push(Node {
            parents: vec![],
            backward: None,
        });
        Var {
            value: Arc::new(t),
            node: Some(id),
        }
    }

    /// The tape variable of a model parameter. Repeated calls with the same
    /// tensor return the same variable, so gradients from every use add up.
    pub fn param(&self, t: &'p Tensor<T>) -> Var<T> {
        let key = t as *const Tensor<T>;
        if let Some(v) = self.params.borrow().get(&key) {
            return v.clone();
        }
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(key, v.clone());
        v
    }

    /// Variable previously created for `t` with [`Graph::param`].
    pub fn param_var(&self, t: &Tensor<T>) -> Option<Var<T>> {
        self.params
            .borrow()
            .get(&(t as *const Tensor<T>))
            .cloned()
    }

    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records an operation. `backward` maps the output gradient to one
    /// optional gradient per input; the flags say which inputs need one.
    pub(crate) fn record<F>(&self, value: Tensor<T>, inputs: &[&Var<T>], backward: F) -> Var<T>
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let parents: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        if !self.track || parents.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let id = self.push(Node {
            parents,
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Arc::new(value),
            node: Some(id),
        }
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Gradients<T> {
        let mut out = Gradients {
            grads: HashMap::new(),
        };
        let Some(root) = loss.node else {
            return out;
        };
        let nodes = self.nodes.borrow();
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::full(loss.shape(), T::one()));
        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    out.grads.insert(id, grad);
                }
                Some(back) => {
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let parent_grads = back(&grad, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(g)) = (p, g) {
                            match &mut pending[*p] {
                                Some(acc) => acc.add_assign(&g),
                                slot @ None => *slot = Some(g),
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}
