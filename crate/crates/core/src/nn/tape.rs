//! Reverse-mode autodiff over a flat tape of f64 arrays.
//!
//! Nodes are appended in topological order during the forward pass, so a
//! single reverse sweep propagates gradients. Backward closures recompute
//! cheap intermediates from parent values instead of caching them, which
//! keeps long forward-only passes (evaluation, saliency) from hoarding
//! memory. A tape built with [`Tape::no_grad`] records values only.

use ndarray::ArrayD;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

pub struct BackwardArgs<'a> {
    pub out_grad: &'a Arr,
    pub out_value: &'a Arr,
    pub parent_values: Vec<&'a Arr>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs) -> Vec<Arr>>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

#[derive(Clone)]
pub struct Tape(Rc<TapeInner>);

#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape(Rc::new(TapeInner {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }))
    }

    /// Values-only tape: ops skip recording backward closures.
    pub fn no_grad() -> Self {
        Tape(Rc::new(TapeInner {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }))
    }

    pub fn grad_enabled(&self) -> bool {
        self.0.grad_enabled
    }

    pub fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn leaf(&self, value: Arr) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(
        &self,
        value: Arr,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.0.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if self.0.grad_enabled { backward } else { None },
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn value(&self, v: &Var) -> Ref<'_, Arr> {
        Ref::map(self.0.nodes.borrow(), |nodes| &nodes[v.id].value)
    }

    /// Reverse sweep from a scalar root. Gradients for every reachable node
    /// are retained so intermediate activations can be inspected afterwards.
    pub fn backward(&self, root: &Var) -> GradStore {
        assert!(self.0.grad_enabled, "backward on a no-grad tape");
        let nodes = self.0.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Arr::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_values: Vec<&Arr> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let args = BackwardArgs {
                    out_grad: &out_grad,
                    out_value: &node.value,
                    parent_values,
                };
                let parent_grads = bw(&args);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(out_grad);
        }
        GradStore { grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Var {
    pub fn value(&self) -> Ref<'_, Arr> {
        self.tape.value(self)
    }

    pub fn to_array(&self) -> Arr {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().unwrap()
    }
}

pub struct GradStore {
    grads: Vec<Option<Arr>>,
}

impl GradStore {
    pub fn grad(&self, v: &Var) -> Option<&Arr> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var) -> Option<Arr> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}
