//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Node ids are
//! assigned in creation order, which is a topological order, so backward is a
//! single reverse sweep.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dSpec};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A fixed linear map with a known adjoint, recorded as a single tape node.
pub trait LinearMap<T: Real> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn apply_adjoint(&self, y: &Tensor<T>) -> Result<Tensor<T>>;
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, T),
    Abs(usize),
    Sum(usize),
    SumAxis(usize),
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        spec: Conv2dSpec,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        spec: Conv2dSpec,
    },
    Gelu(usize),
    Softmax(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    AvgPool(usize, usize, usize),
    Upsample2(usize),
    Linear {
        x: usize,
        map: Rc<dyn LinearMap<T>>,
        adjoint: bool,
    },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation recorder. Single-threaded by construction (`!Sync`).
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("recording", &self.recording.get())
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that evaluates forward passes without recording backward state.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Drops every node and its saved activations. Existing `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A constant input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), false)
    }

    /// A leaf whose gradient is tracked (when recording).
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(Rc::new(value), true)
    }

    /// Like [`variable`](Self::variable) but shares the buffer.
    pub fn variable_shared(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording.get(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get() && inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.backward_seeded(loss, None)
    }

    /// Back-propagates with an explicit upstream gradient (defaults to 1 for scalars).
    pub fn backward_seeded(&self, root: Var<'_, T>, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[root.id].value.shape().to_vec();
        let seed = match seed {
            Some(s) if s.shape() == out_shape.as_slice() => s,
            Some(s) => return Err(TensorError::shape("backward", &out_shape, s.shape())),
            None if nodes[root.id].value.numel() == 1 => Tensor::ones(&out_shape),
            None => {
                return Err(TensorError::Usage(format!(
                    "backward needs a scalar objective, got shape {out_shape:?}"
                )))
            }
        };
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        let mut visited = 0;
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(seed);
        }
        for id in (0..=root.id).rev() {
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            visited += 1;
            let mut acc = |i: usize, t: Tensor<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut lower[i] {
                    Some(existing) => existing.add_assign(&t).expect("gradient shape"),
                    slot @ None => *slot = Some(t),
                }
            };
            backward_node(&nodes, node, g, &mut acc);
            // Intermediate gradients are not needed once propagated.
            upper[0] = None;
        }
        Ok(Gradients { grads, visited })
    }
}

fn backward_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    acc: &mut impl FnMut(usize, Tensor<T>),
) {
    let val = |i: usize| &*nodes[i].value;
    let need = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, kernels::reduce_to_shape(g, val(*a).shape()));
            acc(*b, kernels::reduce_to_shape(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            acc(*a, kernels::reduce_to_shape(g, val(*a).shape()));
            if need(*b) {
                acc(*b, kernels::reduce_to_shape(&g.map(|v| -v), val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            if need(*a) {
                acc(*a, kernels::mul_reduce(g, val(*b), val(*a).shape()));
            }
            if need(*b) {
                acc(*b, kernels::mul_reduce(g, val(*a), val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            if need(*a) {
                let q = kernels::broadcast_binary("div", g, bv, |x, y| x / y).expect("shape");
                acc(*a, kernels::reduce_to_shape(&q, val(*a).shape()));
            }
            if need(*b) {
                // d(a/b)/db = -out/b
                let t = g.zip_map(&node.value, |x, y| -x * y).expect("shape");
                let q = kernels::broadcast_binary("div", &t, bv, |x, y| x / y).expect("shape");
                acc(*b, kernels::reduce_to_shape(&q, bv.shape()));
            }
        }
        Op::AddScalar(a) => acc(*a, g.clone()),
        Op::MulScalar(a, s) => acc(*a, g.scale(*s)),
        Op::Abs(a) => {
            let t = g.zip_map(val(*a), |gv, x| gv * x.signum() * T::lit(if x == T::zero() { 0.0 } else { 1.0 }));
            acc(*a, t.expect("shape"));
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            acc(*a, Tensor::full(val(*a).shape(), s));
        }
        Op::SumAxis(a) => {
            let z = Tensor::zeros(val(*a).shape());
            acc(*a, kernels::broadcast_binary("sum_axis", &z, g, |_, y| y).expect("shape"));
        }
        Op::MatMul {
            a,
            b,
            trans_a,
            trans_b,
        } => {
            let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), *trans_a, *trans_b, g);
            acc(*a, ga);
            acc(*b, gb);
        }
        Op::Conv2d { x, w, spec } => {
            let (gx, gw) = kernels::conv2d_backward(val(*x), val(*w), *spec, g, need(*x), need(*w));
            if let Some(gx) = gx {
                acc(*x, gx);
            }
            if let Some(gw) = gw {
                acc(*w, gw);
            }
        }
        Op::ConvTranspose2d { x, w, spec } => {
            let (gx, gw) = kernels::conv_transpose2d_backward(val(*x), val(*w), *spec, g);
            acc(*x, gx);
            acc(*w, gw);
        }
        Op::Gelu(a) => {
            let t = g.zip_map(val(*a), |gv, x| gv * kernels::gelu_grad_scalar(x));
            acc(*a, t.expect("shape"));
        }
        Op::Softmax(a) => acc(*a, kernels::softmax_last_backward(&node.value, g)),
        Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape()).expect("shape")),
        Op::Permute(a, perm) => {
            let inv = kernels::inverse_permutation(perm);
            acc(*a, kernels::permute(g, &inv).expect("perm"));
        }
        Op::Concat(xs, axis) => {
            let mut start = 0;
            for &x in xs {
                let len = val(x).shape()[*axis];
                if need(x) {
                    acc(x, kernels::narrow(g, *axis, start, len).expect("range"));
                }
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            acc(*x, kernels::narrow_backward(val(*x).shape(), *axis, *start, g));
        }
        Op::AvgPool(x, kh, kw) => acc(*x, kernels::avg_pool_backward(val(*x).shape(), *kh, *kw, g)),
        Op::Upsample2(x) => acc(*x, kernels::upsample_bilinear2_backward(val(*x).shape(), g)),
        Op::Linear { x, map, adjoint } => {
            let t = if *adjoint {
                map.apply(g)
            } else {
                map.apply_adjoint(g)
            };
            acc(*x, t.expect("linear map adjoint"));
        }
    }
}

/// Gradients produced by one backward sweep, indexed by `Var`.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf `Var`, or `None` if it does not influence the objective.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Number of recorded operations replayed during backward.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub(crate) fn check_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }
}
