//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is recorded fresh for every training step. Operations are
//! methods on [`Var`], a cheap copyable handle to a node on the tape. Calling
//! [`Tape::backward`] consumes the tape: a second call is a contract error.

mod backward;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use ops::Segment;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Scalar,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Sqrt,
    Sigmoid,
    Gelu,
    NormalCdf,
    Square,
    Exp,
    Log,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinKind,
        bcast: Bcast,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Shift {
        a: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    GatherRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
    },
    Pick {
        a: NodeId,
        coords: Vec<(usize, usize)>,
    },
    ScaleRows {
        x: NodeId,
        w: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    SumRows {
        a: NodeId,
    },
    Unary {
        a: NodeId,
        kind: UnaryKind,
        saved: Vec<f64>,
    },
    Softmax {
        a: NodeId,
    },
    LogSumExp {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    consumed: bool,
}

/// Define-by-run operation record.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records (once per tape) the current value of a stored parameter.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().params.get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push(store.value(id).clone(), Op::Leaf, true);
        self.inner.borrow_mut().params.insert(id, var.id);
        var
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    pub(crate) fn needs_grad(&self, ids: &[NodeId]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].needs_grad)
    }

    /// Runs the reverse pass from a scalar loss.
    ///
    /// Every leaf reachable from `loss` receives a gradient; parameters that
    /// were recorded but not reached report zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(contract("backward called twice on the same tape"));
            }
            let numel = inner.nodes[loss.id].value.numel();
            if numel != 1 {
                return Err(contract(format!(
                    "backward requires a scalar loss, got {:?}",
                    inner.nodes[loss.id].value.shape()
                )));
            }
            inner.consumed = true;
        }
        let inner = self.inner.borrow();
        let grads = backward::run(&inner.nodes, loss.id);
        let shapes = inner
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            params: inner.params.clone(),
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    /// Borrowing access to the recorded value.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }
}

/// Gradients produced by one reverse pass, keyed by leaf node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` when it was not reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for a leaf with zeros substituted for unreached leaves.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    /// Gradient for a parameter recorded via [`Tape::param`].
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let node = *self.params.get(&id)?;
        Some(
            self.grads[node]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[node])),
        )
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter()
            .filter_map(|id| self.param(id).map(|g| (id, g)))
    }
}
