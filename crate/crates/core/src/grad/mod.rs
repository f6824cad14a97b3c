//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated (define-by-run), so
//! the tape is always in topological order and backward is a single reverse
//! sweep. Leaves created with [`Graph::param`] from a trainable [`Param`] are
//! the only nodes whose gradients are reported by name; frozen parameters and
//! constants never accumulate a gradient.
//!
//! Broadcasting is limited to what the model needs: the right-hand operand of
//! `add`/`sub`/`mul` may be full-shape, a `1×c` row, an `r×1` column, or a
//! `1×1` scalar.

mod check;
mod ops;

pub use check::{grad_check, GradCheckReport};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Affine(Var, f64),
    Recip(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Sum(Var),
    Mean(Var),
    Cosine {
        a: Var,
        b: Var,
        a_hat: Tensor,
        b_hat: Tensor,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    GroupMax {
        x: Var,
        picked: Vec<usize>,
    },
    StraightThrough(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b, _) | Sub(a, b, _) | Mul(a, b, _) => vec![*a, *b],
            Affine(x, _) | Recip(x) | SliceRows(x, _) | SliceCols(x, _) | GatherRows(x, _)
            | ScatterRows(x, _) | Transpose(x) | Softmax(x) | LogSoftmax(x) | Sigmoid(x)
            | Tanh(x) | Exp(x) | Log(x) | Softplus(x) | Gelu(x) | Sum(x) | Mean(x)
            | StraightThrough(x) => vec![*x],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            CrossEntropy { logits, .. } => vec![*logits],
            Cosine { a, b, .. } => vec![*a, *b],
            GroupMax { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An unnamed leaf, trainable when `requires_grad`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Enter a parameter. Frozen parameters become constants.
    pub fn param(&mut self, p: &Param) -> Var {
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        if !p.frozen {
            self.params.push((p.name.clone(), v));
        }
        v
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(self.shape_err_at(loss, "backward", format!("loss must be 1x1, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            ops::backprop(self, Var(i), &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn shape_err_at(&self, v: Var, op: &'static str, detail: String) -> Error {
        Error::Shape {
            op,
            node: v.0,
            detail,
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of a node, `None` when it does not require grad or is
    /// unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient by parameter name, summed over every leaf created from it.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (n, v) in &self.params {
            if n == name {
                if let Some(g) = self.get(*v) {
                    match &mut acc {
                        Some(a) => a.add_assign(g),
                        None => acc = Some(g.clone()),
                    }
                }
            }
        }
        acc
    }

    /// All named parameter gradients.
    pub fn by_param(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (n, v) in &self.params {
            if let Some(g) = self.get(*v) {
                match out.get_mut(n) {
                    Some(a) => a.add_assign(g),
                    None => {
                        out.insert(n.clone(), g.clone());
                    }
                }
            }
        }
        out
    }
}
