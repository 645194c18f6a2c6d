//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! A [`Tape`] owns (or borrows) every value produced during one forward pass.
//! Ops are appended in execution order and [`Tape::backward`] replays them in
//! reverse, accumulating gradients into every leaf. A tape can be replayed
//! once; a second call fails with [`Error::TapeConsumed`].

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::{self, Activation};
use crate::pfg::PfgPlan;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded op together with what its backward pass needs.
#[derive(Debug, Clone)]
pub enum DiffOp<T> {
    Leaf,
    Reshape(Var),
    Conv1d { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    Collapse { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Add(Var, Var),
    Mean(Vec<Var>),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    Pfg { x: Var, plan: Arc<PfgPlan> },
    PfgCells { x: Var, plan: Arc<PfgPlan> },
    PfgCollapse { x: Var, w: Var, b: Var, plan: Arc<PfgPlan> },
    CellsToMap { x: Var, channel: usize, plan: Arc<PfgPlan> },
    /// `-Σ coef_i · log(p_i or 1 - p_i)` selected by the binary label.
    WeightedBce { p: Var, labels: Vec<bool>, coef: Vec<T> },
    /// `Σ coef_i · smoothL1(x_i - target_i)`.
    SmoothL1 { x: Var, target: Vec<T>, coef: Vec<T> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: DiffOp<T>,
}

/// The ordered record of one forward pass.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &DiffOp<T> {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor<T>, op: DiffOp<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf borrowed from the caller (typically a parameter).
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: DiffOp::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned leaf (inputs, constants).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, DiffOp::Leaf)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, DiffOp::Reshape(x)))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv1d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, DiffOp::Conv1d { x, w, b }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::pointwise_linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, DiffOp::Linear { x, w, b }))
    }

    pub fn collapse(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::conv_collapse_samples(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, DiffOp::Collapse { x, w, b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = ops::activation(self.value(x), kind);
        self.push(out, DiffOp::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::elementwise_sum(self.value(a), self.value(b))?;
        Ok(self.push(out, DiffOp::Add(a, b)))
    }

    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = ops::stack_mean(&values)?;
        Ok(self.push(out, DiffOp::Mean(xs.to_vec())))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), DiffOp::Sum(x))
    }

    /// `Σ c_i · x_i` over scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc = T::zero();
        for &(v, c) in terms {
            let value = self.value(v);
            if value.len() != 1 {
                return Err(Error::shape("weighted_sum", format!("term {:?} is not scalar", value.shape())));
            }
            acc = acc + c * value.item();
        }
        Ok(self.push(Tensor::scalar(acc), DiffOp::WeightedSum(terms.to_vec())))
    }

    pub fn pfg(&mut self, x: Var, plan: &Arc<PfgPlan>) -> Result<Var> {
        let out = plan.forward_dense(self.value(x))?;
        Ok(self.push(out, DiffOp::Pfg { x, plan: Arc::clone(plan) }))
    }

    pub fn pfg_cells(&mut self, x: Var, plan: &Arc<PfgPlan>) -> Result<Var> {
        let out = plan.forward_cells(self.value(x))?;
        Ok(self.push(out, DiffOp::PfgCells { x, plan: Arc::clone(plan) }))
    }

    pub fn pfg_collapse(&mut self, x: Var, w: Var, b: Var, plan: &Arc<PfgPlan>) -> Result<Var> {
        let out = plan.forward_collapse(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, DiffOp::PfgCollapse { x, w, b, plan: Arc::clone(plan) }))
    }

    /// Expands one channel of a compact `rows×width` cell tensor to an `L×L` map.
    pub fn cells_to_map(&mut self, x: Var, channel: usize, plan: &Arc<PfgPlan>) -> Result<Var> {
        let value = self.value(x);
        let rows = plan.cells().rows();
        if value.rank() != 2 || value.dim(0) != rows || channel >= value.dim(1) {
            return Err(Error::shape(
                "cells_to_map",
                format!("compact tensor {:?} / channel {channel} for {rows} rows", value.shape()),
            ));
        }
        let out = plan.cells().to_map(value, channel);
        Ok(self.push(out, DiffOp::CellsToMap { x, channel, plan: Arc::clone(plan) }))
    }

    pub fn weighted_bce(&mut self, p: Var, labels: Vec<bool>, coef: Vec<T>) -> Result<Var> {
        let probs = self.value(p);
        if probs.len() != labels.len() || probs.len() != coef.len() {
            return Err(Error::shape("weighted_bce", format!("{} probabilities, {} labels, {} weights", probs.len(), labels.len(), coef.len())));
        }
        let v = losses::weighted_bce_value(probs.data(), &labels, &coef);
        Ok(self.push(Tensor::scalar(v), DiffOp::WeightedBce { p, labels, coef }))
    }

    pub fn smooth_l1(&mut self, x: Var, target: Vec<T>, coef: Vec<T>) -> Result<Var> {
        let pred = self.value(x);
        if pred.len() != target.len() || pred.len() != coef.len() {
            return Err(Error::shape("smooth_l1", format!("{} predictions, {} targets, {} weights", pred.len(), target.len(), coef.len())));
        }
        let v = losses::weighted_smooth_l1_value(pred.data(), &target, &coef);
        Ok(self.push(Tensor::scalar(v), DiffOp::SmoothL1 { x, target, coef }))
    }

    /// Replays the tape in reverse from the scalar `loss` seeded with 1.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, T::one())
    }

    pub fn backward_with_seed(&mut self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let seed = Tensor::full(self.value(loss).shape(), seed);
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product: replays the tape from `output` with upstream
    /// gradient `seed` of the output's shape.
    pub fn backward_from(&mut self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        self.consumed = true;
        let loss = output;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, DiffOp::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, grad) in self.node_backward(idx, &g)? {
                accumulate(&mut grads[input.0], grad);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaves = self.nodes.iter().map(|n| matches!(n.op, DiffOp::Leaf)).collect();
        Ok(Gradients { grads, shapes, leaves })
    }

    fn node_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let out = match &self.nodes[idx].op {
            DiffOp::Leaf => Vec::new(),
            DiffOp::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            DiffOp::Conv1d { x, w, b } => {
                let (gx, gw, gb) = ops::conv1d_backward(g, val(*x), val(*w));
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            DiffOp::Linear { x, w, b } => {
                let (gx, gw, gb) = ops::pointwise_linear_backward(g, val(*x), val(*w));
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            DiffOp::Collapse { x, w, b } => {
                let (gx, gw, gb) = ops::conv_collapse_samples_backward(g, val(*x), val(*w));
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            DiffOp::Act { x, kind } => {
                vec![(*x, ops::activation_backward(g, &self.nodes[idx].value, *kind))]
            }
            DiffOp::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            DiffOp::Mean(xs) => {
                let mut share = g.clone();
                share.scale(T::one() / T::from_usize_lossy(xs.len()));
                xs.iter().map(|&v| (v, share.clone())).collect()
            }
            DiffOp::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            DiffOp::WeightedSum(terms) => terms
                .iter()
                .map(|&(v, c)| (v, Tensor::scalar(c * g.item())))
                .collect(),
            DiffOp::Pfg { x, plan } => vec![(*x, plan.backward_dense(g)?)],
            DiffOp::PfgCells { x, plan } => vec![(*x, plan.backward_cells(g)?)],
            DiffOp::PfgCollapse { x, w, b, plan } => {
                let (gx, gw, gb) = plan.backward_collapse(g, val(*x), val(*w))?;
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            DiffOp::CellsToMap { x, channel, plan } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                plan.cells().accumulate_from_map(g, *channel, &mut gx);
                vec![(*x, gx)]
            }
            DiffOp::WeightedBce { p, labels, coef } => {
                let grad = losses::weighted_bce_grad(val(*p).data(), labels, coef, g.item());
                vec![(*p, Tensor::from_vec(val(*p).shape(), grad)?)]
            }
            DiffOp::SmoothL1 { x, target, coef } => {
                let grad = losses::weighted_smooth_l1_grad(val(*x).data(), target, coef, g.item());
                vec![(*x, Tensor::from_vec(val(*x).shape(), grad)?)]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => *slot = Some(grad),
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf; zero if the leaf did not contribute.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert!(self.leaves[v.0], "gradients are only retained for leaves");
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        assert!(self.leaves[v.0], "gradients are only retained for leaves");
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
