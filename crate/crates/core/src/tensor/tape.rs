use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{Shape, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize },
    Relu(usize),
    Add(usize, usize),
    Concat(Vec<usize>),
    PixelShuffle { x: usize, r: usize },
    L1 { pred: usize, target: usize },
    Sum(usize),
    WeightedSum { x: usize, weights: Rc<Tensor4> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor4>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward passes.
    grad: Option<Vec<f32>>,
}

/// Dynamically recorded computation graph.
///
/// Every operation on a [`Var`] appends a node. [`Tape::backward`] walks the
/// nodes in reverse recording order and adds `dLoss/dLeaf` into each leaf
/// that requires gradients; calling it again without
/// [`Tape::zero_grads`] accumulates. Intermediate gradients are dropped as
/// soon as they have been propagated. A tape created with
/// [`Tape::no_grad`] records nothing and only evaluates.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    no_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    value: Rc<Tensor4>,
    requires_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::default(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor4, op: Op, requires_grad: bool) -> Var<'_> {
        let value = Rc::new(value);
        let requires_grad = requires_grad && !self.no_grad;
        if self.no_grad {
            return Var {
                tape: self,
                id: usize::MAX,
                value,
                requires_grad: false,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let grad = (requires_grad && matches!(op, Op::Leaf)).then(|| vec![0.0; value.numel()]);
        nodes.push(Node {
            value: Rc::clone(&value),
            op,
            requires_grad,
            grad,
        });
        Var {
            tape: self,
            id,
            value,
            requires_grad,
        }
    }

    /// Records `t` as a leaf. It requires gradients iff `t` does; the
    /// value is copied without its gradient buffer.
    pub fn leaf(&self, t: &Tensor4) -> Var<'_> {
        self.push(t.detached(), Op::Leaf, t.requires_grad())
    }

    /// Records an owned value as a leaf that never requires gradients.
    pub fn constant(&self, t: Tensor4) -> Var<'_> {
        let t = if t.requires_grad() { t.detached() } else { t };
        self.push(t, Op::Leaf, false)
    }

    /// Records an owned value as a leaf that requires gradients.
    pub fn variable(&self, t: Tensor4) -> Var<'_> {
        let t = if t.requires_grad() { t.detached() } else { t };
        self.push(t, Op::Leaf, true)
    }

    fn check_owner(&self, v: &Var<'_>) {
        assert!(std::ptr::eq(self, v.tape), "variable belongs to a different tape");
    }

    /// Accumulated gradient of a leaf, if it requires one.
    pub fn grad(&self, v: &Var<'_>) -> Option<Tensor4> {
        self.check_owner(v);
        let nodes = self.nodes.borrow();
        let node = nodes.get(v.id)?;
        let g = node.grad.clone()?;
        Tensor4::from_vec(node.value.shape(), g).ok()
    }

    /// Adds the accumulated gradient of leaf `v` into `dst`'s gradient
    /// buffer.
    pub fn accumulate_into(&self, v: &Var<'_>, dst: &mut Tensor4) -> Result<()> {
        self.check_owner(v);
        let nodes = self.nodes.borrow();
        match nodes.get(v.id).and_then(|n| n.grad.as_ref()) {
            Some(g) => dst.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            if let Some(g) = &mut node.grad {
                g.fill(0.0);
            }
        }
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        self.check_owner(loss);
        if loss.value.numel() != 1 {
            return Err(Error::shape("backward", "a single-element loss", loss.value.shape()));
        }
        if self.no_grad {
            return Err(Error::InvalidArgument("backward on a no-grad tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                if let Some(acc) = &mut nodes[id].grad {
                    acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
                }
                continue;
            }
            let nodes = &*nodes;
            let node = &nodes[id];
            let emit = |grads: &mut Vec<Option<Vec<f32>>>, target: usize, g: Vec<f32>| {
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::Conv2d { x, w, b } => {
                    let node_shape = node.value.shape();
                    let (xn, wn) = (&nodes[x], &nodes[w]);
                    let upstream = Tensor4::from_vec(node_shape, g)?;
                    let (gx, gw, gb) = kernels::conv2d_backward(
                        &xn.value,
                        &wn.value,
                        &upstream,
                        xn.requires_grad,
                        wn.requires_grad,
                        nodes[b].requires_grad,
                    );
                    for (t, gt) in [(x, gx), (w, gw), (b, gb)] {
                        if let Some(gt) = gt {
                            emit(&mut grads, t, gt);
                        }
                    }
                }
                &Op::Relu(x) => {
                    let gx = kernels::relu_backward(&nodes[x].value, &g);
                    emit(&mut grads, x, gx);
                }
                &Op::Add(a, b) => {
                    if nodes[b].requires_grad {
                        emit(&mut grads, b, g.clone());
                    }
                    if nodes[a].requires_grad {
                        emit(&mut grads, a, g);
                    }
                }
                Op::Concat(inputs) => {
                    let channels: Vec<usize> = inputs.iter().map(|&i| nodes[i].value.shape().c).collect();
                    let parts = kernels::concat_backward(node.value.shape(), &channels, &g);
                    for (&i, part) in inputs.iter().zip(parts) {
                        if nodes[i].requires_grad {
                            emit(&mut grads, i, part);
                        }
                    }
                }
                &Op::PixelShuffle { x, r } => {
                    let upstream = Tensor4::from_vec(node.value.shape(), g)?;
                    let gx = kernels::pixel_unshuffle(&upstream, r)?.into_data();
                    emit(&mut grads, x, gx);
                }
                &Op::L1 { pred, target } => {
                    let (p, t) = (&nodes[pred], &nodes[target]);
                    if p.requires_grad {
                        let gp = kernels::l1_loss_backward(&p.value, &t.value, g[0]);
                        emit(&mut grads, pred, gp);
                    }
                    if t.requires_grad {
                        let gt = kernels::l1_loss_backward(&t.value, &p.value, g[0]);
                        emit(&mut grads, target, gt);
                    }
                }
                &Op::Sum(x) => {
                    let gx = vec![g[0]; nodes[x].value.numel()];
                    emit(&mut grads, x, gx);
                }
                Op::WeightedSum { x, weights } => {
                    let gx = weights.data().iter().map(|w| w * g[0]).collect();
                    emit(&mut grads, *x, gx);
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor4 {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn to_tensor(&self) -> Tensor4 {
        (*self.value).clone()
    }

    pub fn item(&self) -> Result<f32> {
        self.value.item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables belong to different tapes");
    }

    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weight);
        self.same_tape(bias);
        let out = kernels::conv2d(&self.value, &weight.value, &bias.value)?;
        let rg = self.requires_grad || weight.requires_grad || bias.requires_grad;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.id,
        };
        Ok(self.tape.push(out, op, rg))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = kernels::relu(&self.value);
        self.tape.push(out, Op::Relu(self.id), self.requires_grad)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = kernels::add(&self.value, &other.value)?;
        let rg = self.requires_grad || other.requires_grad;
        Ok(self.tape.push(out, Op::Add(self.id, other.id), rg))
    }

    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t>> {
        let out = kernels::pixel_shuffle(&self.value, r)?;
        let op = Op::PixelShuffle { x: self.id, r };
        Ok(self.tape.push(out, op, self.requires_grad))
    }

    pub fn l1_loss(&self, target: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(target);
        let loss = kernels::l1_loss(&self.value, &target.value)?;
        let rg = self.requires_grad || target.requires_grad;
        let op = Op::L1 {
            pred: self.id,
            target: target.id,
        };
        Ok(self.tape.push(Tensor4::scalar(loss), op, rg))
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.value.data().iter().map(|&v| v as f64).sum();
        self.tape.push(Tensor4::scalar(s as f32), Op::Sum(self.id), self.requires_grad)
    }

    /// `sum_i x_i * weights_i` with constant weights; a smooth scalar
    /// projection handy for gradient checks.
    pub fn weighted_sum(&self, weights: &Tensor4) -> Result<Var<'t>> {
        if weights.shape() != self.shape() {
            return Err(Error::shape("weighted_sum", self.shape(), weights.shape()));
        }
        let s: f64 = self
            .value
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let op = Op::WeightedSum {
            x: self.id,
            weights: Rc::new(weights.detached()),
        };
        Ok(self.tape.push(Tensor4::scalar(s as f32), op, self.requires_grad))
    }
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels<'t>(xs: &[&Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = xs.first() else {
        return Err(Error::InvalidArgument("concat_channels: no inputs".into()));
    };
    for x in xs {
        first.same_tape(x);
    }
    let values: Vec<&Tensor4> = xs.iter().map(|v| v.value.as_ref()).collect();
    let out = kernels::concat_channels(&values)?;
    let rg = xs.iter().any(|v| v.requires_grad);
    let ids = xs.iter().map(|v| v.id).collect();
    Ok(first.tape.push(out, Op::Concat(ids), rg))
}
