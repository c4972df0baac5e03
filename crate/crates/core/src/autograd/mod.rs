//! Reverse-mode differentiation over a linear tape.
//!
//! Network code is written once against [`Ops`]; [`Graph`] records the
//! operations for backpropagation while [`Eager`] only evaluates them.

pub mod kernels;

use std::rc::Rc;

use crate::losses::{self, SsimConstants, SsimMode};
use crate::tensor::Tensor;

/// Layer primitives shared by the recording and the eager evaluator.
pub trait Ops {
    type Var: Clone;

    fn conv2d(&mut self, x: &Self::Var, w: &Self::Var, b: Option<&Self::Var>, stride: usize, pad: usize) -> Self::Var;
    fn conv_transpose2d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: Option<&Self::Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self::Var;
    fn reflect_pad(&mut self, x: &Self::Var, pad: usize) -> Self::Var;
    fn instance_norm(&mut self, x: &Self::Var) -> Self::Var;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn leaky_relu(&mut self, x: &Self::Var, slope: f64) -> Self::Var;
    fn tanh(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Self::Var;
}

/// Evaluation without a tape; intermediates are freed as soon as they die.
#[derive(Default)]
pub struct Eager;

impl Ops for Eager {
    type Var = Rc<Tensor>;

    fn conv2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: Option<&Rc<Tensor>>, stride: usize, pad: usize) -> Rc<Tensor> {
        Rc::new(kernels::conv2d(x, w, b.map(|b| &**b), stride, pad))
    }

    fn conv_transpose2d(
        &mut self,
        x: &Rc<Tensor>,
        w: &Rc<Tensor>,
        b: Option<&Rc<Tensor>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Rc<Tensor> {
        Rc::new(kernels::conv_transpose2d(x, w, b.map(|b| &**b), stride, pad, out_pad))
    }

    fn reflect_pad(&mut self, x: &Rc<Tensor>, pad: usize) -> Rc<Tensor> {
        Rc::new(kernels::reflect_pad(x, pad))
    }

    fn instance_norm(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::instance_norm(x).0)
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(x.map(|v| v.max(0.0)))
    }

    fn leaky_relu(&mut self, x: &Rc<Tensor>, slope: f64) -> Rc<Tensor> {
        Rc::new(x.map(|v| if v > 0.0 { v } else { slope * v }))
    }

    fn tanh(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(x.map(f64::tanh))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        let mut out = (**a).clone();
        out.add_assign(b);
        Rc::new(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ConvTranspose2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    ReflectPad { x: NodeId, pad: usize },
    InstanceNorm { x: NodeId, inv_std: Vec<f64> },
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    /// mean((x - target)^2)
    MeanSquaredDeviation { x: NodeId, target: f64 },
    /// mean(|a - b|)
    MeanAbsDiff(NodeId, NodeId),
    /// batch mean of (1 - SSIM)
    SsimLoss { a: NodeId, b: NodeId, k: SsimConstants, mode: SsimMode },
    /// Σ coef·term, accumulated left to right.
    Linear(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Node values are kept until the graph drops.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a loss node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mean_squared_deviation(&mut self, x: NodeId, target: f64) -> NodeId {
        let v = losses::mean_squared_deviation(self.value(x).data(), target);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanSquaredDeviation { x, target }, rg)
    }

    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = losses::mean_abs_diff(self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), rg)
    }

    pub fn ssim_loss(&mut self, a: NodeId, b: NodeId, k: SsimConstants, mode: SsimMode) -> NodeId {
        let v = losses::ssim_loss_batch(self.value(a), self.value(b), k, mode);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::SsimLoss { a, b, k, mode }, rg)
    }

    pub fn linear(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = 0.0;
        for (i, &(id, coef)) in terms.iter().enumerate() {
            let t = coef * self.scalar(id);
            acc = if i == 0 { t } else { acc + t };
        }
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        self.push(Tensor::scalar(acc), Op::Linear(terms.to_vec()), rg)
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            // Leaves keep their gradient; interior nodes hand it to inputs.
            let send = |grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| {
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.value(*w), &dy, *stride, *pad, need);
                    if let Some(g) = dx {
                        send(&mut grads, *x, g);
                    }
                    if let Some(g) = dw {
                        send(&mut grads, *w, g);
                    }
                    if let (Some(g), Some(b)) = (db, b) {
                        send(&mut grads, *b, g);
                    }
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &dy,
                        *stride,
                        *pad,
                        need,
                    );
                    if let Some(g) = dx {
                        send(&mut grads, *x, g);
                    }
                    if let Some(g) = dw {
                        send(&mut grads, *w, g);
                    }
                    if let (Some(g), Some(b)) = (db, b) {
                        send(&mut grads, *b, g);
                    }
                }
                Op::ReflectPad { x, pad } => {
                    let g = kernels::reflect_pad_backward(&dy, *pad, self.value(*x).shape());
                    send(&mut grads, *x, g);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let g = kernels::instance_norm_backward(&node.value, inv_std, &dy);
                    send(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut g = dy;
                    for (d, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let mut g = dy;
                    for (d, &v) in g.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d *= slope;
                        }
                    }
                    send(&mut grads, *x, g);
                }
                Op::Tanh(x) => {
                    let mut g = dy;
                    for (d, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    send(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        send(&mut grads, *b, dy.clone());
                    }
                    if self.rg(*a) {
                        send(&mut grads, *a, dy);
                    }
                }
                Op::MeanSquaredDeviation { x, target } => {
                    let xv = self.value(*x);
                    let scale = 2.0 * dy.data()[0] / xv.len() as f64;
                    send(&mut grads, *x, xv.map(|v| scale * (v - target)));
                }
                Op::MeanAbsDiff(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let scale = dy.data()[0] / av.len() as f64;
                    let sign = Tensor::new(
                        av.shape().to_vec(),
                        av.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(p, q)| scale * sign(p - q))
                            .collect(),
                    )
                    .expect("shapes checked at record time");
                    if self.rg(*b) {
                        send(&mut grads, *b, sign.map(|v| -v));
                    }
                    if self.rg(*a) {
                        send(&mut grads, *a, sign);
                    }
                }
                Op::SsimLoss { a, b, k, mode } => {
                    let (mut ga, mut gb) = losses::ssim_loss_batch_grad(self.value(*a), self.value(*b), *k, *mode);
                    let s = dy.data()[0];
                    ga.data_mut().iter_mut().for_each(|v| *v *= s);
                    gb.data_mut().iter_mut().for_each(|v| *v *= s);
                    if self.rg(*a) {
                        send(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, gb);
                    }
                }
                Op::Linear(terms) => {
                    let s = dy.data()[0];
                    for &(id, coef) in terms {
                        if self.rg(id) {
                            send(&mut grads, id, Tensor::scalar(coef * s));
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Ops for Graph {
    type Var = NodeId;

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), stride, pad);
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(
            v,
            Op::Conv2d {
                x: *x,
                w: *w,
                b: b.copied(),
                stride,
                pad,
            },
            rg,
        )
    }

    fn conv_transpose2d(
        &mut self,
        x: &NodeId,
        w: &NodeId,
        b: Option<&NodeId>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> NodeId {
        let v = kernels::conv_transpose2d(
            self.value(*x),
            self.value(*w),
            b.map(|b| self.value(*b)),
            stride,
            pad,
            out_pad,
        );
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(
            v,
            Op::ConvTranspose2d {
                x: *x,
                w: *w,
                b: b.copied(),
                stride,
                pad,
            },
            rg,
        )
    }

    fn reflect_pad(&mut self, x: &NodeId, pad: usize) -> NodeId {
        let v = kernels::reflect_pad(self.value(*x), pad);
        let rg = self.rg(*x);
        self.push(v, Op::ReflectPad { x: *x, pad }, rg)
    }

    fn instance_norm(&mut self, x: &NodeId) -> NodeId {
        let (v, inv_std) = kernels::instance_norm(self.value(*x));
        let rg = self.rg(*x);
        self.push(v, Op::InstanceNorm { x: *x, inv_std }, rg)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let v = self.value(*x).map(|v| v.max(0.0));
        let rg = self.rg(*x);
        self.push(v, Op::Relu(*x), rg)
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        let v = self.value(*x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(*x);
        self.push(v, Op::LeakyRelu(*x, slope), rg)
    }

    fn tanh(&mut self, x: &NodeId) -> NodeId {
        let v = self.value(*x).map(f64::tanh);
        let rg = self.rg(*x);
        self.push(v, Op::Tanh(*x), rg)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let mut v = self.value(*a).clone();
        v.add_assign(self.value(*b));
        let rg = self.rg(*a) || self.rg(*b);
        self.push(v, Op::Add(*a, *b), rg)
    }
}
