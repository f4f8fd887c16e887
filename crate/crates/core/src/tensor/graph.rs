use super::conv::{self, ConvSpec};
use super::{elementwise, linear, norm, resize, shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var },
    Interp1d { x: Var, axis: usize },
    AvgPool { x: Var, factor: [usize; 3] },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, invstd: Vec<T>, batch_stats: bool },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    LeakyRelu { x: Var, slope: T },
    Silu { x: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize },
    TopKMean { x: Var, picked: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Gradient tape. Nodes are appended in execution order.
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// New tape. Non-finite checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad.as_ref().map(|g| Tensor { shape: n.value.shape().to_vec(), data: g.clone() })
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Appends an op output. `inputs` decide gradient tracking.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every
    /// gradient-tracking leaf. Gradients of interior nodes are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || self.nodes[i].grad.is_none() {
                continue;
            }
            let contributions = self.backward_node(i)?;
            self.nodes[i].grad = None;
            for (v, g) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0], &g);
                }
            }
        }
        Ok(())
    }

    /// Clears leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn backward_node(&self, i: usize) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let g = node.grad.as_deref().expect("checked by caller");
        let out = &node.value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv3d { x, w, b, spec } => conv::backward(self, *x, *w, *b, spec, out, g),
            Op::Pointwise { x, w, b } => linear::pointwise_backward(self, *x, *w, *b, g),
            Op::Matmul { a, b } => linear::matmul_backward(self, *a, *b, g),
            Op::Interp1d { x, axis } => resize::interp_backward(self, *x, *axis, out, g),
            Op::AvgPool { x, factor } => resize::avg_pool_backward(self, *x, *factor, g),
            Op::BatchNorm { x, gamma, beta, xhat, invstd, batch_stats } => {
                norm::backward(self, *x, *gamma, *beta, xhat, invstd, *batch_stats, g)
            }
            Op::Concat { xs, axis } => shape::concat_backward(self, xs, *axis, out, g),
            Op::Slice { x, axis, start } => shape::slice_backward(self, *x, *axis, *start, out, g),
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, perm } => shape::permute_backward(self, *x, perm, g),
            Op::Add { a, b } => {
                let mut r = Vec::new();
                if rg(a) {
                    r.push((*a, g.to_vec()));
                }
                if rg(b) {
                    r.push((*b, g.to_vec()));
                }
                r
            }
            Op::Sub { a, b } => {
                let mut r = Vec::new();
                if rg(a) {
                    r.push((*a, g.to_vec()));
                }
                if rg(b) {
                    r.push((*b, g.iter().map(|&v| -v).collect()));
                }
                r
            }
            Op::Mul { a, b } => elementwise::mul_backward(self, *a, *b, g),
            Op::Div { a, b } => elementwise::div_backward(self, *a, *b, g),
            Op::Scale { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::LeakyRelu { x, slope } => elementwise::leaky_relu_backward(self, *x, *slope, g),
            Op::Silu { x } => elementwise::silu_backward(self, *x, g),
            Op::Softmax { x, axis } => elementwise::softmax_backward(*x, *axis, out, g),
            Op::LogSoftmax { x, axis } => elementwise::log_softmax_backward(*x, *axis, out, g),
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::SumAxis { x, axis } => elementwise::sum_axis_backward(self, *x, *axis, g),
            Op::TopKMean { x, picked } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                let share = g[0] / T::of(picked.len() as f64);
                for &p in picked {
                    gx[p] = share;
                }
                vec![(*x, gx)]
            }
        })
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, g: &[T]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}
