use std::cell::RefCell;
use std::fmt;

use super::kernels::{
    broadcast_shape, broadcast_strides, for_each_broadcast, gemm, permute, split_axis,
};
use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Neg,
    Sigmoid,
    Softplus,
    Relu,
    Sqrt,
    Ln,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Biased (divide-by-count) variance.
    Variance,
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Sigmoid pulls back `g·σ` instead of `g·σ(1-σ)`.
    SigmoidBackward,
}

/// Backward rule for a fused operation whose forward value is computed
/// outside the tape. Returns one gradient buffer per input, each with the
/// input's element count.
pub trait CustomBackward: fmt::Debug {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, usize),
    Affine {
        input: usize,
        mul: f64,
    },
    AddScalar(usize),
    Binary(BinaryOp, usize, usize),
    MatMul(usize, usize),
    Reduce {
        op: ReduceOp,
        input: usize,
        axis: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    LogSoftmax {
        input: usize,
        axis: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
    },
    Reshape(usize),
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        input: usize,
        axis: usize,
        indices: Vec<usize>,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward pass.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
    checked: bool,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("checked", &self.checked)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            checked: false,
            fault: None,
        }
    }

    /// A tape that rejects non-finite results and division by exact zero.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        self.push_tensor(Tensor::from_parts(shape, data), op, requires_grad)
    }

    fn push_tensor(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if self.checked {
            if let Some((index, &value)) = value
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
            {
                return Err(TensorError::NonFinite { index, value });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records a fused operation. `output` must already hold the forward
    /// value; `rule` supplies its vector-Jacobian product.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var<'t>> {
        for v in inputs {
            v.check_tape(self)?;
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        self.push_tensor(output, Op::Custom { inputs: ids, rule }, requires_grad)
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    /// Gradient of the last backward root with respect to `var`, when `var`
    /// is a differentiable leaf.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g.get(var.id).cloned().flatten())
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }

    /// Reverse sweep from a scalar root. Fills the gradient of every
    /// differentiable leaf that the root depends on.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        root.check_tape(self)?;
        if self.grads.borrow().is_some() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            pull_back(&nodes, node, &g, &mut grads, self.fault);
        }
        *self.grads.borrow_mut() = Some(leaf_grads);
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn pull_back(
    nodes: &[Node],
    node: &Node,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    fault: Option<Fault>,
) {
    let out = &node.value;
    let needs = |id: usize| nodes[id].requires_grad;
    let single_input = match &node.op {
        Op::Unary(_, i)
        | Op::Affine { input: i, .. }
        | Op::AddScalar(i)
        | Op::Reduce { input: i, .. }
        | Op::Softmax { input: i, .. }
        | Op::LogSoftmax { input: i, .. }
        | Op::Reshape(i)
        | Op::Permute { input: i, .. }
        | Op::IndexSelect { input: i, .. }
        | Op::Narrow { input: i, .. } => Some(*i),
        _ => None,
    };
    if single_input.is_some_and(|i| !needs(i)) {
        return;
    }
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Unary(op, input) => {
            let x = nodes[*input].value.data();
            let y = out.data();
            let gx = grad_slot(grads, *input, x.len());
            for i in 0..x.len() {
                let d = match op {
                    UnaryOp::Exp => y[i],
                    UnaryOp::Neg => -1.0,
                    UnaryOp::Sigmoid => match fault {
                        Some(Fault::SigmoidBackward) => y[i],
                        None => y[i] * (1.0 - y[i]),
                    },
                    UnaryOp::Softplus => sigmoid(x[i]),
                    UnaryOp::Relu => {
                        if x[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryOp::Sqrt => 0.5 / y[i],
                    UnaryOp::Ln => 1.0 / x[i],
                };
                gx[i] += g[i] * d;
            }
        }
        Op::Affine { input, mul } => {
            let gx = grad_slot(grads, *input, g.len());
            for (a, b) in gx.iter_mut().zip(g) {
                *a += mul * b;
            }
        }
        Op::AddScalar(input) => {
            let gx = grad_slot(grads, *input, g.len());
            for (a, b) in gx.iter_mut().zip(g) {
                *a += b;
            }
        }
        Op::Binary(op, ia, ib) => {
            let a = &nodes[*ia].value;
            let b = &nodes[*ib].value;
            let sa = broadcast_strides(a.shape(), out.shape());
            let sb = broadcast_strides(b.shape(), out.shape());
            let (av, bv) = (a.data(), b.data());
            let same = a.shape() == b.shape();
            if needs(*ia) {
                let gs = grad_slot(grads, *ia, av.len());
                match op {
                    BinaryOp::Add | BinaryOp::Sub if same => {
                        gs.iter_mut().zip(g).for_each(|(x, d)| *x += d)
                    }
                    BinaryOp::Mul if same => (0..g.len()).for_each(|o| gs[o] += g[o] * bv[o]),
                    BinaryOp::Add | BinaryOp::Sub => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, i, _| gs[i] += g[o])
                    }
                    BinaryOp::Mul => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| gs[i] += g[o] * bv[j])
                    }
                    BinaryOp::Div => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| gs[i] += g[o] / bv[j])
                    }
                }
            }
            if needs(*ib) {
                let gs = grad_slot(grads, *ib, bv.len());
                match op {
                    BinaryOp::Add if same => gs.iter_mut().zip(g).for_each(|(x, d)| *x += d),
                    BinaryOp::Sub if same => gs.iter_mut().zip(g).for_each(|(x, d)| *x -= d),
                    BinaryOp::Mul if same => (0..g.len()).for_each(|o| gs[o] += g[o] * av[o]),
                    BinaryOp::Add => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, _, j| gs[j] += g[o])
                    }
                    BinaryOp::Sub => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, _, j| gs[j] -= g[o])
                    }
                    BinaryOp::Mul => {
                        for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| gs[j] += g[o] * av[i])
                    }
                    BinaryOp::Div => for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| {
                        gs[j] -= g[o] * av[i] / (bv[j] * bv[j])
                    }),
                }
            }
        }
        Op::MatMul(ia, ib) => {
            let a = &nodes[*ia].value;
            let b = &nodes[*ib].value;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs(*ia) {
                let ga = grad_slot(grads, *ia, m * k);
                gemm(m, n, k, g, false, b.data(), true, ga, true);
            }
            if needs(*ib) {
                let gb = grad_slot(grads, *ib, k * n);
                gemm(k, m, n, a.data(), true, g, false, gb, true);
            }
        }
        Op::Reduce { op, input, axis } => {
            let x = &nodes[*input].value;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let gx = grad_slot(grads, *input, x.numel());
            reduce_backward(*op, x.data(), g, gx, outer, n, inner);
        }
        Op::Softmax { input, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let gx = grad_slot(grads, *input, out.numel());
            softmax_backward(out.data(), g, gx, outer, n, inner, false);
        }
        Op::LogSoftmax { input, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let gx = grad_slot(grads, *input, out.numel());
            softmax_backward(out.data(), g, gx, outer, n, inner, true);
        }
        Op::Conv1d { x, w } => {
            let xt = &nodes[*x].value;
            let wt = &nodes[*w].value;
            let (batch, c_in, len) = conv_dims(xt.shape());
            let (c_out, k) = (wt.shape()[0], wt.shape()[2]);
            let pad = (k - 1) / 2;
            let (xv, wv) = (xt.data(), wt.data());
            if needs(*x) {
                let gx = grad_slot(grads, *x, xv.len());
                for bi in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(bi * c_out + o) * len..][..len];
                        for i in 0..c_in {
                            let xrow = &mut gx[(bi * c_in + i) * len..][..len];
                            for j in 0..k {
                                let wij = wv[(o * c_in + i) * k + j];
                                for t in 0..len {
                                    let s = t + j;
                                    if s >= pad && s - pad < len {
                                        xrow[s - pad] += grow[t] * wij;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if needs(*w) {
                let gw = grad_slot(grads, *w, wv.len());
                for bi in 0..batch {
                    for o in 0..c_out {
                        let grow = &g[(bi * c_out + o) * len..][..len];
                        for i in 0..c_in {
                            let xrow = &xv[(bi * c_in + i) * len..][..len];
                            for j in 0..k {
                                let mut acc = 0.0;
                                for t in 0..len {
                                    let s = t + j;
                                    if s >= pad && s - pad < len {
                                        acc += grow[t] * xrow[s - pad];
                                    }
                                }
                                gw[(o * c_in + i) * k + j] += acc;
                            }
                        }
                    }
                }
            }
        }
        Op::Reshape(input) => {
            let gx = grad_slot(grads, *input, g.len());
            for (a, b) in gx.iter_mut().zip(g) {
                *a += b;
            }
        }
        Op::Permute { input, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = permute(g, out.shape(), &inverse);
            let gx = grad_slot(grads, *input, g.len());
            for (a, b) in gx.iter_mut().zip(&back) {
                *a += b;
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &id in inputs {
                let n = nodes[id].value.shape()[*axis];
                if needs(id) {
                    let gx = grad_slot(grads, id, outer * n * inner);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..n * inner];
                        for (a, b) in gx[o * n * inner..][..n * inner].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::IndexSelect {
            input,
            axis,
            indices,
        } => {
            let x = &nodes[*input].value;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let gx = grad_slot(grads, *input, x.numel());
            let m = indices.len();
            for o in 0..outer {
                for (j, &src) in indices.iter().enumerate() {
                    let from = &g[(o * m + j) * inner..][..inner];
                    for (a, b) in gx[(o * n + src) * inner..][..inner].iter_mut().zip(from) {
                        *a += b;
                    }
                }
            }
        }
        Op::Narrow { input, axis, start } => {
            let x = &nodes[*input].value;
            let (outer, n, inner) = split_axis(x.shape(), *axis);
            let len = out.shape()[*axis];
            let gx = grad_slot(grads, *input, x.numel());
            for o in 0..outer {
                let from = &g[o * len * inner..][..len * inner];
                for (a, b) in gx[(o * n + start) * inner..][..len * inner]
                    .iter_mut()
                    .zip(from)
                {
                    *a += b;
                }
            }
        }
        Op::Custom { inputs, rule } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
            let pulled = rule.backward(&values, out, g);
            debug_assert_eq!(pulled.len(), inputs.len());
            for (&id, gi) in inputs.iter().zip(pulled) {
                if !needs(id) {
                    continue;
                }
                debug_assert_eq!(gi.len(), nodes[id].value.numel());
                let slot = grad_slot(grads, id, gi.len());
                for (a, b) in slot.iter_mut().zip(&gi) {
                    *a += b;
                }
            }
        }
    }
}

fn conv_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [c, l] => (1, *c, *l),
        [b, c, l] => (*b, *c, *l),
        _ => unreachable!("conv1d input rank checked at construction"),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if std::ptr::eq(self.tape, tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn axis_check(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                rank: shape.len(),
            });
        }
        Ok(shape)
    }

    // ---- elementwise -------------------------------------------------

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let (shape, data) = self.with_value(|x| {
            let f: fn(f64) -> f64 = match op {
                UnaryOp::Exp => f64::exp,
                UnaryOp::Neg => |v| -v,
                UnaryOp::Sigmoid => sigmoid,
                UnaryOp::Softplus => softplus,
                UnaryOp::Relu => |v| v.max(0.0),
                UnaryOp::Sqrt => f64::sqrt,
                UnaryOp::Ln => f64::ln,
            };
            (x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        });
        self.tape
            .push(shape, data, Op::Unary(op, self.id), self.requires_grad())
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Ln)
    }

    /// `x · σ(x)`
    pub fn silu(self) -> Result<Var<'t>> {
        self.mul(self.sigmoid()?)
    }

    pub fn scale(self, mul: f64) -> Result<Var<'t>> {
        let (shape, data) = self.with_value(|x| {
            (
                x.shape().to_vec(),
                x.data().iter().map(|v| v * mul).collect(),
            )
        });
        self.tape.push(
            shape,
            data,
            Op::Affine {
                input: self.id,
                mul,
            },
            self.requires_grad(),
        )
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let (shape, data) =
            self.with_value(|x| (x.shape().to_vec(), x.data().iter().map(|v| v + c).collect()));
        self.tape
            .push(shape, data, Op::AddScalar(self.id), self.requires_grad())
    }

    pub fn binary(self, op: BinaryOp, rhs: Var<'t>) -> Result<Var<'t>> {
        rhs.check_tape(self.tape)?;
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[rhs.id].value;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })?;
        if op == BinaryOp::Div && self.tape.checked && b.data().contains(&0.0) {
            return Err(TensorError::DivByZero);
        }
        let data = match op {
            BinaryOp::Add => zip_broadcast(a, b, &out_shape, |x, y| x + y),
            BinaryOp::Sub => zip_broadcast(a, b, &out_shape, |x, y| x - y),
            BinaryOp::Mul => zip_broadcast(a, b, &out_shape, |x, y| x * y),
            BinaryOp::Div => zip_broadcast(a, b, &out_shape, |x, y| x / y),
        };
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.tape
            .push(out_shape, data, Op::Binary(op, self.id, rhs.id), rg)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, rhs)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        rhs.check_tape(self.tape)?;
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[rhs.id].value;
        let (m, k, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut data, false);
        let rg = nodes[self.id].requires_grad || nodes[rhs.id].requires_grad;
        drop(nodes);
        self.tape
            .push(vec![m, n], data, Op::MatMul(self.id, rhs.id), rg)
    }

    /// 1-D cross-correlation over the last axis with zero padding that keeps
    /// the length. `self` is `[c_in, L]` or `[batch, c_in, L]`, `w` is
    /// `[c_out, c_in, k]` with odd `k`.
    pub fn conv1d(self, w: Var<'t>) -> Result<Var<'t>> {
        w.check_tape(self.tape)?;
        let nodes = self.tape.nodes.borrow();
        let x = &nodes[self.id].value;
        let wt = &nodes[w.id].value;
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        };
        if !matches!(x.rank(), 2 | 3) || wt.rank() != 3 {
            return Err(mismatch());
        }
        let (batch, c_in, len) = conv_dims(x.shape());
        let (c_out, k) = (wt.shape()[0], wt.shape()[2]);
        if wt.shape()[1] != c_in {
            return Err(mismatch());
        }
        if k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!("kernel size {k} is even"),
            });
        }
        let pad = (k - 1) / 2;
        let (xv, wv) = (x.data(), wt.data());
        let mut data = vec![0.0; batch * c_out * len];
        for bi in 0..batch {
            for o in 0..c_out {
                let orow = &mut data[(bi * c_out + o) * len..][..len];
                for i in 0..c_in {
                    let xrow = &xv[(bi * c_in + i) * len..][..len];
                    for j in 0..k {
                        let wij = wv[(o * c_in + i) * k + j];
                        for (t, out) in orow.iter_mut().enumerate() {
                            let s = t + j;
                            if s >= pad && s - pad < len {
                                *out += wij * xrow[s - pad];
                            }
                        }
                    }
                }
            }
        }
        let shape = if x.rank() == 2 {
            vec![c_out, len]
        } else {
            vec![batch, c_out, len]
        };
        let rg = nodes[self.id].requires_grad || nodes[w.id].requires_grad;
        drop(nodes);
        self.tape.push(
            shape,
            data,
            Op::Conv1d {
                x: self.id,
                w: w.id,
            },
            rg,
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn reduce(self, op: ReduceOp, axis: usize, keep: bool) -> Result<Var<'t>> {
        let shape = self.axis_check("reduce", axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.with_value(|x| reduce_forward(op, x.data(), outer, n, inner));
        let mut out_shape = shape;
        if keep {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.tape.push(
            out_shape,
            data,
            Op::Reduce {
                op,
                input: self.id,
                axis,
            },
            self.requires_grad(),
        )
    }

    pub fn sum(self, axis: usize, keep: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, axis, keep)
    }

    pub fn mean(self, axis: usize, keep: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, axis, keep)
    }

    pub fn max(self, axis: usize, keep: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Max, axis, keep)
    }

    pub fn variance(self, axis: usize, keep: bool) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Variance, axis, keep)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.with_value(|x| x.numel());
        self.reshape([n])?.sum(0, false)
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let n = self.with_value(|x| x.numel());
        self.reshape([n])?.mean(0, false)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let shape = self.axis_check("softmax", axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.with_value(|x| softmax_forward(x.data(), outer, n, inner, log));
        let op = if log {
            Op::LogSoftmax {
                input: self.id,
                axis,
            }
        } else {
            Op::Softmax {
                input: self.id,
                axis,
            }
        };
        self.tape.push(shape, data, op, self.requires_grad())
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.with_value(|x| x.reshape(shape))?;
        self.tape
            .push_tensor(value, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let data = self.with_value(|x| permute(x.data(), x.shape(), perm));
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.tape.push(
            out_shape,
            data,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        )
    }

    /// Swaps the two axes of a matrix.
    pub fn t(self) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape;
        let base = first.axis_check("concat", axis)?;
        let mut total = 0;
        for p in parts {
            p.check_tape(tape)?;
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base;
        out_shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        let nodes = tape.nodes.borrow();
        for p in parts {
            let v = &nodes[p.id].value;
            let n = v.shape()[axis];
            for o in 0..outer {
                data[(o * total + offset) * inner..][..n * inner]
                    .copy_from_slice(&v.data()[o * n * inner..][..n * inner]);
            }
            offset += n;
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        tape.push(
            out_shape,
            data,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            rg,
        )
    }

    /// Gathers slices along `axis`; indices may repeat.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.axis_check("index_select", axis)?;
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("index {bad} out of range for extent {}", shape[axis]),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let m = indices.len();
        let data = self.with_value(|x| {
            let xv = x.data();
            let mut out = Vec::with_capacity(outer * m * inner);
            for o in 0..outer {
                for &src in indices {
                    out.extend_from_slice(&xv[(o * n + src) * inner..][..inner]);
                }
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = m;
        self.tape.push(
            out_shape,
            data,
            Op::IndexSelect {
                input: self.id,
                axis,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.axis_check("narrow", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {start}..{} out of extent {}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.with_value(|x| {
            let xv = x.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&xv[(o * n + start) * inner..][..len * inner]);
            }
            out
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.tape.push(
            out_shape,
            data,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }
}

fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let (av, bv) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, &sa, &sb, |_, i, j| data.push(f(av[i], bv[j])));
    data
}

/// `[outer, n, inner]` → `[outer, inner]`, walking contiguous rows.
fn reduce_forward(op: ReduceOp, xv: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let acc = &mut out[o * inner..][..inner];
        let row = |j: usize| &xv[(o * n + j) * inner..][..inner];
        match op {
            ReduceOp::Sum | ReduceOp::Mean | ReduceOp::Variance => {
                for j in 0..n {
                    acc.iter_mut().zip(row(j)).for_each(|(a, x)| *a += x);
                }
                if op != ReduceOp::Sum {
                    acc.iter_mut().for_each(|a| *a /= n as f64);
                }
                if op == ReduceOp::Variance {
                    let mut var = vec![0.0; inner];
                    for j in 0..n {
                        for ((v, x), m) in var.iter_mut().zip(row(j)).zip(acc.iter()) {
                            *v += (x - m) * (x - m);
                        }
                    }
                    acc.iter_mut()
                        .zip(&var)
                        .for_each(|(a, v)| *a = v / n as f64);
                }
            }
            ReduceOp::Max => {
                acc.fill(f64::NEG_INFINITY);
                for j in 0..n {
                    acc.iter_mut().zip(row(j)).for_each(|(a, &x)| *a = a.max(x));
                }
            }
        }
    }
    out
}

fn reduce_backward(
    op: ReduceOp,
    xv: &[f64],
    g: &[f64],
    gx: &mut [f64],
    outer: usize,
    n: usize,
    inner: usize,
) {
    let nf = n as f64;
    for o in 0..outer {
        let gr = &g[o * inner..][..inner];
        let row = |j: usize| (o * n + j) * inner;
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let s = if op == ReduceOp::Sum { 1.0 } else { 1.0 / nf };
                for j in 0..n {
                    gx[row(j)..][..inner]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, b)| *a += s * b);
                }
            }
            ReduceOp::Max => {
                // The first maximal entry receives the gradient.
                let mut best = vec![0usize; inner];
                for j in 1..n {
                    for i in 0..inner {
                        if xv[row(j) + i] > xv[row(best[i]) + i] {
                            best[i] = j;
                        }
                    }
                }
                for i in 0..inner {
                    gx[row(best[i]) + i] += gr[i];
                }
            }
            ReduceOp::Variance => {
                let mut mean = vec![0.0; inner];
                for j in 0..n {
                    mean.iter_mut()
                        .zip(&xv[row(j)..][..inner])
                        .for_each(|(m, x)| *m += x / nf);
                }
                for j in 0..n {
                    let (xr, gxr) = (&xv[row(j)..][..inner], &mut gx[row(j)..][..inner]);
                    for i in 0..inner {
                        gxr[i] += gr[i] * 2.0 * (xr[i] - mean[i]) / nf;
                    }
                }
            }
        }
    }
}

fn softmax_forward(xv: &[f64], outer: usize, n: usize, inner: usize, log: bool) -> Vec<f64> {
    let mut out = vec![0.0; xv.len()];
    let mut max = vec![0.0; inner];
    let mut total = vec![0.0; inner];
    for o in 0..outer {
        let base = o * n * inner;
        max.fill(f64::NEG_INFINITY);
        total.fill(0.0);
        for j in 0..n {
            max.iter_mut()
                .zip(&xv[base + j * inner..][..inner])
                .for_each(|(m, &x)| *m = m.max(x));
        }
        for j in 0..n {
            let at = base + j * inner;
            for i in 0..inner {
                let e = (xv[at + i] - max[i]).exp();
                out[at + i] = e;
                total[i] += e;
            }
        }
        for j in 0..n {
            let at = base + j * inner;
            for i in 0..inner {
                out[at + i] = if log {
                    xv[at + i] - max[i] - total[i].ln()
                } else {
                    out[at + i] / total[i]
                };
            }
        }
    }
    out
}

fn softmax_backward(
    y: &[f64],
    g: &[f64],
    gx: &mut [f64],
    outer: usize,
    n: usize,
    inner: usize,
    log: bool,
) {
    let mut acc = vec![0.0; inner];
    for o in 0..outer {
        let base = o * n * inner;
        acc.fill(0.0);
        for j in 0..n {
            let at = base + j * inner;
            for i in 0..inner {
                acc[i] += if log {
                    g[at + i]
                } else {
                    g[at + i] * y[at + i]
                };
            }
        }
        for j in 0..n {
            let at = base + j * inner;
            for i in 0..inner {
                gx[at + i] += if log {
                    g[at + i] - y[at + i].exp() * acc[i]
                } else {
                    y[at + i] * (g[at + i] - acc[i])
                };
            }
        }
    }
}
