//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record once in reverse and returns a
//! [`Gradients`] store. A tape is single-threaded; parallel workers each build
//! their own tape over shared read-only parameters.
//!
//! ```
//! use egoshift::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
//! let x = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
//! let loss = tape.sum(tape.mul(w, x).unwrap());
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[3.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::ops::Range;
use std::rc::Rc;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Conv2d,
    Linear,
    MatMul,
    Expand,
    Reshape,
    Narrow,
    Concat,
    TemporalShift,
    Softmax,
    LogSoftmax,
    SumAxis,
    SumAll,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 23] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Conv2d,
        OpKind::Linear,
        OpKind::MatMul,
        OpKind::Expand,
        OpKind::Reshape,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::TemporalShift,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::SumAxis,
        OpKind::SumAll,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Conv2d => "conv2d",
            OpKind::Linear => "linear",
            OpKind::MatMul => "matmul",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::TemporalShift => "temporal_shift",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::SumAxis => "sum_axis",
            OpKind::SumAll => "sum_all",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    Expand(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    TemporalShift {
        input: Var,
        fw: Range<usize>,
        bw: Range<usize>,
    },
    Softmax {
        input: Var,
        row: usize,
    },
    LogSoftmax {
        input: Var,
        row: usize,
    },
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Ln(..) => OpKind::Ln,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Expand(..) => OpKind::Expand,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::TemporalShift { .. } => OpKind::TemporalShift,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll(..) => OpKind::SumAll,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    fault: Cell<Option<OpKind>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded value.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`, or zeros when `v` is not on the loss path.
    pub fn get(&self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    /// Number of recorded operations whose adjoint was evaluated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    /// Test hook: perturbs the adjoint of every `kind` operation so that
    /// gradient checks can demonstrate they catch a wrong derivative.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<S>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op<S>, name: &str, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!(
                "{}: operand shapes {:?} and {:?} differ",
                name,
                va.shape(),
                vb.shape()
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&self, a: Var, s: S) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&self, a: Var, s: S) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn conv2d(&self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let value = kernels::conv2d(&x, &w, b.as_deref(), geom)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn linear(&self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let b = bias.map(|b| self.value(b));
        let value = kernels::linear(&x, &w, b.as_deref())?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(&self.value(a), &self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Explicit broadcast: every size-1 dim of `a` may grow to the target size.
    pub fn expand(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = kernels::expand(&self.value(a), shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Expand(a), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(a)).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::narrow(&self.value(a), axis, start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Narrow { input: a, axis, start }, rg))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = inputs.iter().map(|&v| self.value(v)).collect();
        let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
        let value = kernels::concat(&refs, axis)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Forward/backward time shift of channel ranges of a B×T×C×H×W value.
    pub fn temporal_shift(&self, a: Var, fw: Range<usize>, bw: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 5 {
            return Err(shape_err!("temporal_shift expects B×T×C×H×W, got {:?}", x.shape()));
        }
        let c = x.dim(2);
        if fw.end > c || bw.end > c {
            return Err(shape_err!(
                "temporal_shift channel ranges {:?}/{:?} exceed C = {}",
                fw,
                bw,
                c
            ));
        }
        let data = kernels::temporal_shift(x.data(), x.shape(), fw.clone(), bw.clone());
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::TemporalShift { input: a, fw, bw }, rg))
    }

    /// Softmax over the trailing `row` elements (consecutive blocks of the buffer).
    pub fn softmax(&self, a: Var, row: usize) -> Result<Var> {
        let x = self.value(a);
        if row == 0 || !x.len().is_multiple_of(row) {
            return Err(shape_err!("softmax row {} does not divide {:?}", row, x.shape()));
        }
        let value = Tensor::new(x.shape().to_vec(), kernels::softmax_rows(x.data(), row))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, row }, rg))
    }

    pub fn log_softmax(&self, a: Var, row: usize) -> Result<Var> {
        let x = self.value(a);
        if row == 0 || !x.len().is_multiple_of(row) {
            return Err(shape_err!("log_softmax row {} does not divide {:?}", row, x.shape()));
        }
        let value = Tensor::new(x.shape().to_vec(), kernels::log_softmax_rows(x.data(), row))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax { input: a, row }, rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(shape_err!("sum_axis: axis {} out of range for {:?}", axis, x.shape()));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if n == 0 {
            return Err(shape_err!("reduction over empty axis {} of {:?}", axis, x.shape()));
        }
        let src = x.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SumAxis { input: a, axis }, rg))
    }

    /// Arithmetic mean over `axis`, removing it from the shape.
    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.value(a).shape().get(axis).copied().unwrap_or(0);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, S::one() / S::lit(n as f64)))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Cross-entropy of a 1-D logit vector against a class index.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.ndim() != 1 {
            return Err(shape_err!("cross_entropy expects a logit vector, got {:?}", x.shape()));
        }
        if label >= x.len() {
            return Err(invalid!("label {} out of range for {} classes", label, x.len()));
        }
        let lsm = kernels::log_softmax_rows(x.data(), x.len());
        let value = Tensor::scalar(-lsm[label]);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, label }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let fault = self.fault.get();
        let mut visited = 0;

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited += 1;
            let mut contribs: Vec<(Var, Vec<S>)> = Vec::new();
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.as_ref();
            let y = node.value.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.clone()));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g.iter().map(|&x| -x).collect()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if needs(*a) {
                        contribs.push((*a, g.iter().zip(vb).map(|(&g, &b)| g * b).collect()));
                    }
                    if needs(*b) {
                        contribs.push((*b, g.iter().zip(va).map(|(&g, &a)| g * a).collect()));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, g.iter().map(|&x| x * *s).collect())),
                Op::AddScalar(a) => contribs.push((*a, g.clone())),
                Op::Tanh(a) => contribs.push((
                    *a,
                    g.iter().zip(y).map(|(&g, &y)| g * (S::one() - y * y)).collect(),
                )),
                Op::Sigmoid(a) => contribs.push((
                    *a,
                    g.iter().zip(y).map(|(&g, &y)| g * y * (S::one() - y)).collect(),
                )),
                Op::Relu(a) => {
                    let x = val(*a).data();
                    contribs.push((
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                            .collect(),
                    ));
                }
                Op::Exp(a) => contribs.push((*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect())),
                Op::Ln(a) => {
                    let x = val(*a).data();
                    contribs.push((*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect()));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_b = bias.is_some_and(needs);
                    let cg = kernels::conv2d_backward(
                        val(*input),
                        val(*weight),
                        &g,
                        *geom,
                        (needs(*input), needs(*weight), need_b),
                    )?;
                    if let Some(gx) = cg.input {
                        contribs.push((*input, gx));
                    }
                    if let Some(gw) = cg.weight {
                        contribs.push((*weight, gw));
                    }
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        contribs.push((*b, gb));
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (x, w) = (val(*input), val(*weight));
                    let (bsz, d, k) = (x.dim(0), x.dim(1), w.dim(0));
                    if needs(*input) {
                        contribs.push((*input, kernels::matmul_raw(&g, w.data(), bsz, k, d)));
                    }
                    if needs(*weight) {
                        let gt = kernels::transpose_raw(&g, bsz, k);
                        contribs.push((*weight, kernels::matmul_raw(&gt, x.data(), k, bsz, d)));
                    }
                    if let Some(b) = bias.filter(|b| needs(*b)) {
                        let mut gb = vec![S::zero(); k];
                        for row in g.chunks_exact(k) {
                            for (acc, &v) in gb.iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                        contribs.push((b, gb));
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, nn) = (va.dim(0), va.dim(1), vb.dim(1));
                    if needs(*a) {
                        let bt = kernels::transpose_raw(vb.data(), k, nn);
                        contribs.push((*a, kernels::matmul_raw(&g, &bt, m, nn, k)));
                    }
                    if needs(*b) {
                        let at = kernels::transpose_raw(va.data(), m, k);
                        contribs.push((*b, kernels::matmul_raw(&at, &g, k, m, nn)));
                    }
                }
                Op::Expand(a) => contribs.push((
                    *a,
                    kernels::expand_backward(&g, val(*a).shape(), node.value.shape()),
                )),
                Op::Reshape(a) => contribs.push((*a, g.clone())),
                Op::Narrow { input, axis, start } => {
                    let src_shape = val(*input).shape();
                    let (outer, n_src, inner) = split_axis(src_shape, *axis);
                    let len = node.value.dim(*axis);
                    let mut gx = vec![S::zero(); val(*input).len()];
                    for o in 0..outer {
                        let dst = (o * n_src + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    contribs.push((*input, gx));
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for v in inputs {
                        let len = val(*v).dim(*axis);
                        if needs(*v) {
                            let mut gx = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                gx.extend_from_slice(&g[s..s + len * inner]);
                            }
                            contribs.push((*v, gx));
                        }
                        offset += len;
                    }
                }
                Op::TemporalShift { input, fw, bw } => {
                    // The adjoint of a forward shift is a backward shift and vice versa.
                    contribs.push((
                        *input,
                        kernels::temporal_shift(&g, node.value.shape(), bw.clone(), fw.clone()),
                    ));
                }
                Op::Softmax { input, row } => {
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks_exact(*row).zip(y.chunks_exact(*row)) {
                        let dot = gr.iter().zip(yr).fold(S::zero(), |a, (&g, &y)| a + g * y);
                        gx.extend(gr.iter().zip(yr).map(|(&g, &y)| y * (g - dot)));
                    }
                    contribs.push((*input, gx));
                }
                Op::LogSoftmax { input, row } => {
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks_exact(*row).zip(y.chunks_exact(*row)) {
                        let total = gr.iter().fold(S::zero(), |a, &g| a + g);
                        gx.extend(gr.iter().zip(yr).map(|(&g, &y)| g - y.exp() * total));
                    }
                    contribs.push((*input, gx));
                }
                Op::SumAxis { input, axis } => {
                    let (outer, n_ax, inner) = split_axis(val(*input).shape(), *axis);
                    let mut gx = Vec::with_capacity(outer * n_ax * inner);
                    for o in 0..outer {
                        for _ in 0..n_ax {
                            gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    contribs.push((*input, gx));
                }
                Op::SumAll(a) => contribs.push((*a, vec![g[0]; val(*a).len()])),
                Op::CrossEntropy { logits, label } => {
                    let x = val(*logits).data();
                    let mut p = kernels::softmax_rows(x, x.len());
                    p[*label] = p[*label] - S::one();
                    contribs.push((*logits, p.into_iter().map(|v| v * g[0]).collect()));
                }
            }

            let perturb = fault == Some(node.op.kind());
            for (v, mut c) in contribs {
                if !needs(v) {
                    continue;
                }
                if perturb {
                    for x in &mut c {
                        *x = *x * S::lit(1.01);
                    }
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &x) in acc.iter_mut().zip(&c) {
                            *a = *a + x;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| g.map(|g| Tensor::new(s.clone(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn elementwise_closed_forms() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([3]));
        assert_eq!(tape.value(tape.tanh(z)).data(), &[0.0; 3]);
        assert_eq!(tape.value(tape.sigmoid(z)).data(), &[0.5; 3]);
        let x = tape.constant(vec(&[1.5, -2.0, 3.0]));
        let ones = tape.constant(Tensor::ones([3]));
        assert_eq!(*tape.value(tape.mul(x, ones).unwrap()), *tape.value(x));
        let big = tape.constant(vec(&[40.0]));
        assert!((tape.value(tape.tanh(big)).item() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn weighted_sum_gradient_is_input() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(vec(&[0.3, -0.7, 2.0]));
        let x = tape.constant(vec(&[1.0, 2.0, 3.0]));
        let loss = tape.sum(tape.mul(w, x).unwrap());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn off_path_parameter_has_zero_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(vec(&[1.0, 2.0]));
        let unused = tape.leaf(vec(&[5.0, 6.0]));
        let _dangling = tape.tanh(unused);
        let loss = tape.sum(tape.tanh(w));
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(vec(&[1.0, 2.0]));
        assert!(tape.backward(tape.tanh(w)).is_err());
    }

    #[test]
    fn each_recorded_op_visited_once() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(vec(&[1.0, 2.0]));
        let a = tape.tanh(w);
        let b = tape.mul(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        // tanh, mul, add, sum
        assert_eq!(grads.visited(), 4);
        let t = 1f64.tanh();
        let expect = (2.0 * t + 1.0) * (1.0 - t * t);
        assert!((grads.get(w).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(vec(&[0.0, 3f64.ln()]));
        let s = tape.value(tape.softmax(x, 2).unwrap());
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let x = tape.constant(vec(&[0.1, -2.0, 0.7, 1.3]));
        let shifted = tape.add_scalar(x, 5.0);
        let a = tape.value(tape.softmax(x, 4).unwrap());
        let b = tape.value(tape.softmax(shifted, 4).unwrap());
        assert!(a.max_abs_diff(&b) <= 1e-15);
        assert!((a.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fault_injection_changes_adjoint() {
        let tape = Tape::<f64>::new();
        tape.inject_adjoint_fault(Some(OpKind::Tanh));
        let w = tape.leaf(vec(&[0.0]));
        let loss = tape.sum(tape.tanh(w));
        let g = tape.backward(loss).unwrap().get(w).item();
        assert!((g - 1.01).abs() < 1e-12);
    }
}
