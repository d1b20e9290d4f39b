//! Minimal reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! Design notes:
//! - A [`Tape`] records one computation; [`Tensor`] handles index into it.
//!   Tapes are cheap to create and are rebuilt every training/optimization
//!   step; batching is done by evaluating independent per-sample tapes.
//! - Values are `Rc<ArrayD<f64>>`, so sharing weights across tapes copies a
//!   pointer, not the data.
//! - Every operation has a fixed, sequential evaluation order. Given the same
//!   inputs the same bits come out, which is what the reproducibility tests
//!   rely on.
//! - Engine misuse (shape mismatch, non-scalar loss) panics; user-facing
//!   validation happens in the modules that build tapes.
//!
//! Convolution, pooling, and bilinear sampling kernels live in [`conv`].

pub mod conv;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn};

use conv::PadMode;

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<Node>,
}

struct Node {
    value: Arc<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone)]
enum Op {
    Leaf,
    // elementwise, same shape
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    // broadcast with a scalar tensor (shape [1])
    AddS(usize, usize),
    MulS(usize, usize),
    // compile-time constants
    AddC(usize, #[allow(dead_code)] f64),
    MulC(usize, f64),
    PowC(usize, f64),
    MinC(usize, f64),
    MaxC(usize, f64),
    // a^e with tensor scalar exponent
    PowTS { a: usize, e: usize },
    // unary
    Neg(usize),
    Abs(usize),
    Sqr(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, f64),
    // reductions
    SumAll(usize),
    MeanAll(usize),
    SumButAxis(usize, usize),
    // shape
    Reshape(usize),
    ConcatC(Vec<usize>),
    SliceC { a: usize, start: usize, len: usize },
    // broadcasting multiplies
    MulAxis { a: usize, v: usize, axis: usize },
    MulBcastC { a: usize, s: usize },
    // linear algebra
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    // convolution / resampling
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: PadMode },
    AvgPool2 { x: usize, k: usize },
    Upsample2(usize),
    BilinearWrap { img: usize, gu: usize, gv: usize },
}

/// Handle to a tape node. Cloning is cheap; the data lives on the tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a tensor, if it participated in the loss.
    pub fn wrt(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradient as an owned array, zeros if absent.
    pub fn wrt_or_zeros(&self, t: &Tensor) -> ArrayD<f64> {
        match self.wrt(t) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(&t.shape)),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tensor {
        let shape = value.shape().to_vec();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn push_shared(&self, value: Arc<ArrayD<f64>>, op: Op, needs_grad: bool) -> Tensor {
        let shape = value.shape().to_vec();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// A differentiable leaf (a parameter).
    pub fn var(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf (data, coordinate grids, ...).
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf sharing an existing allocation (weights).
    pub fn var_shared(&self, value: Arc<ArrayD<f64>>) -> Tensor {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Constant leaf sharing an existing allocation.
    pub fn constant_shared(&self, value: Arc<ArrayD<f64>>) -> Tensor {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn scalar_var(&self, v: f64) -> Tensor {
        self.var(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    fn value_of(&self, id: usize) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert_eq!(
            loss.numel(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            loss.shape
        );
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(inner.nodes.len());
        grads.resize_with(inner.nodes.len(), || None);
        grads[loss.id] = Some(ArrayD::ones(IxDyn(&loss.shape)));

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !inner.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            backprop_node(&inner.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], id: usize, contrib: ArrayD<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &contrib,
        slot @ None => *slot = Some(contrib),
    }
}

#[allow(clippy::too_many_lines)]
fn backprop_node(nodes: &[Node], id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    let val = |i: usize| -> &ArrayD<f64> { &nodes[i].value };
    let ng = |i: usize| nodes[i].needs_grad;
    match nodes[id].op.clone() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if ng(a) {
                acc(grads, a, g.clone());
            }
            if ng(b) {
                acc(grads, b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if ng(a) {
                acc(grads, a, g.clone());
            }
            if ng(b) {
                acc(grads, b, -g);
            }
        }
        Op::Mul(a, b) => {
            if ng(a) {
                acc(grads, a, g * val(b));
            }
            if ng(b) {
                acc(grads, b, g * val(a));
            }
        }
        Op::Div(a, b) => {
            if ng(a) {
                acc(grads, a, g / val(b));
            }
            if ng(b) {
                let gb = -(g * val(a)) / (val(b) * val(b));
                acc(grads, b, gb);
            }
        }
        Op::AddS(a, s) => {
            if ng(a) {
                acc(grads, a, g.clone());
            }
            if ng(s) {
                acc(grads, s, ArrayD::from_elem(IxDyn(&[1]), g.sum()));
            }
        }
        Op::MulS(a, s) => {
            let sv = val(s)[[0]];
            if ng(a) {
                acc(grads, a, g * sv);
            }
            if ng(s) {
                let dot = g
                    .iter()
                    .zip(val(a).iter())
                    .map(|(x, y)| x * y)
                    .sum::<f64>();
                acc(grads, s, ArrayD::from_elem(IxDyn(&[1]), dot));
            }
        }
        Op::AddC(a, _) => {
            if ng(a) {
                acc(grads, a, g.clone());
            }
        }
        Op::MulC(a, c) => {
            if ng(a) {
                acc(grads, a, g * c);
            }
        }
        Op::PowC(a, c) => {
            if ng(a) {
                let av = val(a);
                let mut out = g.clone();
                out.zip_mut_with(av, |gi, &x| {
                    *gi *= if x == 0.0 { 0.0 } else { c * x.powf(c - 1.0) }
                });
                acc(grads, a, out);
            }
        }
        Op::MinC(a, c) => {
            if ng(a) {
                let av = val(a);
                let mut out = g.clone();
                out.zip_mut_with(av, |gi, &x| {
                    if x >= c {
                        *gi = 0.0;
                    }
                });
                acc(grads, a, out);
            }
        }
        Op::MaxC(a, c) => {
            if ng(a) {
                let av = val(a);
                let mut out = g.clone();
                out.zip_mut_with(av, |gi, &x| {
                    if x <= c {
                        *gi = 0.0;
                    }
                });
                acc(grads, a, out);
            }
        }
        Op::PowTS { a, e } => {
            let ev = val(e)[[0]];
            let av = val(a);
            let ov = val(id);
            if ng(a) {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(av).and(ov).for_each(|gi, &x, &y| {
                    *gi *= if x <= 0.0 { 0.0 } else { ev * y / x };
                });
                acc(grads, a, out);
            }
            if ng(e) {
                let mut dot = 0.0;
                ndarray::Zip::from(g).and(av).and(ov).for_each(|&gi, &x, &y| {
                    if x > 0.0 {
                        dot += gi * y * x.ln();
                    }
                });
                acc(grads, e, ArrayD::from_elem(IxDyn(&[1]), dot));
            }
        }
        Op::Neg(a) => {
            if ng(a) {
                acc(grads, a, -g);
            }
        }
        Op::Abs(a) => {
            if ng(a) {
                let mut out = g.clone();
                out.zip_mut_with(val(a), |gi, &x| {
                    *gi *= if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                acc(grads, a, out);
            }
        }
        Op::Sqr(a) => {
            if ng(a) {
                acc(grads, a, 2.0 * (g * val(a)));
            }
        }
        Op::Sqrt(a) => {
            if ng(a) {
                acc(grads, a, g / (2.0 * val(id)));
            }
        }
        Op::Exp(a) => {
            if ng(a) {
                acc(grads, a, g * val(id));
            }
        }
        Op::Ln(a) => {
            if ng(a) {
                acc(grads, a, g / val(a));
            }
        }
        Op::Sin(a) => {
            if ng(a) {
                acc(grads, a, g * &val(a).mapv(f64::cos));
            }
        }
        Op::Cos(a) => {
            if ng(a) {
                acc(grads, a, -(g * &val(a).mapv(f64::sin)));
            }
        }
        Op::Sigmoid(a) => {
            if ng(a) {
                let ov = val(id);
                acc(grads, a, g * &(ov * &(1.0 - ov)));
            }
        }
        Op::Softplus(a) => {
            if ng(a) {
                let mut out = g.clone();
                out.zip_mut_with(val(a), |gi, &x| *gi *= sigmoid_scalar(x));
                acc(grads, a, out);
            }
        }
        Op::LeakyRelu(a, alpha) => {
            if ng(a) {
                let mut out = g.clone();
                out.zip_mut_with(val(a), |gi, &x| {
                    if x < 0.0 {
                        *gi *= alpha;
                    }
                });
                acc(grads, a, out);
            }
        }
        Op::SumAll(a) => {
            if ng(a) {
                let gd = g[[0]];
                acc(grads, a, ArrayD::from_elem(val(a).raw_dim(), gd));
            }
        }
        Op::MeanAll(a) => {
            if ng(a) {
                let n = val(a).len() as f64;
                let gd = g[[0]] / n;
                acc(grads, a, ArrayD::from_elem(val(a).raw_dim(), gd));
            }
        }
        Op::SumButAxis(a, axis) => {
            if ng(a) {
                let av = val(a);
                let mut out = ArrayD::zeros(av.raw_dim());
                for (j, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
                    lane.fill(g[[j]]);
                }
                acc(grads, a, out);
            }
        }
        Op::Reshape(a) => {
            if ng(a) {
                let reshaped = g
                    .clone()
                    .into_shape_with_order(val(a).raw_dim())
                    .expect("reshape grad");
                acc(grads, a, reshaped);
            }
        }
        Op::ConcatC(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(p).shape()[0];
                if ng(p) {
                    let sl = g.slice_axis(Axis(0), ndarray::Slice::from(offset..offset + len));
                    acc(grads, p, sl.to_owned());
                }
                offset += len;
            }
        }
        Op::SliceC { a, start, len } => {
            if ng(a) {
                let mut out = ArrayD::zeros(val(a).raw_dim());
                out.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(g);
                acc(grads, a, out);
            }
        }
        Op::MulAxis { a, v, axis } => {
            let vv = val(v);
            if ng(a) {
                let mut out = g.clone();
                for (j, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
                    lane.mapv_inplace(|x| x * vv[[j]]);
                }
                acc(grads, a, out);
            }
            if ng(v) {
                let av = val(a);
                let mut gv = ArrayD::zeros(vv.raw_dim());
                for j in 0..vv.shape()[0] {
                    let ga = g.index_axis(Axis(axis), j);
                    let aa = av.index_axis(Axis(axis), j);
                    gv[[j]] = ga.iter().zip(aa.iter()).map(|(x, y)| x * y).sum();
                }
                acc(grads, v, gv);
            }
        }
        Op::MulBcastC { a, s } => {
            let sv = val(s);
            let s2 = sv.index_axis(Axis(0), 0);
            if ng(a) {
                let mut out = g.clone();
                for mut ch in out.axis_iter_mut(Axis(0)) {
                    ch.zip_mut_with(&s2, |gi, &x| *gi *= x);
                }
                acc(grads, a, out);
            }
            if ng(s) {
                let av = val(a);
                let mut gs = ArrayD::zeros(sv.raw_dim());
                {
                    let mut gs0 = gs.index_axis_mut(Axis(0), 0);
                    for c in 0..av.shape()[0] {
                        let gc = g.index_axis(Axis(0), c);
                        let ac = av.index_axis(Axis(0), c);
                        gs0.zip_mut_with(&(&gc * &ac), |o, &x| *o += x);
                    }
                }
                acc(grads, s, gs);
            }
        }
        Op::MatMul(a, b) => {
            let (ga, gb) = conv::matmul_backward(val(a), val(b), g, false);
            if ng(a) {
                acc(grads, a, ga);
            }
            if ng(b) {
                acc(grads, b, gb);
            }
        }
        Op::MatMulNT(a, b) => {
            let (ga, gb) = conv::matmul_backward(val(a), val(b), g, true);
            if ng(a) {
                acc(grads, a, ga);
            }
            if ng(b) {
                acc(grads, b, gb);
            }
        }
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = conv::linear_backward(val(x), val(w), g);
            if ng(x) {
                acc(grads, x, gx);
            }
            if ng(w) {
                acc(grads, w, gw);
            }
            if ng(b) {
                acc(grads, b, gb);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let need_x = ng(x);
            let need_w = ng(w);
            let (gx, gw) = conv::conv2d_backward(val(x), val(w), g, stride, pad, need_x, need_w);
            if need_x {
                acc(grads, x, gx);
            }
            if need_w {
                acc(grads, w, gw);
            }
            if let Some(bid) = b {
                if ng(bid) {
                    acc(grads, bid, conv::conv2d_bias_grad(g));
                }
            }
        }
        Op::AvgPool2 { x, k } => {
            if ng(x) {
                acc(grads, x, conv::avg_pool_backward(val(x).shape(), g, k));
            }
        }
        Op::Upsample2(x) => {
            if ng(x) {
                acc(grads, x, conv::upsample2_backward(g));
            }
        }
        Op::BilinearWrap { img, gu, gv } => {
            let need_img = ng(img);
            let need_grid = ng(gu) || ng(gv);
            let (gi, ggu, ggv) =
                conv::bilinear_wrap_backward(val(img), val(gu), val(gv), g, need_img, need_grid);
            if need_img {
                acc(grads, img, gi);
            }
            if ng(gu) {
                acc(grads, gu, ggu);
            }
            if ng(gv) {
                acc(grads, gv, ggv);
            }
        }
    }
}

#[inline]
fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

macro_rules! same_shape {
    ($a:expr, $b:expr, $what:expr) => {
        assert_eq!(
            $a.shape, $b.shape,
            "{}: shape mismatch {:?} vs {:?}",
            $what, $a.shape, $b.shape
        );
    };
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Shared handle to the value array.
    pub fn value(&self) -> Arc<ArrayD<f64>> {
        self.tape.value_of(self.id)
    }

    /// Value of a [1] tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on shape {:?}", self.shape);
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    fn binary(&self, other: &Tensor, f: impl Fn(usize, usize) -> Op, value: ArrayD<f64>) -> Tensor {
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, f(self.id, other.id), needs)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape!(self, other, "add");
        self.binary(other, Op::Add, &*self.value() + &*other.value())
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape!(self, other, "sub");
        self.binary(other, Op::Sub, &*self.value() - &*other.value())
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape!(self, other, "mul");
        self.binary(other, Op::Mul, &*self.value() * &*other.value())
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        same_shape!(self, other, "div");
        self.binary(other, Op::Div, &*self.value() / &*other.value())
    }

    /// `self + s` where `s` has shape [1].
    pub fn add_scalar_t(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "add_scalar_t expects scalar");
        let sv = s.scalar_value();
        let needs = self.requires_grad() || s.requires_grad();
        self.tape
            .push(&*self.value() + sv, Op::AddS(self.id, s.id), needs)
    }

    /// `self * s` where `s` has shape [1].
    pub fn mul_scalar_t(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "mul_scalar_t expects scalar");
        let sv = s.scalar_value();
        let needs = self.requires_grad() || s.requires_grad();
        self.tape
            .push(&*self.value() * sv, Op::MulS(self.id, s.id), needs)
    }

    pub fn add_c(&self, c: f64) -> Tensor {
        self.tape
            .push(&*self.value() + c, Op::AddC(self.id, c), self.requires_grad())
    }

    pub fn mul_c(&self, c: f64) -> Tensor {
        self.tape
            .push(&*self.value() * c, Op::MulC(self.id, c), self.requires_grad())
    }

    /// Elementwise `self^c`; defined for non-negative inputs.
    pub fn pow_c(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x.powf(c));
        self.tape.push(v, Op::PowC(self.id, c), self.requires_grad())
    }

    /// Elementwise `self^e` with a scalar tensor exponent (base must be > 0
    /// wherever gradients matter; zero base contributes zero gradient).
    pub fn pow_ts(&self, e: &Tensor) -> Tensor {
        assert_eq!(e.numel(), 1);
        let ev = e.scalar_value();
        let v = self.value().mapv(|x| x.powf(ev));
        let needs = self.requires_grad() || e.requires_grad();
        self.tape.push(v, Op::PowTS { a: self.id, e: e.id }, needs)
    }

    pub fn min_c(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x.min(c));
        self.tape.push(v, Op::MinC(self.id, c), self.requires_grad())
    }

    pub fn max_c(&self, c: f64) -> Tensor {
        let v = self.value().mapv(|x| x.max(c));
        self.tape.push(v, Op::MaxC(self.id, c), self.requires_grad())
    }

    pub fn clamp01(&self) -> Tensor {
        self.max_c(0.0).min_c(1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.tape
            .push(-&*self.value(), Op::Neg(self.id), self.requires_grad())
    }

    pub fn abs(&self) -> Tensor {
        let v = self.value().mapv(f64::abs);
        self.tape.push(v, Op::Abs(self.id), self.requires_grad())
    }

    pub fn sqr(&self) -> Tensor {
        let v = self.value().mapv(|x| x * x);
        self.tape.push(v, Op::Sqr(self.id), self.requires_grad())
    }

    pub fn sqrt_t(&self) -> Tensor {
        let v = self.value().mapv(f64::sqrt);
        self.tape.push(v, Op::Sqrt(self.id), self.requires_grad())
    }

    pub fn exp_t(&self) -> Tensor {
        let v = self.value().mapv(f64::exp);
        self.tape.push(v, Op::Exp(self.id), self.requires_grad())
    }

    pub fn ln_t(&self) -> Tensor {
        let v = self.value().mapv(f64::ln);
        self.tape.push(v, Op::Ln(self.id), self.requires_grad())
    }

    pub fn sin_t(&self) -> Tensor {
        let v = self.value().mapv(f64::sin);
        self.tape.push(v, Op::Sin(self.id), self.requires_grad())
    }

    pub fn cos_t(&self) -> Tensor {
        let v = self.value().mapv(f64::cos);
        self.tape.push(v, Op::Cos(self.id), self.requires_grad())
    }

    pub fn sigmoid(&self) -> Tensor {
        let v = self.value().mapv(sigmoid_scalar);
        self.tape
            .push(v, Op::Sigmoid(self.id), self.requires_grad())
    }

    pub fn softplus(&self) -> Tensor {
        let v = self.value().mapv(softplus_scalar);
        self.tape
            .push(v, Op::Softplus(self.id), self.requires_grad())
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor {
        let v = self.value().mapv(|x| if x >= 0.0 { x } else { alpha * x });
        self.tape
            .push(v, Op::LeakyRelu(self.id, alpha), self.requires_grad())
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn sum_all(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value().sum());
        self.tape.push(v, Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean_all(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[1]), self.value().sum() / self.numel() as f64);
        self.tape
            .push(v, Op::MeanAll(self.id), self.requires_grad())
    }

    /// Sum over every axis except `axis`; result shape `[shape[axis]]`.
    pub fn sum_but_axis(&self, axis: usize) -> Tensor {
        let val = self.value();
        let n = self.shape[axis];
        let mut out = ArrayD::zeros(IxDyn(&[n]));
        for (j, lane) in val.axis_iter(Axis(axis)).enumerate() {
            out[[j]] = lane.sum();
        }
        self.tape
            .push(out, Op::SumButAxis(self.id, axis), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value()
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.tape.push(v, Op::Reshape(self.id), self.requires_grad())
    }

    /// Concatenate along axis 0.
    pub fn concat_c(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let tape = parts[0].tape.clone();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat shapes");
        let needs = parts.iter().any(|p| p.requires_grad());
        tape.push(v, Op::ConcatC(parts.iter().map(|p| p.id).collect()), needs)
    }

    /// Slice `len` entries starting at `start` along axis 0.
    pub fn slice_c(&self, start: usize, len: usize) -> Tensor {
        let v = self
            .value()
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.tape.push(
            v,
            Op::SliceC {
                a: self.id,
                start,
                len,
            },
            self.requires_grad(),
        )
    }

    /// Multiply by a vector broadcast along `axis`:
    /// `out[..., j, ...] = self[..., j, ...] * v[j]`.
    pub fn mul_axis(&self, v: &Tensor, axis: usize) -> Tensor {
        assert_eq!(v.shape.len(), 1, "mul_axis expects a vector");
        assert_eq!(self.shape[axis], v.shape[0], "mul_axis length mismatch");
        let vv = v.value();
        let mut out = self.value().as_ref().clone();
        for (j, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
            let f = vv[[j]];
            lane.mapv_inplace(|x| x * f);
        }
        let needs = self.requires_grad() || v.requires_grad();
        self.tape.push(
            out,
            Op::MulAxis {
                a: self.id,
                v: v.id,
                axis,
            },
            needs,
        )
    }

    /// `[C,H,W] * [1,H,W]` channel-broadcast multiply.
    pub fn mul_bcast_c(&self, s: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 3);
        assert_eq!(s.shape.len(), 3);
        assert_eq!(s.shape[0], 1, "mul_bcast_c scalar field must be [1,H,W]");
        assert_eq!(&self.shape[1..], &s.shape[1..]);
        let sv = s.value();
        let s2 = sv.index_axis(Axis(0), 0);
        let mut out = self.value().as_ref().clone();
        for mut ch in out.axis_iter_mut(Axis(0)) {
            ch.zip_mut_with(&s2, |o, &x| *o *= x);
        }
        let needs = self.requires_grad() || s.requires_grad();
        self.tape
            .push(out, Op::MulBcastC { a: self.id, s: s.id }, needs)
    }

    /// Matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = conv::matmul_forward(&self.value(), &other.value(), false);
        self.binary(other, Op::MatMul, v)
    }

    /// `[m,k]·[n,k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let v = conv::matmul_forward(&self.value(), &other.value(), true);
        self.binary(other, Op::MatMulNT, v)
    }

    /// Fully connected layer: `w·x + b` with x:[k], w:[m,k], b:[m].
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Tensor {
        let v = conv::linear_forward(&self.value(), &w.value(), &b.value());
        let needs = self.requires_grad() || w.requires_grad() || b.requires_grad();
        self.tape.push(
            v,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.id,
            },
            needs,
        )
    }

    /// 2-D convolution over `[Cin,H,W]` with weight `[Cout,Cin,kh,kw]`,
    /// stride 1 or 2, circular or zero padding of (k-1)/2.
    pub fn conv2d(&self, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: PadMode) -> Tensor {
        let v = conv::conv2d_forward(
            &self.value(),
            &w.value(),
            b.map(|t| t.value()).as_deref(),
            stride,
            pad,
        );
        let needs = self.requires_grad()
            || w.requires_grad()
            || b.map(|t| t.requires_grad()).unwrap_or(false);
        self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|t| t.id),
                stride,
                pad,
            },
            needs,
        )
    }

    /// Non-overlapping k×k average pooling on `[C,H,W]`.
    pub fn avg_pool2(&self, k: usize) -> Tensor {
        let v = conv::avg_pool_forward(&self.value(), k);
        self.tape
            .push(v, Op::AvgPool2 { x: self.id, k }, self.requires_grad())
    }

    /// Nearest-neighbor 2x upsampling on `[C,H,W]`.
    pub fn upsample2(&self) -> Tensor {
        let v = conv::upsample2_forward(&self.value());
        self.tape
            .push(v, Op::Upsample2(self.id), self.requires_grad())
    }

    /// Sample `[C,H,W]` at wrapped UV grid positions (`gu`,`gv` of shape
    /// [Ho,Wo], in [0,1] texture units, wrapping periodically).
    pub fn bilinear_wrap(&self, gu: &Tensor, gv: &Tensor) -> Tensor {
        same_shape!(gu, gv, "bilinear grid");
        let v = conv::bilinear_wrap_forward(&self.value(), &gu.value(), &gv.value());
        let needs = self.requires_grad() || gu.requires_grad() || gv.requires_grad();
        self.tape.push(
            v,
            Op::BilinearWrap {
                img: self.id,
                gu: gu.id,
                gv: gv.id,
            },
            needs,
        )
    }

    /// Mean absolute difference (L1) as a scalar tensor.
    pub fn l1_distance(&self, other: &Tensor) -> Tensor {
        self.sub(other).abs().mean_all()
    }
}

#[cfg(test)]
mod tests;
