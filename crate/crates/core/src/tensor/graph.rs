//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value produced during a forward pass.
//! Primitive applications whose inputs require gradients are appended to the
//! tape in execution order, which is a topological order by construction;
//! [`Graph::backward`] walks the tape in reverse and accumulates into the
//! bound [`Param`] leaves.

use std::sync::atomic::{AtomicBool, Ordering};

use super::kernels::{self, Window};
use super::storage::strides;
use super::{Param, Scalar, Tensor};
use crate::error::{Error, Result};

static CHECKED: AtomicBool = AtomicBool::new(false);

/// Enables or disables non-finite detection for graphs created afterwards.
pub fn set_checked_mode(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Exp,
    Log,
    Abs,
    Sqrt,
    Powf(f64),
    Scale(f64),
    AddScalar,
    ClampMin(f64),
    MatMul,
    Conv2d(Window),
    MaxPool2d(Vec<usize>),
    // reduced shape with kept (unit) axes
    Sum(Vec<usize>),
    Mean(Vec<usize>),
    MaxAxis(Vec<usize>),
    Pad(Vec<(usize, usize)>),
    Slice(Vec<(usize, usize)>),
    Reshape,
    Broadcast,
    Permute(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Sqrt => "sqrt",
            Op::Powf(_) => "powf",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::ClampMin(_) => "clamp_min",
            Op::MatMul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::MaxPool2d(_) => "max_pool2d",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxAxis(_) => "max",
            Op::Pad(_) => "pad",
            Op::Slice(_) => "slice",
            Op::Reshape => "reshape",
            Op::Broadcast => "broadcast",
            Op::Permute(_) => "permute",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
}

/// Recording of one forward pass.
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node>,
    bindings: Vec<(usize, Param<T>)>,
    checked: bool,
    single_use: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A reusable graph: `backward` may run more than once and accumulates
    /// each time.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires_grad: Vec::new(),
            nodes: Vec::new(),
            bindings: Vec::new(),
            checked: checked_mode(),
            single_use: false,
            consumed: false,
        }
    }

    /// A graph whose `backward` may run only once.
    pub fn single_use() -> Self {
        Self {
            single_use: true,
            ..Self::new()
        }
    }

    pub fn with_checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Number of recorded primitive applications.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Names of the recorded primitives in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn insert_leaf(&mut self, value: Tensor<T>, requires_grad: bool, what: &str) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                op: "input",
                what: what.to_string(),
            });
        }
        self.values.push(value);
        self.requires_grad.push(requires_grad);
        Ok(Var(self.values.len() - 1))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.insert_leaf(value, false, "constant")
    }

    /// Binds a parameter as a leaf. `backward` accumulates into its gradient
    /// when the parameter is trainable.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        p.note_read();
        let v = self.insert_leaf(p.value().clone(), p.requires_grad(), "parameter")?;
        if p.requires_grad() {
            self.bindings.push((v.0, p.clone()));
        }
        Ok(v)
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        self.values.push(self.values[v.0].clone());
        self.requires_grad.push(false);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                what: format!("output of shape {:?}", value.shape()),
            });
        }
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        self.values.push(value);
        self.requires_grad.push(rg);
        let output = self.values.len() - 1;
        if rg {
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.0).collect(),
                output,
            });
        }
        Ok(Var(output))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let out = self.values[a.0].zip_map(&self.values[b.0], f);
        self.push(out, op, &[a, b])
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.values[a.0].map(f);
        self.push(out, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs, a, |x| x.abs())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let pt = T::from_f64(p);
        self.unary(Op::Powf(p), a, move |x| x.powf(pt))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        self.unary(Op::Scale(c), a, move |x| x * ct)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ct = T::from_f64(c);
        self.unary(Op::AddScalar, a, move |x| x + ct)
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        let lt = T::from_f64(lo);
        self.unary(Op::ClampMin(lo), a, move |x| if x > lt { x } else { lt })
    }

    /// 2-D matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.values[a.0].data(), self.values[b.0].data(), &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul, &[a, b])
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[O×C×kh×kw]`, lowered to a
    /// matrix product through im2col.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {sx:?} and {sw:?}"),
            ));
        }
        if sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[1], sw[1]),
            ));
        }
        let win = Window {
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (oh, ow) = win.output_hw(sx[2], sx[3]).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} stride {stride} pad {pad} does not fit {:?}",
                    sw[2],
                    sw[3],
                    &sx[2..]
                ),
            )
        })?;
        let (n, o) = (sx[0], sw[0]);
        let ckk = sw[1] * sw[2] * sw[3];
        let np = n * oh * ow;
        let cols = kernels::im2col(self.values[x.0].data(), (n, sx[1], sx[2], sx[3]), win, (oh, ow));
        let mut out_t = vec![T::zero(); o * np];
        kernels::gemm_nn(o, ckk, np, self.values[w.0].data(), &cols, &mut out_t);
        let (out, _) = kernels::permute(&out_t, &[o, n, oh * ow], &[1, 0, 2]);
        self.push(Tensor::new(vec![n, o, oh, ow], out)?, Op::Conv2d(win), &[x, w])
    }

    /// Max pooling over square windows of `x[N×C×H×W]`.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("expected 4-d input, got {sx:?}")));
        }
        let win = Window {
            kh: kernel,
            kw: kernel,
            stride,
            pad,
        };
        let (oh, ow) = win
            .output_hw(sx[2], sx[3])
            .filter(|_| pad < kernel)
            .ok_or_else(|| Error::shape("max_pool2d", format!("window does not fit {sx:?}")))?;
        let (out, arg) = kernels::max_pool2d(self.values[x.0].data(), (sx[0], sx[1], sx[2], sx[3]), win, (oh, ow));
        self.push(Tensor::new(vec![sx[0], sx[1], oh, ow], out)?, Op::MaxPool2d(arg), &[x])
    }

    fn reduced_shape(&self, op: &'static str, x: Var, axes: &[usize]) -> Result<Vec<usize>> {
        let shape = self.shape(x);
        let mut kept = shape.to_vec();
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape(op, format!("axis {a} out of range for {shape:?}")));
            }
            kept[a] = 1;
        }
        Ok(kept)
    }

    fn squeeze(kept: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
        if keepdim {
            kept.to_vec()
        } else {
            kept.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect()
        }
    }

    /// Sum over `axes`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let kept = self.reduced_shape("sum", x, axes)?;
        let src = &self.values[x.0];
        let st = kernels::broadcast_strides(&kept, src.shape()).expect("reduced shape broadcasts");
        let data = kernels::reduce_to(src.data(), src.shape(), &st, kept.iter().product());
        let out = Tensor::new(Self::squeeze(&kept, axes, keepdim), data)?;
        self.push(out, Op::Sum(kept), &[x])
    }

    /// Mean over `axes`.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let kept = self.reduced_shape("mean", x, axes)?;
        let src = &self.values[x.0];
        let count: usize = axes.iter().map(|&a| src.shape()[a]).product();
        if count == 0 {
            return Err(Error::shape("mean", "reduction over an empty axis"));
        }
        let st = kernels::broadcast_strides(&kept, src.shape()).expect("reduced shape broadcasts");
        let mut data = kernels::reduce_to(src.data(), src.shape(), &st, kept.iter().product());
        let inv = T::one() / T::from_f64(count as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(Self::squeeze(&kept, axes, keepdim), data)?;
        self.push(out, Op::Mean(kept), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean_axes(x, &axes, false)
    }

    /// Maximum along one axis; ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let kept = self.reduced_shape("max", x, &[axis])?;
        let src = &self.values[x.0];
        let shape = src.shape();
        let len = shape[axis];
        if len == 0 {
            return Err(Error::shape("max", "reduction over an empty axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = src.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_idx = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if data[idx] > data[best_idx] {
                        best_idx = idx;
                    }
                }
                out.push(data[best_idx]);
                arg.push(best_idx);
            }
        }
        let out = Tensor::new(Self::squeeze(&kept, &[axis], keepdim), out)?;
        self.push(out, Op::MaxAxis(arg), &[x])
    }

    /// Zero padding: `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&mut self, x: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if pads.len() != shape.len() {
            return Err(Error::shape(
                "pad",
                format!("{} pad pairs for rank-{} input", pads.len(), shape.len()),
            ));
        }
        let out_shape: Vec<usize> = shape.iter().zip(pads).map(|(&e, &(b, a))| e + b + a).collect();
        let out_strides = strides(&out_shape);
        let base: usize = pads.iter().zip(&out_strides).map(|(&(b, _), &s)| b * s).sum();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let src = self.values[x.0].data();
        kernels::for_each_offset(&shape, &out_strides, |flat, off| out[base + off] = src[flat]);
        self.push(Tensor::new(out_shape, out)?, Op::Pad(pads.to_vec()), &[x])
    }

    /// Half-open ranges `ranges[i] = (start, end)` per axis.
    pub fn slice(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ranges.len() != shape.len() || ranges.iter().zip(&shape).any(|(&(s, e), &extent)| s > e || e > extent) {
            return Err(Error::shape(
                "slice",
                format!("ranges {ranges:?} invalid for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
        let in_strides = strides(&shape);
        let base: usize = ranges.iter().zip(&in_strides).map(|(&(s, _), &st)| s * st).sum();
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        kernels::for_each_offset(&out_shape, &in_strides, |flat, off| out[flat] = src[base + off]);
        self.push(Tensor::new(out_shape, out)?, Op::Slice(ranges.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape, &[x])
    }

    /// Numpy-style broadcast of `x` up to `shape`.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = &self.values[x.0];
        let st = kernels::broadcast_strides(src.shape(), shape).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("{:?} does not broadcast to {shape:?}", src.shape()),
            )
        })?;
        let out = kernels::expand(src.data(), shape, &st);
        self.push(Tensor::new(shape.to_vec(), out)?, Op::Broadcast, &[x])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (out, out_shape) = kernels::permute(self.values[x.0].data(), &shape, perm);
        self.push(Tensor::new(out_shape, out)?, Op::Permute(perm.to_vec()), &[x])
    }

    /// Accumulates `d loss / d leaf` into every trainable bound parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.single_use && self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::ones(shape.to_vec()));
        for node in self.nodes[..].iter().rev() {
            if node.output > loss.0 {
                continue;
            }
            let Some(g) = grads[node.output].take() else {
                continue;
            };
            let input_grads = self.vjp(node, &g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        for (var, param) in &self.bindings {
            if let Some(g) = &grads[*var] {
                param.accumulate_grad(g);
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn vjp(&self, node: &Node, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let needs = |i: usize| self.requires_grad[node.inputs[i]];
        let input = |i: usize| &self.values[node.inputs[i]];
        let out = &self.values[node.output];
        let one = |t: Tensor<T>| vec![Some(t)];
        match &node.op {
            Op::Add => vec![needs(0).then(|| g.clone()), needs(1).then(|| g.clone())],
            Op::Sub => vec![needs(0).then(|| g.clone()), needs(1).then(|| g.map(|v| -v))],
            Op::Mul => vec![
                needs(0).then(|| g.zip_map(input(1), |gv, b| gv * b)),
                needs(1).then(|| g.zip_map(input(0), |gv, a| gv * a)),
            ],
            Op::Div => vec![
                needs(0).then(|| g.zip_map(input(1), |gv, b| gv / b)),
                needs(1).then(|| {
                    let t = g.zip_map(input(0), |gv, a| gv * a);
                    t.zip_map(input(1), |v, b| -v / (b * b))
                }),
            ],
            Op::Neg => one(g.map(|v| -v)),
            Op::Relu => one(g.zip_map(input(0), |gv, x| if x > T::zero() { gv } else { T::zero() })),
            Op::Exp => one(g.zip_map(out, |gv, y| gv * y)),
            Op::Log => one(g.zip_map(input(0), |gv, x| gv / x)),
            Op::Abs => one(g.zip_map(input(0), |gv, x| {
                if x > T::zero() {
                    gv
                } else if x < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })),
            Op::Sqrt => {
                let half = T::from_f64(0.5);
                one(g.zip_map(out, |gv, y| gv * half / y))
            }
            Op::Powf(p) => {
                let pt = T::from_f64(*p);
                let pm1 = T::from_f64(p - 1.0);
                one(g.zip_map(input(0), |gv, x| gv * pt * x.powf(pm1)))
            }
            Op::Scale(c) => {
                let ct = T::from_f64(*c);
                one(g.map(|v| v * ct))
            }
            Op::AddScalar => one(g.clone()),
            Op::ClampMin(lo) => {
                let lt = T::from_f64(*lo);
                one(g.zip_map(input(0), |gv, x| if x > lt { gv } else { T::zero() }))
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = needs(0).then(|| {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm_nt(m, n, k, g.data(), b.data(), &mut d);
                    Tensor::new(vec![m, k], d).unwrap()
                });
                let gb = needs(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm_tn(k, m, n, a.data(), g.data(), &mut d);
                    Tensor::new(vec![k, n], d).unwrap()
                });
                vec![ga, gb]
            }
            Op::Conv2d(win) => {
                let (x, w) = (input(0), input(1));
                let sx = x.shape();
                let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let o = w.shape()[0];
                let (oh, ow) = (g.shape()[2], g.shape()[3]);
                let np = n * oh * ow;
                let ckk = c * win.kh * win.kw;
                let (g_t, _) = kernels::permute(g.data(), &[n, o, oh * ow], &[1, 0, 2]);
                let gx = needs(0).then(|| {
                    let mut dcols = vec![T::zero(); ckk * np];
                    kernels::gemm_tn(ckk, o, np, w.data(), &g_t, &mut dcols);
                    let dx = kernels::col2im(&dcols, (n, c, h, wd), *win, (oh, ow));
                    Tensor::new(sx.to_vec(), dx).unwrap()
                });
                let gw = needs(1).then(|| {
                    let cols = kernels::im2col(x.data(), (n, c, h, wd), *win, (oh, ow));
                    let mut dw = vec![T::zero(); o * ckk];
                    kernels::gemm_nt(o, np, ckk, &g_t, &cols, &mut dw);
                    Tensor::new(w.shape().to_vec(), dw).unwrap()
                });
                vec![gx, gw]
            }
            Op::MaxPool2d(arg) | Op::MaxAxis(arg) => {
                let mut d = Tensor::zeros(input(0).shape().to_vec());
                let dd = d.data_mut();
                for (&idx, &gv) in arg.iter().zip(g.data()) {
                    dd[idx] += gv;
                }
                one(d)
            }
            Op::Sum(kept) | Op::Mean(kept) => {
                let shape = input(0).shape();
                let st = kernels::broadcast_strides(kept, shape).unwrap();
                let mut d = kernels::expand(g.data(), shape, &st);
                if matches!(node.op, Op::Mean(_)) {
                    let count: usize = shape.iter().product::<usize>() / kept.iter().product::<usize>();
                    let inv = T::one() / T::from_f64(count as f64);
                    d.iter_mut().for_each(|v| *v *= inv);
                }
                one(Tensor::new(shape.to_vec(), d).unwrap())
            }
            Op::Pad(pads) => {
                let shape = input(0).shape();
                let out_strides = strides(g.shape());
                let base: usize = pads.iter().zip(&out_strides).map(|(&(b, _), &s)| b * s).sum();
                let mut d = vec![T::zero(); shape.iter().product()];
                let gd = g.data();
                kernels::for_each_offset(shape, &out_strides, |flat, off| d[flat] = gd[base + off]);
                one(Tensor::new(shape.to_vec(), d).unwrap())
            }
            Op::Slice(ranges) => {
                let shape = input(0).shape();
                let in_strides = strides(shape);
                let base: usize = ranges.iter().zip(&in_strides).map(|(&(s, _), &st)| s * st).sum();
                let mut d = vec![T::zero(); shape.iter().product()];
                let gd = g.data();
                kernels::for_each_offset(g.shape(), &in_strides, |flat, off| d[base + off] = gd[flat]);
                one(Tensor::new(shape.to_vec(), d).unwrap())
            }
            Op::Reshape => one(g.clone().reshape(input(0).shape().to_vec()).unwrap()),
            Op::Broadcast => {
                let small = input(0).shape();
                let st = kernels::broadcast_strides(small, g.shape()).unwrap();
                let d = kernels::reduce_to(g.data(), g.shape(), &st, small.iter().product());
                one(Tensor::new(small.to_vec(), d).unwrap())
            }
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, shape) = kernels::permute(g.data(), g.shape(), &inv);
                one(Tensor::new(shape, d).unwrap())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(v: &[f64]) -> Param<f64> {
        Param::new(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn add_and_relu_forward() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        // constants record nothing
        assert_eq!(g.num_nodes(), 0);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let w = g.constant(Tensor::ones(vec![1, 1, 3, 3])).unwrap();
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let w = vec_param(&[1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let wv = g.param(&w).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn mean_relu_gradient() {
        let w = vec_param(&[-1.0, 1.0]);
        let mut g = Graph::new();
        let wv = g.param(&w).unwrap();
        let r = g.relu(wv).unwrap();
        let loss = g.mean_all(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_twice_doubles() {
        let w = vec_param(&[0.3, -1.7]);
        let mut g = Graph::new();
        let wv = g.param(&w).unwrap();
        let e = g.exp(wv).unwrap();
        let loss = g.sum_all(e).unwrap();
        g.backward(loss).unwrap();
        let once = w.grad_or_zeros();
        g.backward(loss).unwrap();
        let twice = w.grad_or_zeros();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn single_use_graph_refuses_second_backward() {
        let w = vec_param(&[1.0]);
        let mut g = Graph::single_use();
        let wv = g.param(&w).unwrap();
        let loss = g.sum_all(wv).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let w = vec_param(&[1.0, 2.0]);
        let mut g = Graph::new();
        let wv = g.param(&w).unwrap();
        assert!(matches!(g.backward(wv), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2])).unwrap();
        let b = g.constant(Tensor::zeros(vec![3])).unwrap();
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2]") && err.contains("[3]"),
            "{err}"
        );
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3])).unwrap();
        let err = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains("channels"), "{err}");
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::<f64>::new().with_checked(true);
        let a = g.constant(Tensor::from_vec(vec![0.0])).unwrap();
        let err = g.log(a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log", .. }));
        let mut g = Graph::<f64>::new().with_checked(true);
        assert!(g.constant(Tensor::from_vec(vec![f64::NAN])).is_err());
        // unchecked graphs let the value through
        let mut g = Graph::<f64>::new().with_checked(false);
        let a = g.constant(Tensor::from_vec(vec![0.0])).unwrap();
        assert!(g.log(a).is_ok());
    }

    #[test]
    fn pad_slice_reshape_round_trip() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.1 - 1.0).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap()).unwrap();
        let p = g.pad(x, &[(1, 0), (0, 2), (3, 1)]).unwrap();
        let s = g.slice(p, &[(1, 3), (0, 3), (3, 7)]).unwrap();
        assert_eq!(g.value(s).data(), &data[..]);
        let r = g.reshape(s, &[4, 6]).unwrap();
        let r = g.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(g.value(r).data(), &data[..]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::<f64>::new();
        let x = g
            .constant(Tensor::from_f64(vec![1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap())
            .unwrap();
        let y = g.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0]);
    }
}
