//! Minimal reverse-mode autodiff over `ndarray`, sized for desk-scale GAN
//! training on the CPU.
//!
//! Values are immutable [`Var`]s holding shared `f32` arrays. Ops record a
//! graph node when gradients are enabled; [`backward`] walks the graph from a
//! scalar output to a set of target leaves. When `create_graph` is true the
//! vector-Jacobian products are themselves recorded, so gradients can be
//! differentiated again (used by the WGAN gradient penalty and the
//! second-order attention mode).
//!
//! Convolutions are composed from `Im2Col`/`Col2Im` and batched GEMM
//! primitives, which keeps every vjp expressible in terms of recorded ops.

pub mod gradcheck;
pub mod kernels;
pub mod nn;

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{ArcArray, Array, ArrayD, ArrayViewD, Axis, IxDyn};

pub type Tensor = ArrayD<f32>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    AddScalar(f32),
    MulScalar(f32),
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    Softplus,
    Abs,
    Sqrt,
    Square,
    Exp,
    Log,
    SumAll,
    BroadcastFromUnit(Vec<usize>),
    SumAxis(usize),
    ExpandAxis(usize, usize),
    Reshape,
    Transpose2d,
    Concat(usize),
    SliceAxis { axis: usize, start: usize, len: usize },
    ZeroPadAxis { axis: usize, before: usize },
    MaxAxis(usize),
    MinAxis(usize),
    /// A (M,K) x X[b] (K,N) -> (B,M,N)
    Gemm,
    /// (M,K) x (K,N) -> (M,N)
    Gemm2d,
    /// sum_b X[b] (M,N) x Y[b]^T (N,K)... -> (M,K)
    GemmBatchReduce,
    Im2Col { k: usize, stride: usize, pad: usize },
    Col2Im { k: usize, stride: usize, pad: usize },
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
}

struct VarInner {
    id: u64,
    value: ArcArray<f32, IxDyn>,
    node: Option<Node>,
    requires_grad: bool,
}

/// Immutable tensor value, optionally carrying the graph node that produced it.
#[derive(Clone)]
pub struct Var(Arc<VarInner>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// Leaf variable that participates in differentiation.
    pub fn param(value: ArrayD<f32>) -> Var {
        Var(Arc::new(VarInner {
            id: next_id(),
            value: value.into_shared(),
            node: None,
            requires_grad: true,
        }))
    }

    /// Leaf variable from shared storage (no copy).
    pub fn param_shared(value: ArcArray<f32, IxDyn>) -> Var {
        Var(Arc::new(VarInner { id: next_id(), value, node: None, requires_grad: true }))
    }

    /// Leaf constant: gradients never flow into it.
    pub fn constant(value: ArrayD<f32>) -> Var {
        Var(Arc::new(VarInner {
            id: next_id(),
            value: value.into_shared(),
            node: None,
            requires_grad: false,
        }))
    }

    pub fn constant_shared(value: ArcArray<f32, IxDyn>) -> Var {
        Var(Arc::new(VarInner { id: next_id(), value, node: None, requires_grad: false }))
    }

    pub fn scalar(v: f32) -> Var {
        Var::constant(Array::from_elem(IxDyn(&[1]), v))
    }

    fn from_op(op: Op, inputs: Vec<Var>, value: ArrayD<f32>) -> Var {
        let rg = grad_enabled() && inputs.iter().any(|v| v.0.requires_grad);
        let node = if rg { Some(Node { op, inputs }) } else { None };
        Var(Arc::new(VarInner {
            id: next_id(),
            value: value.into_shared(),
            node,
            requires_grad: rg,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> ArrayViewD<'_, f32> {
        self.0.value.view()
    }

    /// Shared handle to the underlying storage.
    pub fn storage(&self) -> ArcArray<f32, IxDyn> {
        self.0.value.clone()
    }

    pub fn to_array(&self) -> ArrayD<f32> {
        self.0.value.to_owned()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar Var of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    /// Same value, cut loose from the graph.
    pub fn detach(&self) -> Var {
        Var::constant_shared(self.0.value.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.0.value.iter().all(|v| v.is_finite())
    }
}

fn zeros_like(v: &Var) -> ArrayD<f32> {
    ArrayD::zeros(IxDyn(v.shape()))
}

// ---------------------------------------------------------------------------
// op constructors
// ---------------------------------------------------------------------------

fn assert_same_shape(a: &Var, b: &Var, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_same_shape(a, b, "add");
    let v = &a.0.value + &b.0.value;
    Var::from_op(Op::Add, vec![a.clone(), b.clone()], v.to_owned())
}

pub fn sub(a: &Var, b: &Var) -> Var {
    assert_same_shape(a, b, "sub");
    let v = &a.0.value - &b.0.value;
    Var::from_op(Op::Sub, vec![a.clone(), b.clone()], v.to_owned())
}

pub fn mul(a: &Var, b: &Var) -> Var {
    assert_same_shape(a, b, "mul");
    let v = &a.0.value * &b.0.value;
    Var::from_op(Op::Mul, vec![a.clone(), b.clone()], v.to_owned())
}

pub fn div(a: &Var, b: &Var) -> Var {
    assert_same_shape(a, b, "div");
    let v = &a.0.value / &b.0.value;
    Var::from_op(Op::Div, vec![a.clone(), b.clone()], v.to_owned())
}

pub fn neg(a: &Var) -> Var {
    Var::from_op(Op::Neg, vec![a.clone()], a.0.value.mapv(|x| -x))
}

pub fn add_scalar(a: &Var, s: f32) -> Var {
    Var::from_op(Op::AddScalar(s), vec![a.clone()], a.0.value.mapv(|x| x + s))
}

pub fn mul_scalar(a: &Var, s: f32) -> Var {
    Var::from_op(Op::MulScalar(s), vec![a.clone()], a.0.value.mapv(|x| x * s))
}

pub fn relu(a: &Var) -> Var {
    Var::from_op(Op::Relu, vec![a.clone()], a.0.value.mapv(|x| x.max(0.0)))
}

pub fn leaky_relu(a: &Var, slope: f32) -> Var {
    let v = a.0.value.mapv(|x| if x >= 0.0 { x } else { slope * x });
    Var::from_op(Op::LeakyRelu(slope), vec![a.clone()], v)
}

pub fn tanh(a: &Var) -> Var {
    Var::from_op(Op::Tanh, vec![a.clone()], a.0.value.mapv(f32::tanh))
}

pub fn sigmoid(a: &Var) -> Var {
    Var::from_op(Op::Sigmoid, vec![a.clone()], a.0.value.mapv(sigmoid_scalar))
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(a: &Var) -> Var {
    Var::from_op(Op::Softplus, vec![a.clone()], a.0.value.mapv(softplus_scalar))
}

pub fn abs(a: &Var) -> Var {
    Var::from_op(Op::Abs, vec![a.clone()], a.0.value.mapv(f32::abs))
}

pub fn sqrt(a: &Var) -> Var {
    Var::from_op(Op::Sqrt, vec![a.clone()], a.0.value.mapv(f32::sqrt))
}

pub fn square(a: &Var) -> Var {
    Var::from_op(Op::Square, vec![a.clone()], a.0.value.mapv(|x| x * x))
}

pub fn exp(a: &Var) -> Var {
    Var::from_op(Op::Exp, vec![a.clone()], a.0.value.mapv(f32::exp))
}

pub fn log(a: &Var) -> Var {
    Var::from_op(Op::Log, vec![a.clone()], a.0.value.mapv(f32::ln))
}

/// Sum of every element, as a `[1]`-shaped Var.
pub fn sum_all(a: &Var) -> Var {
    let s = a.0.value.sum();
    Var::from_op(Op::SumAll, vec![a.clone()], Array::from_elem(IxDyn(&[1]), s))
}

pub fn mean_all(a: &Var) -> Var {
    mul_scalar(&sum_all(a), 1.0 / a.len() as f32)
}

/// Broadcast a `[1]`-shaped Var to an arbitrary shape.
pub fn broadcast_from_unit(a: &Var, shape: &[usize]) -> Var {
    assert_eq!(a.len(), 1, "broadcast_from_unit expects a [1] Var");
    let v = ArrayD::from_elem(IxDyn(shape), a.item());
    Var::from_op(Op::BroadcastFromUnit(shape.to_vec()), vec![a.clone()], v)
}

/// Sum over one axis, removing it.
pub fn sum_axis(a: &Var, axis: usize) -> Var {
    let v = a.0.value.sum_axis(Axis(axis));
    Var::from_op(Op::SumAxis(axis), vec![a.clone()], v.to_owned())
}

/// Insert an axis at `axis` with length `n`, repeating the input along it.
pub fn expand_axis(a: &Var, axis: usize, n: usize) -> Var {
    let expanded = a.0.value.view().insert_axis(Axis(axis));
    let mut shape = a.shape().to_vec();
    shape.insert(axis, n);
    let v = expanded.broadcast(IxDyn(&shape)).expect("expand_axis broadcast").to_owned();
    Var::from_op(Op::ExpandAxis(axis, n), vec![a.clone()], v)
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape: size mismatch {:?} -> {:?}", a.shape(), shape);
    let v = a
        .0
        .value
        .to_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of standard-layout array");
    Var::from_op(Op::Reshape, vec![a.clone()], v)
}

pub fn transpose2(a: &Var) -> Var {
    assert_eq!(a.shape().len(), 2, "transpose2 expects rank 2");
    let v = a.0.value.view().reversed_axes().as_standard_layout().to_owned();
    Var::from_op(Op::Transpose2d, vec![a.clone()], v)
}

pub fn concat(axis: usize, a: &Var, b: &Var) -> Var {
    let v = ndarray::concatenate(Axis(axis), &[a.0.value.view(), b.0.value.view()])
        .expect("concat shapes");
    Var::from_op(Op::Concat(axis), vec![a.clone(), b.clone()], v)
}

pub fn slice_axis(a: &Var, axis: usize, start: usize, len: usize) -> Var {
    let v = a
        .0
        .value
        .view()
        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
        .as_standard_layout()
        .to_owned();
    Var::from_op(Op::SliceAxis { axis, start, len }, vec![a.clone()], v)
}

pub fn zero_pad_axis(a: &Var, axis: usize, before: usize, after: usize) -> Var {
    let mut shape = a.shape().to_vec();
    shape[axis] += before + after;
    let mut v = ArrayD::<f32>::zeros(IxDyn(&shape));
    v.slice_axis_mut(Axis(axis), ndarray::Slice::from(before..before + a.shape()[axis]))
        .assign(&a.0.value);
    let _ = after;
    Var::from_op(Op::ZeroPadAxis { axis, before }, vec![a.clone()], v)
}

/// Max over one axis, removing it. Gradient routes to the first maximum.
pub fn max_axis(a: &Var, axis: usize) -> Var {
    let v = a.0.value.map_axis(Axis(axis), |lane| {
        lane.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    });
    Var::from_op(Op::MaxAxis(axis), vec![a.clone()], v.to_owned())
}

/// Min over one axis, removing it. Gradient routes to the first minimum.
pub fn min_axis(a: &Var, axis: usize) -> Var {
    let v = a
        .0
        .value
        .map_axis(Axis(axis), |lane| lane.iter().copied().fold(f32::INFINITY, f32::min));
    Var::from_op(Op::MinAxis(axis), vec![a.clone()], v.to_owned())
}

/// A (M,K) x X[b] (K,N) for every batch entry -> (B,M,N).
pub fn gemm(a: &Var, x: &Var) -> Var {
    let a2 = a.0.value.view().into_dimensionality::<ndarray::Ix2>().expect("gemm: a rank 2");
    let x3 = x.0.value.view().into_dimensionality::<ndarray::Ix3>().expect("gemm: x rank 3");
    let v = kernels::matmul_batched(&a2, &x3).into_dyn();
    Var::from_op(Op::Gemm, vec![a.clone(), x.clone()], v)
}

pub fn gemm2d(a: &Var, b: &Var) -> Var {
    let a2 = a.0.value.view().into_dimensionality::<ndarray::Ix2>().expect("gemm2d: a rank 2");
    let b2 = b.0.value.view().into_dimensionality::<ndarray::Ix2>().expect("gemm2d: b rank 2");
    let v = kernels::matmul2(&a2, &b2).into_dyn();
    Var::from_op(Op::Gemm2d, vec![a.clone(), b.clone()], v)
}

/// sum_b X[b] (M,N) x Y[b]^T -> (M,K) where Y is (B,K,N).
pub fn gemm_batch_reduce(x: &Var, y: &Var) -> Var {
    let x3 = x.0.value.view().into_dimensionality::<ndarray::Ix3>().expect("gbr: x rank 3");
    let y3 = y.0.value.view().into_dimensionality::<ndarray::Ix3>().expect("gbr: y rank 3");
    let v = kernels::matmul_batch_reduce(&x3, &y3).into_dyn();
    Var::from_op(Op::GemmBatchReduce, vec![x.clone(), y.clone()], v)
}

pub fn im2col(x: &Var, k: usize, stride: usize, pad: usize) -> Var {
    let x4 = x.0.value.view().into_dimensionality::<ndarray::Ix4>().expect("im2col rank 4");
    let v = kernels::im2col(&x4, k, stride, pad).into_dyn();
    Var::from_op(Op::Im2Col { k, stride, pad }, vec![x.clone()], v)
}

pub fn col2im(cols: &Var, k: usize, stride: usize, pad: usize, c: usize, h: usize, w: usize) -> Var {
    let c3 = cols.0.value.view().into_dimensionality::<ndarray::Ix3>().expect("col2im rank 3");
    let v = kernels::col2im(&c3, k, stride, pad, c, h, w).into_dyn();
    Var::from_op(Op::Col2Im { k, stride, pad }, vec![cols.clone()], v)
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Gradients keyed by Var id, produced by [`backward`].
pub struct GradMap {
    grads: HashMap<u64, Var>,
}

impl GradMap {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.grads.get(&v.id())
    }

    /// Gradient of `v`, or zeros when no path reached it.
    pub fn grad(&self, v: &Var) -> Var {
        match self.grads.get(&v.id()) {
            Some(g) => g.clone(),
            None => Var::constant(zeros_like(v)),
        }
    }
}

/// Reverse-mode gradients of a single-element `output` with respect to
/// `targets`. With `create_graph` the returned gradients carry their own
/// graph and can be differentiated again.
pub fn backward(output: &Var, targets: &[&Var], create_graph: bool) -> GradMap {
    assert_eq!(output.len(), 1, "backward: output must be a single-element Var");
    let target_ids: std::collections::HashSet<u64> = targets.iter().map(|v| v.id()).collect();

    // Phase 1: which vars lie on a path from output to a target?
    let mut needed: HashMap<u64, bool> = HashMap::new();
    {
        enum Frame {
            Enter(Var),
            Exit(Var),
        }
        let mut stack = vec![Frame::Enter(output.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(v) => {
                    if needed.contains_key(&v.id()) {
                        continue;
                    }
                    // mark in-progress so cycles of Enter are not re-pushed
                    needed.insert(v.id(), target_ids.contains(&v.id()));
                    stack.push(Frame::Exit(v.clone()));
                    if let Some(node) = &v.0.node {
                        for input in &node.inputs {
                            stack.push(Frame::Enter(input.clone()));
                        }
                    }
                }
                Frame::Exit(v) => {
                    let mut req = target_ids.contains(&v.id());
                    if let Some(node) = &v.0.node {
                        for input in &node.inputs {
                            if *needed.get(&input.id()).unwrap_or(&false) {
                                req = true;
                                break;
                            }
                        }
                    }
                    needed.insert(v.id(), req);
                }
            }
        }
    }
    let is_needed = |v: &Var| *needed.get(&v.id()).unwrap_or(&false);

    if !is_needed(output) {
        return GradMap { grads: HashMap::new() };
    }

    // Phase 2: postorder over the needed subgraph.
    let mut topo: Vec<Var> = Vec::new();
    {
        enum Frame {
            Enter(Var),
            Exit(Var),
        }
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack = vec![Frame::Enter(output.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(v) => {
                    if !seen.insert(v.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(v.clone()));
                    if let Some(node) = &v.0.node {
                        for input in &node.inputs {
                            if is_needed(input) {
                                stack.push(Frame::Enter(input.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(v) => topo.push(v),
            }
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    let seed = Var::constant(ArrayD::ones(IxDyn(output.shape())));
    grads.insert(output.id(), seed);

    with_grad_mode(create_graph, || {
        for v in topo.iter().rev() {
            let Some(node) = &v.0.node else { continue };
            let Some(gy) = grads.get(&v.id()).cloned() else { continue };
            let wanted: Vec<bool> = node.inputs.iter().map(is_needed).collect();
            let input_grads = vjp(node, v, &gy, &wanted);
            for (input, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match grads.remove(&input.id()) {
                    Some(prev) => {
                        grads.insert(input.id(), add(&prev, &gi));
                    }
                    None => {
                        grads.insert(input.id(), gi);
                    }
                }
            }
        }
    });

    grads.retain(|id, _| target_ids.contains(id));
    GradMap { grads }
}

/// Per-op vector-Jacobian products, written in terms of public ops so they
/// are recordable when `create_graph` is requested.
fn vjp(node: &Node, _out: &Var, gy: &Var, wanted: &[bool]) -> Vec<Option<Var>> {
    let ins = &node.inputs;
    let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
    match &node.op {
        Op::Add => vec![
            want(0).then(|| gy.clone()),
            want(1).then(|| gy.clone()),
        ],
        Op::Sub => vec![want(0).then(|| gy.clone()), want(1).then(|| neg(gy))],
        Op::Mul => vec![
            want(0).then(|| mul(gy, &ins[1])),
            want(1).then(|| mul(gy, &ins[0])),
        ],
        Op::Div => {
            let ga = want(0).then(|| div(gy, &ins[1]));
            let gb = want(1).then(|| {
                let b2 = mul(&ins[1], &ins[1]);
                neg(&div(&mul(gy, &ins[0]), &b2))
            });
            vec![ga, gb]
        }
        Op::Neg => vec![want(0).then(|| neg(gy))],
        Op::AddScalar(_) => vec![want(0).then(|| gy.clone())],
        Op::MulScalar(s) => vec![want(0).then(|| mul_scalar(gy, *s))],
        Op::Relu => vec![want(0).then(|| {
            let mask = ins[0].0.value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            mul(gy, &Var::constant(mask))
        })],
        Op::LeakyRelu(slope) => vec![want(0).then(|| {
            let s = *slope;
            let mask = ins[0].0.value.mapv(|x| if x >= 0.0 { 1.0 } else { s });
            mul(gy, &Var::constant(mask))
        })],
        Op::Tanh => vec![want(0).then(|| {
            let t = tanh(&ins[0]);
            mul(gy, &add_scalar(&neg(&square(&t)), 1.0))
        })],
        Op::Sigmoid => vec![want(0).then(|| {
            let s = sigmoid(&ins[0]);
            mul(gy, &mul(&s, &add_scalar(&neg(&s), 1.0)))
        })],
        Op::Softplus => vec![want(0).then(|| mul(gy, &sigmoid(&ins[0])))],
        Op::Abs => vec![want(0).then(|| {
            let sign = ins[0].0.value.mapv(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            mul(gy, &Var::constant(sign))
        })],
        Op::Sqrt => vec![want(0).then(|| mul_scalar(&div(gy, &sqrt(&ins[0])), 0.5))],
        Op::Square => vec![want(0).then(|| mul_scalar(&mul(gy, &ins[0]), 2.0))],
        Op::Exp => vec![want(0).then(|| mul(gy, &exp(&ins[0])))],
        Op::Log => vec![want(0).then(|| div(gy, &ins[0]))],
        Op::SumAll => vec![want(0).then(|| broadcast_from_unit(gy, ins[0].shape()))],
        Op::BroadcastFromUnit(_) => vec![want(0).then(|| sum_all(gy))],
        Op::SumAxis(ax) => {
            vec![want(0).then(|| expand_axis(gy, *ax, ins[0].shape()[*ax]))]
        }
        Op::ExpandAxis(ax, _) => vec![want(0).then(|| sum_axis(gy, *ax))],
        Op::Reshape => vec![want(0).then(|| reshape(gy, ins[0].shape()))],
        Op::Transpose2d => vec![want(0).then(|| transpose2(gy))],
        Op::Concat(ax) => {
            let na = ins[0].shape()[*ax];
            let nb = ins[1].shape()[*ax];
            vec![
                want(0).then(|| slice_axis(gy, *ax, 0, na)),
                want(1).then(|| slice_axis(gy, *ax, na, nb)),
            ]
        }
        Op::SliceAxis { axis, start, len } => vec![want(0).then(|| {
            let total = ins[0].shape()[*axis];
            zero_pad_axis(gy, *axis, *start, total - start - len)
        })],
        Op::ZeroPadAxis { axis, before, .. } => {
            vec![want(0).then(|| slice_axis(gy, *axis, *before, ins[0].shape()[*axis]))]
        }
        Op::MaxAxis(ax) => vec![want(0).then(|| {
            let mask = extreme_mask(&ins[0].0.value.view(), *ax, true);
            mul(&expand_axis(gy, *ax, ins[0].shape()[*ax]), &Var::constant(mask))
        })],
        Op::MinAxis(ax) => vec![want(0).then(|| {
            let mask = extreme_mask(&ins[0].0.value.view(), *ax, false);
            mul(&expand_axis(gy, *ax, ins[0].shape()[*ax]), &Var::constant(mask))
        })],
        Op::Gemm => vec![
            want(0).then(|| gemm_batch_reduce(gy, &ins[1])),
            want(1).then(|| gemm(&transpose2(&ins[0]), gy)),
        ],
        Op::Gemm2d => vec![
            want(0).then(|| gemm2d(gy, &transpose2(&ins[1]))),
            want(1).then(|| gemm2d(&transpose2(&ins[0]), gy)),
        ],
        Op::GemmBatchReduce => vec![
            want(0).then(|| gemm(gy, &ins[1])),
            want(1).then(|| gemm(&transpose2(gy), &ins[0])),
        ],
        Op::Im2Col { k, stride, pad } => vec![want(0).then(|| {
            let shape = ins[0].shape();
            col2im(gy, *k, *stride, *pad, shape[1], shape[2], shape[3])
        })],
        Op::Col2Im { k, stride, pad, .. } => vec![want(0).then(|| im2col(gy, *k, *stride, *pad))],
    }
}

/// One-hot mask of the first per-lane max (or min) along `axis`.
fn extreme_mask(value: &ArrayViewD<'_, f32>, axis: usize, take_max: bool) -> ArrayD<f32> {
    let mut mask = ArrayD::<f32>::zeros(IxDyn(value.shape()));
    let lanes = value.lanes(Axis(axis));
    let mask_lanes = mask.lanes_mut(Axis(axis));
    ndarray::Zip::from(lanes).and(mask_lanes).for_each(|lane, mut m| {
        let mut best = 0usize;
        for (i, v) in lane.iter().enumerate() {
            let better = if take_max { *v > lane[best] } else { *v < lane[best] };
            if better {
                best = i;
            }
        }
        m[best] = 1.0;
    });
    mask
}
