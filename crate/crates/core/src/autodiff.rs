//! Reverse-mode differentiation over a recording tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! cheap `Copy` handle into it. Leaves made with [`Tape::param`] participate
//! in differentiation; leaves made with [`Tape::constant`] do not, and
//! neither does anything computed only from constants.
//!
//! Nodes are appended in evaluation order, so the node list is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, Layout};
use crate::ops::{self, BinaryKind, ConvSpec, UnaryKind};
use crate::tensor::{broadcast_shape, broadcast_to, sum_to_shape, Tensor};

/// Index of a node on its tape.
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryKind, NodeId),
    Binary(BinaryKind, NodeId, NodeId),
    Scale(f64, NodeId),
    Shift(NodeId),
    Matmul(NodeId, NodeId),
    Reshape(NodeId),
    SumAll(NodeId),
    SumTo(NodeId),
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    WrapAngle(NodeId),
    Pad {
        x: NodeId,
        bottom: usize,
        right: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Gradients of a scalar loss with respect to participating leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn owns(&self, v: Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    fn check<'a>(&self, vars: &[Var<'a>]) -> Result<()> {
        if vars.iter().all(|v| self.owns(*v)) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!("concat: axis {axis} >= rank {rank}")));
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let same = v.rank() == rank
                && (0..rank).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(self.push(Tensor::new(&shape, data)?, op, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.owns(loss) {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = BTreeMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |to: NodeId, contrib: Vec<f64>| {
                if !nodes[to].needs_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let wants = |to: NodeId| nodes[to].needs_grad;
            match &node.op {
                Op::Leaf => {
                    out.insert(id, Tensor::new(node.value.shape(), g)?);
                }
                Op::Unary(kind, x) => {
                    let xv = nodes[*x].value.data();
                    let yv = node.value.data();
                    let d = g
                        .iter()
                        .zip(xv.iter().zip(yv))
                        .map(|(gi, (&xi, &yi))| gi * kind.derivative(xi, yi))
                        .collect();
                    send(*x, d);
                }
                Op::Binary(kind, a, b) => {
                    let out_shape = node.value.shape();
                    let av = broadcast_to(&nodes[*a].value, out_shape)?;
                    let bv = broadcast_to(&nodes[*b].value, out_shape)?;
                    let (ad, bd) = (av.data(), bv.data());
                    if wants(*a) {
                        let ga: Vec<f64> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.clone(),
                            BinaryKind::Mul => g.iter().zip(bd).map(|(g, b)| g * b).collect(),
                            BinaryKind::Div => g.iter().zip(bd).map(|(g, b)| g / b).collect(),
                        };
                        send(*a, sum_to_shape(&ga, out_shape, nodes[*a].value.shape()));
                    }
                    if wants(*b) {
                        let gb: Vec<f64> = match kind {
                            BinaryKind::Add => g.clone(),
                            BinaryKind::Sub => g.iter().map(|g| -g).collect(),
                            BinaryKind::Mul => g.iter().zip(ad).map(|(g, a)| g * a).collect(),
                            BinaryKind::Div => g
                                .iter()
                                .zip(ad.iter().zip(bd))
                                .map(|(g, (a, b))| -g * a / (b * b))
                                .collect(),
                        };
                        send(*b, sum_to_shape(&gb, out_shape, nodes[*b].value.shape()));
                    }
                }
                Op::Scale(c, x) => send(*x, g.iter().map(|v| v * c).collect()),
                Op::Shift(x) | Op::Reshape(x) | Op::WrapAngle(x) => send(*x, g),
                Op::Matmul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if wants(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, Layout::Normal, bv.data(), Layout::Transposed, 0.0, &mut da);
                        send(*a, da);
                    }
                    if wants(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), Layout::Transposed, &g, Layout::Normal, 0.0, &mut db);
                        send(*b, db);
                    }
                }
                Op::SumAll(x) => send(*x, vec![g[0]; nodes[*x].value.len()]),
                Op::SumTo(x) => {
                    let gt = Tensor::new(node.value.shape(), g)?;
                    send(*x, broadcast_to(&gt, nodes[*x].value.shape())?.into_vec());
                }
                Op::Narrow { x, axis, start } => {
                    let xs = nodes[*x].value.shape();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut d = vec![0.0; nodes[*x].value.len()];
                    for o in 0..outer {
                        let dst = (o * xs[*axis] + start) * inner;
                        d[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*x, d);
                }
                Op::Concat { parts, axis } => {
                    let s = node.value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.shape()[*axis];
                        if wants(p) {
                            let mut d = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let src = (o * s[*axis] + offset) * inner;
                                d.extend_from_slice(&g[src..src + len * inner]);
                            }
                            send(p, d);
                        }
                        offset += len;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (ck, p) = (geom.patch(), geom.positions());
                    let in_size = geom.c * geom.h * geom.w;
                    let out_size = geom.out_ch * p;
                    if let Some(b) = b {
                        if wants(*b) {
                            let mut db = vec![0.0; geom.out_ch];
                            for (i, row) in g.chunks(p).enumerate() {
                                db[i % geom.out_ch] += row.iter().sum::<f64>();
                            }
                            send(*b, db);
                        }
                    }
                    if wants(*w) {
                        let mut dw = vec![0.0; geom.out_ch * ck];
                        let mut scratch = Vec::new();
                        for s in 0..geom.n {
                            let c: &[f64] = match cols {
                                Some(c) => &c[s * ck * p..(s + 1) * ck * p],
                                None => {
                                    scratch.resize(ck * p, 0.0);
                                    let xs = &nodes[*x].value.data()[s * in_size..(s + 1) * in_size];
                                    im2col(xs, geom, &mut scratch);
                                    &scratch
                                }
                            };
                            let gs = &g[s * out_size..(s + 1) * out_size];
                            gemm(geom.out_ch, p, ck, gs, Layout::Normal, c, Layout::Transposed, 1.0, &mut dw);
                        }
                        send(*w, dw);
                    }
                    if wants(*x) {
                        let wv = nodes[*w].value.data();
                        let mut dx = vec![0.0; geom.n * in_size];
                        let mut dcols = vec![0.0; ck * p];
                        for s in 0..geom.n {
                            let gs = &g[s * out_size..(s + 1) * out_size];
                            gemm(ck, geom.out_ch, p, wv, Layout::Transposed, gs, Layout::Normal, 0.0, &mut dcols);
                            col2im(&dcols, geom, &mut dx[s * in_size..(s + 1) * in_size]);
                        }
                        send(*x, dx);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut d = vec![0.0; nodes[*x].value.len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        d[src] += gi;
                    }
                    send(*x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = nodes[*x].value.shape();
                    let hw = xs[2] * xs[3];
                    let d = g
                        .iter()
                        .flat_map(|&gi| std::iter::repeat(gi / hw as f64).take(hw))
                        .collect();
                    send(*x, d);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                    let fout = wv.shape()[0];
                    if wants(*b) {
                        let mut db = vec![0.0; fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        send(*b, db);
                    }
                    if wants(*w) {
                        let mut dw = vec![0.0; fout * fin];
                        gemm(fout, n, fin, &g, Layout::Transposed, xv.data(), Layout::Normal, 0.0, &mut dw);
                        send(*w, dw);
                    }
                    if wants(*x) {
                        let mut dx = vec![0.0; n * fin];
                        gemm(n, fout, fin, &g, Layout::Normal, wv.data(), Layout::Normal, 0.0, &mut dx);
                        send(*x, dx);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] -= scale;
                    }
                    send(*logits, d);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = nodes[*x].value.data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &v)| if v < *lo || v > *hi { 0.0 } else { *gi })
                        .collect();
                    send(*x, d);
                }
                Op::Pad { x, bottom, right } => {
                    let xs = nodes[*x].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let wp = w + right;
                    let mut d = Vec::with_capacity(nodes[*x].value.len());
                    for plane in g.chunks(wp * (h + bottom)) {
                        for r in 0..h {
                            d.extend_from_slice(&plane[r * wp..r * wp + w]);
                        }
                    }
                    send(*x, d);
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Wraps an angle into `(-pi, pi]`. Odd apart from the endpoint, so
/// `wrap_angle(-a)^2 == wrap_angle(a)^2` exactly.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    if a > -PI && a <= PI {
        return a;
    }
    // `%` is exact, so the reduction loses nothing beyond the rounding of TAU
    let mut r = a.abs() % TAU;
    if r > PI {
        r -= TAU;
    }
    let w = if a < 0.0 { -r } else { r };
    if w <= -PI {
        PI
    } else {
        w
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if self.tape.owns(other) {
            Ok(())
        } else {
            Err(Error::NotOnTape)
        }
    }

    fn derive(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'t> {
        let needs = inputs.iter().any(|&i| self.tape.needs(i));
        self.tape.push(value, op, needs)
    }

    pub fn unary(self, kind: UnaryKind) -> Var<'t> {
        let y = ops::ew_unary(kind, &self.value());
        self.derive(y, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(UnaryKind::Neg)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(UnaryKind::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(UnaryKind::Cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn binary(self, kind: BinaryKind, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let y = ops::ew_binary(kind, &self.value(), &other.value())?;
        Ok(self.derive(y, Op::Binary(kind, self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryKind::Div, other)
    }

    /// `c * self`.
    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v * c);
        self.derive(y, Op::Scale(c, self.id), &[self.id])
    }

    /// `self + c`.
    pub fn shift(self, c: f64) -> Var<'t> {
        let y = self.value().map(|v| v + c);
        self.derive(y, Op::Shift(self.id), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let y = ops::matmul(&self.value(), &other.value())?;
        Ok(self.derive(y, Op::Matmul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self.derive(y, Op::Reshape(self.id), &[self.id]))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let y = Tensor::scalar(self.value().sum());
        self.derive(y, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums broadcast dimensions away so the result has `shape`; the adjoint
    /// of broadcasting `shape` up to `self`'s shape.
    pub fn sum_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        match broadcast_shape(shape, v.shape()) {
            Some(s) if s == v.shape() => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "sum_to",
                    lhs: v.shape().to_vec(),
                    rhs: shape.to_vec(),
                })
            }
        }
        let y = Tensor::new(shape, sum_to_shape(v.data(), v.shape(), shape))?;
        Ok(self.derive(y, Op::SumTo(self.id), &[self.id]))
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::InvalidArgument(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v.data()[src..src + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let y = Tensor::new(&shape, data)?;
        Ok(self.derive(
            y,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    /// Elementwise clamp; the gradient is passed through inside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let y = self.value().map(|v| v.clamp(lo, hi));
        self.derive(
            y,
            Op::Clamp {
                x: self.id,
                lo,
                hi,
            },
            &[self.id],
        )
    }

    /// Wraps every element into `(-pi, pi]`. Piecewise a shift by a multiple
    /// of `2 pi`, so the derivative is 1 almost everywhere.
    pub fn wrap_angle(self) -> Var<'t> {
        let y = self.value().map(wrap_angle);
        self.derive(y, Op::WrapAngle(self.id), &[self.id])
    }

    /// Zero-pads an `[N, C, H, W]` tensor at the bottom and right.
    pub fn pad2d(self, bottom: usize, right: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 4 {
            return Err(Error::InvalidArgument(format!("pad2d: expected rank 4, got {:?}", v.shape())));
        }
        if bottom == 0 && right == 0 {
            return Ok(self);
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let (hp, wp) = (h + bottom, w + right);
        let mut data = vec![0.0; n * c * hp * wp];
        for (plane, src) in v.data().chunks(h * w).enumerate() {
            for r in 0..h {
                let dst = plane * hp * wp + r * wp;
                data[dst..dst + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let y = Tensor::new(&[n, c, hp, wp], data)?;
        Ok(self.derive(
            y,
            Op::Pad {
                x: self.id,
                bottom,
                right,
            },
            &[self.id],
        ))
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, spec: ConvSpec) -> Result<Var<'t>> {
        self.same_tape(w)?;
        if let Some(b) = b {
            self.same_tape(b)?;
        }
        let (xv, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let keep = w.requires_grad();
        let (y, cols) = ops::conv2d_forward(&xv, &wv, bv.as_ref(), spec, keep)?;
        let geom = ops::conv_geometry(&xv, &wv, spec)?;
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        let op = Op::Conv2d {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
            cols,
        };
        Ok(self.derive(y, op, &inputs))
    }

    pub fn max_pool2d(self, k: usize) -> Result<Var<'t>> {
        let (y, argmax) = ops::max_pool2d_forward(&self.value(), k)?;
        Ok(self.derive(y, Op::MaxPool { x: self.id, argmax }, &[self.id]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let y = ops::global_avg_pool_forward(&self.value())?;
        Ok(self.derive(y, Op::GlobalAvgPool(self.id), &[self.id]))
    }

    /// `self w^T + b` for `self: [N, in]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w)?;
        self.same_tape(b)?;
        let y = ops::linear_forward(&self.value(), &w.value(), &b.value())?;
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.id,
        };
        Ok(self.derive(y, op, &[self.id, w.id, b.id]))
    }

    /// Mean cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = ops::softmax_ce_forward(&self.value(), labels)?;
        let op = Op::SoftmaxCe {
            logits: self.id,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.derive(Tensor::scalar(loss), op, &[self.id]))
    }
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar function `f` at `x`, over every component:
/// `|ad - cd| / max(1, |cd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(&f, x, eps, &coords)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_coords<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("grad_check: eps must be positive".into()));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv)?;
    let grads = tape.backward(loss)?;
    let ad = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(Tensor::new(x.shape(), data)?);
        f(&tape, v)?.value().item()
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((ad.data()[i] - cd).abs() / cd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let g = tape.backward(x.square()).unwrap();
        assert!((g.get(x).unwrap().item().unwrap() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let g = tape.backward(x.sigmoid()).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(x.mul(c).unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 5.0);
        assert!(g.get(c).is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
        let other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::NotOnTape)));
        assert!(matches!(x.add(y), Err(Error::NotOnTape)));
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!((g.get(x).unwrap().item().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn sum_of_squares_check() {
        let x = Tensor::from_fn(&[7], |i| (i as f64 * 0.7).sin());
        let err = grad_check(|_, v| Ok(v.square().sum()), &x, 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}
