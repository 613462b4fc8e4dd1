//! Reverse-mode tape.
//!
//! A [`Graph`] is an append-only list of nodes. Parents always have lower
//! ids than their children, so the node order is already a topological
//! order and backward is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::kernels::{self, Bilinear, ConvGeom};
use super::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu6,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, UnaryKind),
    Sum(usize),
    SumAxis { input: usize, axis: usize },
    Reshape(usize),
    Permute { input: usize, perm: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Conv2d { x: usize, w: usize, stride: (usize, usize), pad: (usize, usize), groups: usize },
    Bilinear { x: usize, coords: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    AffineChannel { x: usize, gamma: usize, beta: usize, scale: Vec<f64>, xhat: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: usize, targets: Vec<f64> },
    CenteredCumsum { input: usize, axis: usize },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only autodiff tape. Single-writer; not `Sync`.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    nonfinite: RefCell<Vec<usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn input(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Leaf that always receives a gradient.
    pub fn param(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Ids of nodes whose forward value contained NaN/Inf (recorded in
    /// debug builds only).
    pub fn nonfinite_nodes(&self) -> Vec<usize> {
        self.nonfinite.borrow().clone()
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if cfg!(debug_assertions) && !value.is_finite() {
            log::warn!("non-finite value produced by node {id} ({op:?})");
            self.nonfinite.borrow_mut().push(id);
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Hash of which side of every non-smooth point each piecewise op sits
    /// on (ReLU6 and |x| regions, bilinear cells). Two evaluations with equal
    /// signatures lie in the same smooth piece.
    pub(crate) fn kink_signature(&self) -> u64 {
        let nodes = self.nodes.borrow();
        let mut h = DefaultHasher::new();
        for node in nodes.iter() {
            match &node.op {
                Op::Unary(a, UnaryKind::Relu6) => {
                    for &v in nodes[*a].value.data() {
                        let region: u8 = if v < 0.0 { 0 } else if v == 0.0 { 1 } else if v < 6.0 { 2 } else if v == 6.0 { 3 } else { 4 };
                        region.hash(&mut h);
                    }
                }
                Op::Unary(a, UnaryKind::Abs) => {
                    for &v in nodes[*a].value.data() {
                        v.partial_cmp(&0.0).hash(&mut h);
                    }
                }
                Op::Bilinear { coords, .. } => {
                    for &v in nodes[*coords].value.data() {
                        (v.floor() as i64).hash(&mut h);
                        (v == v.floor()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss` (shape `[]` or `[1]`).
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if shape.len() > 1 || numel(&shape) != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backprop(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes[..=loss.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a backward pass: a gradient for every node that lies on a
/// path to the loss.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` is disconnected.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(self.shapes[v.id].clone(), g.clone()),
            None => Tensor::zeros(&v.shape()),
        }
    }

    pub fn is_connected(&self, v: Var<'_>) -> bool {
        matches!(self.grads.get(v.id), Some(Some(_)))
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

/// Output-order pairs of flat indices into two broadcast operands.
pub(crate) struct BroadcastIndex {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastIndex {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")));
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        Ok(Self {
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            out_shape,
        })
    }

    pub(crate) fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total = numel(&self.out_shape);
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

pub(crate) fn unary_fwd(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu6 => x.clamp(0.0, 6.0),
        UnaryKind::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Square => x * x,
        UnaryKind::Sqrt => x.sqrt(),
    }
}

/// Derivative given input `x` and output `y`. ReLU6 and |x| use 0 at kinks.
fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Relu6 => {
            if x > 0.0 && x < 6.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        UnaryKind::Tanh => 1.0 - y * y,
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Sqrt => 0.5 / y,
    }
}

/// Strides of a row-major shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Calls `f(out_flat, in_flat)` for a permutation of `in_shape` by `perm`.
pub(crate) fn permute_index(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_st = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let rank = out_shape.len();
    let total = numel(&out_shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// (outer, axis, inner) decomposition for axis-wise ops.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let bi = BroadcastIndex::new(val(*a).shape(), val(*b).shape()).unwrap();
            if let Some(ga) = acc(grads, nodes, *a) {
                bi.for_each(|o, ia, _| ga[ia] += g[o]);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                bi.for_each(|o, _, ib| gb[ib] += sign * g[o]);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bi = BroadcastIndex::new(val(*a).shape(), val(*b).shape()).unwrap();
            if let Some(ga) = acc(grads, nodes, *a) {
                bi.for_each(|o, ia, ib| ga[ia] += g[o] * bv[ib]);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                bi.for_each(|o, ia, ib| gb[ib] += g[o] * av[ia]);
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += s * gv;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for (x, gv) in ga.iter_mut().zip(g) {
                    *x += gv;
                }
            }
        }
        Op::Unary(a, kind) => {
            let xs = val(*a).data();
            let ys = node.value.data();
            if let Some(ga) = acc(grads, nodes, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] * unary_grad(*kind, xs[i], ys[i]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, nodes, *a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::SumAxis { input, axis } => {
            let (outer, len, inner) = split_axis(val(*input).shape(), *axis);
            if let Some(ga) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[(o * len + k) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Permute { input, perm } => {
            if let Some(ga) = acc(grads, nodes, *input) {
                permute_index(val(*input).shape(), perm, |o, s| ga[s] += g[o]);
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if let Some(ga) = acc(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut ga[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            let (outer, total, inner) = split_axis(val(*input).shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(ga) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    let dst = &mut ga[(o * total + start) * inner..(o * total + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(grads, nodes, *a) {
                kernels::gemm_nt_acc(m, n, k, g, bv, ga);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                kernels::gemm_tn_acc(k, m, n, av, g, gb);
            }
        }
        Op::BatchMatMul(a, b) => {
            let sa = val(*a).shape();
            let (bsz, m, k) = (sa[0], sa[1], sa[2]);
            let n = val(*b).shape()[2];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for t in 0..bsz {
                    kernels::gemm_nt_acc(
                        m,
                        n,
                        k,
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for t in 0..bsz {
                    kernels::gemm_tn_acc(
                        k,
                        m,
                        n,
                        &av[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[t * k * n..(t + 1) * k * n],
                    );
                }
            }
        }
        Op::Conv2d { x, w, stride, pad, groups } => {
            conv2d_backward(nodes, id, *x, *w, *stride, *pad, *groups, g, grads);
        }
        Op::Bilinear { x, coords } => {
            let xs = val(*x).shape();
            let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let p = val(*coords).shape()[1];
            let xv = val(*x).data();
            let cv = val(*coords).data();
            let plane = h * w;
            let want_x = nodes[*x].requires_grad;
            let want_c = nodes[*coords].requires_grad;
            let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
            let mut gc = if want_c { vec![0.0; cv.len()] } else { Vec::new() };
            for b in 0..n {
                for q in 0..p {
                    let off = (b * p + q) * 2;
                    let bl = Bilinear::new(cv[off], cv[off + 1], h, w);
                    for ch in 0..c {
                        let go = g[(b * c + ch) * p + q];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (b * c + ch) * plane;
                        if want_x {
                            for k in 0..4 {
                                if let Some(i) = bl.idx[k] {
                                    gx[base + i] += go * bl.wgt[k];
                                }
                            }
                        }
                        if want_c {
                            let (dy, dx) = bl.coord_grad(&xv[base..base + plane]);
                            gc[off] += go * dy;
                            gc[off + 1] += go * dx;
                        }
                    }
                }
            }
            if let Some(ga) = acc(grads, nodes, *x) {
                add_into(ga, &gx);
            }
            if let Some(ga) = acc(grads, nodes, *coords) {
                add_into(ga, &gc);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
            let s = val(*x).shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m = (n * hw) as f64;
            let gam = val(*gamma).data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let k = gam[ch] * inv_std[ch] / m;
                        for i in base..base + hw {
                            gx[i] += k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                add_into(gg, &sum_gx);
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                add_into(gb, &sum_g);
            }
        }
        Op::AffineChannel { x, gamma, beta, scale, xhat } => {
            let s = val(*x).shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            if let Some(gx) = acc(grads, nodes, *x) {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            gx[i] += g[i] * scale[ch];
                        }
                    }
                }
            }
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g[ch] += g[i];
                        sum_gx[ch] += g[i] * xhat[i];
                    }
                }
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                add_into(gg, &sum_gx);
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                add_into(gb, &sum_g);
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = *val(*x).shape().last().unwrap();
            let rows = xhat.len() / d;
            let gam = val(*gamma).data();
            let df = d as f64;
            let mut sum_gg = vec![0.0; d];
            let mut sum_gb = vec![0.0; d];
            let mut gx = vec![0.0; xhat.len()];
            for r in 0..rows {
                let row = r * d..(r + 1) * d;
                let (mut s1, mut s2) = (0.0, 0.0);
                for (j, i) in row.clone().enumerate() {
                    let dxh = g[i] * gam[j];
                    s1 += dxh;
                    s2 += dxh * xhat[i];
                    sum_gg[j] += g[i] * xhat[i];
                    sum_gb[j] += g[i];
                }
                for (j, i) in row.enumerate() {
                    let dxh = g[i] * gam[j];
                    gx[i] = inv_std[r] / df * (df * dxh - s1 - xhat[i] * s2);
                }
            }
            if let Some(ga) = acc(grads, nodes, *x) {
                add_into(ga, &gx);
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                add_into(gg, &sum_gg);
            }
            if let Some(gb) = acc(grads, nodes, *beta) {
                add_into(gb, &sum_gb);
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            if let Some(ga) = acc(grads, nodes, *a) {
                for r in 0..y.len() / d {
                    let row = r * d..(r + 1) * d;
                    let dot: f64 = row.clone().map(|i| g[i] * y[i]).sum();
                    for i in row {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = val(*logits).shape()[1];
            let n = labels.len() as f64;
            if let Some(ga) = acc(grads, nodes, *logits) {
                for (r, &lab) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == lab { 1.0 } else { 0.0 };
                        ga[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                    }
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let xs = val(*logits).data();
            let n = xs.len() as f64;
            if let Some(ga) = acc(grads, nodes, *logits) {
                for i in 0..xs.len() {
                    let s = 1.0 / (1.0 + (-xs[i]).exp());
                    ga[i] += g[0] * (s - targets[i]) / n;
                }
            }
        }
        Op::CenteredCumsum { input, axis } => {
            let (outer, k, inner) = split_axis(val(*input).shape(), *axis);
            let center = k / 2;
            if let Some(ga) = acc(grads, nodes, *input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * k + j) * inner + i;
                        let mut run = 0.0;
                        for j in (center + 1..k).rev() {
                            run += g[at(j)];
                            ga[at(j)] += run;
                        }
                        let mut run = 0.0;
                        for j in 0..center {
                            run += g[at(j)];
                            ga[at(j)] -= run;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    id: usize,
    x: usize,
    w: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let xs = nodes[x].value.shape().to_vec();
    let ws = nodes[w].value.shape().to_vec();
    let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let os = nodes[id].value.shape();
    let (oh, ow) = (os[2], os[3]);
    let geom = ConvGeom { c_in, h, w: wd, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
    let og = c_out / groups;
    let krows = cg * kh * kw;
    let ncols = oh * ow;
    let xv = nodes[x].value.data();
    let wv = nodes[w].value.data();
    let want_x = nodes[x].requires_grad;
    let want_w = nodes[w].requires_grad;
    let mut gx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };
    let mut gw = if want_w { vec![0.0; wv.len()] } else { Vec::new() };
    let mut cols = vec![0.0; krows * ncols];
    let mut dcols = vec![0.0; krows * ncols];
    let img = c_in * h * wd;
    for b in 0..n {
        let ximg = &xv[b * img..(b + 1) * img];
        for grp in 0..groups {
            let gy = &g[(b * c_out + grp * og) * ncols..(b * c_out + (grp + 1) * og) * ncols];
            let wg = &wv[grp * og * krows..(grp + 1) * og * krows];
            if want_w {
                kernels::im2col(ximg, &geom, grp * cg, cg, oh, ow, &mut cols);
                kernels::gemm_nt_acc(og, ncols, krows, gy, &cols, &mut gw[grp * og * krows..(grp + 1) * og * krows]);
            }
            if want_x {
                dcols.fill(0.0);
                kernels::gemm_tn_acc(krows, og, ncols, wg, gy, &mut dcols);
                kernels::col2im_acc(&dcols, &geom, grp * cg, cg, oh, ow, &mut gx[b * img..(b + 1) * img]);
            }
        }
    }
    if let Some(ga) = acc(grads, nodes, x) {
        add_into(ga, &gx);
    }
    if let Some(ga) = acc(grads, nodes, w) {
        add_into(ga, &gw);
    }
}

