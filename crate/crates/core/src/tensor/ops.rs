//! Forward definitions of every taped op.

use std::cell::Ref;

use super::graph::{permute_index, split_axis, BroadcastIndex, Op, UnaryKind};
use super::kernels::{self, ConvGeom};
use super::{numel, Graph, Tensor, Var};
use crate::error::{Error, Result};

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value. Drop it before creating new ops.
    pub fn value(&self) -> Ref<'g, Tensor> {
        Ref::map(self.graph.nodes(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn emit(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'g> {
        let rg = parents.iter().any(|&p| self.graph.requires_grad(p));
        self.graph.push(value, op, rg)
    }

    fn broadcast(&self, other: &Var<'g>, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_graph(other);
        let (a, b) = (self.value(), other.value());
        let bi = BroadcastIndex::new(a.shape(), b.shape())?;
        let mut out = vec![0.0; numel(bi.out_shape())];
        let (av, bv) = (a.data(), b.data());
        if a.shape() == b.shape() {
            for i in 0..out.len() {
                out[i] = f(av[i], bv[i]);
            }
        } else {
            bi.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
        }
        Ok(Tensor::from_parts(bi.out_shape().to_vec(), out))
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.broadcast(other, |a, b| a + b)?;
        Ok(self.emit(t, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.broadcast(other, |a, b| a - b)?;
        Ok(self.emit(t, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let t = self.broadcast(other, |a, b| a * b)?;
        Ok(self.emit(t, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let t = self.map_value(|v| v * s);
        self.emit(t, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let t = self.map_value(|v| v + s);
        self.emit(t, Op::AddScalar(self.id), &[self.id])
    }

    fn map_value(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn unary(&self, kind: UnaryKind) -> Var<'g> {
        let t = self.map_value(|x| super::graph::unary_fwd(kind, x));
        self.emit(t, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu6(&self) -> Var<'g> {
        self.unary(UnaryKind::Relu6)
    }

    pub fn gelu(&self) -> Var<'g> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(UnaryKind::Log)
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(UnaryKind::Abs)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(UnaryKind::Square)
    }

    /// Sum of all elements, shape `[]`. Sequential row-major order.
    pub fn sum(&self) -> Var<'g> {
        let s = self.value().data().iter().fold(0.0, |a, &b| a + b);
        self.emit(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let t = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::shape(format!("axis {axis} for shape {:?}", v.shape())));
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let d = v.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + k) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        Ok(self.emit(t, Op::SumAxis { input: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let len = self.value().shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        Ok(self.emit(t, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let t = {
            let v = self.value();
            let mut seen = vec![false; v.rank()];
            if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::shape(format!("bad permutation {perm:?} for {:?}", v.shape())));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
            let mut out = vec![0.0; v.numel()];
            let d = v.data();
            permute_index(v.shape(), perm, |o, s| out[o] = d[s]);
            Tensor::from_parts(shape, out)
        };
        Ok(self.emit(t, Op::Permute { input: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let t = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape(format!("concat axis {axis} for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::shape(format!("concat {:?} with {base:?} on axis {axis}", s)));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::from_parts(shape, out)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(t, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let t = {
            let v = self.value();
            if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
                return Err(Error::shape(format!(
                    "narrow axis {axis} [{start}, {}) of {:?}",
                    start + len,
                    v.shape()
                )));
            }
            let (outer, total, inner) = split_axis(v.shape(), axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&v.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.emit(t, Op::Narrow { input: self.id, axis, start }, &[self.id]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let t = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.emit(t, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bmm(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other);
        let t = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::shape(format!("bmm {sa:?} x {sb:?}")));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; bs * m * n];
            for t in 0..bs {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &a.data()[t * m * k..(t + 1) * m * k],
                    &b.data()[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    false,
                );
            }
            Tensor::from_parts(vec![bs, m, n], out)
        };
        Ok(self.emit(t, Op::BatchMatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Grouped 2-D cross-correlation, zero padding, no bias.
    /// `x: [N,Cin,H,W]`, `w: [Cout, Cin/groups, kh, kw]`.
    pub fn conv2d(&self, w: &Var<'g>, stride: (usize, usize), pad: (usize, usize), groups: usize) -> Result<Var<'g>> {
        self.same_graph(w);
        let t = {
            let (x, wt) = (self.value(), w.value());
            let (xs, ws) = (x.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 {
                return Err(Error::shape(format!("conv2d input {xs:?} weight {ws:?}")));
            }
            let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cg != c_in / groups {
                return Err(Error::shape(format!(
                    "conv2d groups {groups}: input channels {c_in}, weight {ws:?}"
                )));
            }
            let geom = ConvGeom { c_in, h, w: wd, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
            let (oh, ow) = geom.output_hw().ok_or_else(|| {
                Error::EmptyOutput(format!("{h}x{wd} input, {kh}x{kw} kernel, pad {pad:?}"))
            })?;
            let og = c_out / groups;
            let krows = cg * kh * kw;
            let ncols = oh * ow;
            let mut out = vec![0.0; n * c_out * ncols];
            let mut cols = vec![0.0; krows * ncols];
            let img = c_in * h * wd;
            for b in 0..n {
                for grp in 0..groups {
                    kernels::im2col(&x.data()[b * img..(b + 1) * img], &geom, grp * cg, cg, oh, ow, &mut cols);
                    kernels::gemm_nn(
                        og,
                        krows,
                        ncols,
                        &wt.data()[grp * og * krows..(grp + 1) * og * krows],
                        &cols,
                        &mut out[(b * c_out + grp * og) * ncols..(b * c_out + (grp + 1) * og) * ncols],
                        false,
                    );
                }
            }
            Tensor::from_parts(vec![n, c_out, oh, ow], out)
        };
        Ok(self.emit(t, Op::Conv2d { x: self.id, w: w.id, stride, pad, groups }, &[self.id, w.id]))
    }

    /// Bilinear sampling of `x: [N,C,H,W]` at continuous `(row, col)`
    /// coordinates `coords: [N,P,2]`, zero outside the image. Output `[N,C,P]`.
    pub fn bilinear_sample(&self, coords: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(coords);
        let t = {
            let (x, c) = (self.value(), coords.value());
            let (xs, cs) = (x.shape(), c.shape());
            if xs.len() != 4 || cs.len() != 3 || cs[0] != xs[0] || cs[2] != 2 {
                return Err(Error::shape(format!("bilinear_sample x {xs:?} coords {cs:?}")));
            }
            let (n, ch, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let p = cs[1];
            let out = kernels::bilinear_forward(x.data(), c.data(), n, ch, h, w, p);
            Tensor::from_parts(vec![n, ch, p], out)
        };
        Ok(self.emit(t, Op::Bilinear { x: self.id, coords: coords.id }, &[self.id, coords.id]))
    }

    /// Training-mode batch norm over `[N,C,H,W]`. Returns the output and
    /// the biased batch mean and variance per channel.
    pub fn batch_norm_train(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<(Var<'g>, Vec<f64>, Vec<f64>)> {
        let (t, xhat, inv_std, mean, var) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let s = x.shape();
            if s.len() != 4 || gm.shape() != [s[1]] || bt.shape() != [s[1]] {
                return Err(Error::shape(format!(
                    "batch_norm x {s:?} gamma {:?} beta {:?}",
                    gm.shape(),
                    bt.shape()
                )));
            }
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m = (n * hw) as f64;
            let d = x.data();
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for &v in &d[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        mean[ch] += v;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for b in 0..n {
                for ch in 0..c {
                    for &v in &d[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        var[ch] += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; d.len()];
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                        out[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                    }
                }
            }
            (Tensor::from_parts(s.to_vec(), out), xhat, inv_std, mean, var)
        };
        let op = Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        Ok((self.emit(t, op, &[self.id, gamma.id, beta.id]), mean, var))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&self, gamma: &Var<'g>, beta: &Var<'g>, mean: &[f64], var: &[f64], eps: f64) -> Result<Var<'g>> {
        let (t, scale, xhat) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let s = x.shape();
            if s.len() != 4 || gm.shape() != [s[1]] || bt.shape() != [s[1]] || mean.len() != s[1] || var.len() != s[1] {
                return Err(Error::shape(format!("batch_norm_eval x {s:?}")));
            }
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let scale: Vec<f64> = (0..c).map(|ch| gm.data()[ch] * inv[ch]).collect();
            let d = x.data();
            let mut xhat = vec![0.0; d.len()];
            let mut out = vec![0.0; d.len()];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                        xhat[i] = (d[i] - mean[ch]) * inv[ch];
                        out[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                    }
                }
            }
            (Tensor::from_parts(s.to_vec(), out), scale, xhat)
        };
        let op = Op::AffineChannel { x: self.id, gamma: gamma.id, beta: beta.id, scale, xhat };
        Ok(self.emit(t, op, &[self.id, gamma.id, beta.id]))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (t, xhat, inv_std) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let s = x.shape();
            let d = *s.last().ok_or_else(|| Error::shape("layer_norm on scalar"))?;
            if gm.shape() != [d] || bt.shape() != [d] {
                return Err(Error::shape(format!(
                    "layer_norm x {s:?} gamma {:?} beta {:?}",
                    gm.shape(),
                    bt.shape()
                )));
            }
            let xs = x.data();
            let rows = xs.len() / d;
            let mut xhat = vec![0.0; xs.len()];
            let mut out = vec![0.0; xs.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let i = r * d + j;
                    xhat[i] = (xs[i] - mean) * inv;
                    out[i] = gm.data()[j] * xhat[i] + bt.data()[j];
                }
            }
            (Tensor::from_parts(s.to_vec(), out), xhat, inv_std)
        };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        Ok(self.emit(t, op, &[self.id, gamma.id, beta.id]))
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Var<'g>> {
        let t = {
            let v = self.value();
            let d = *v.shape().last().ok_or_else(|| Error::shape("softmax on scalar"))?;
            let xs = v.data();
            let mut out = vec![0.0; xs.len()];
            for r in 0..xs.len() / d {
                let row = &xs[r * d..(r + 1) * d];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..d {
                    let e = (row[j] - mx).exp();
                    out[r * d + j] = e;
                    s += e;
                }
                for j in 0..d {
                    out[r * d + j] /= s;
                }
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        };
        Ok(self.emit(t, Op::Softmax(self.id), &[self.id]))
    }

    /// Mean softmax cross-entropy of `[N,C]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g>> {
        let (loss, probs) = {
            let v = self.value();
            let s = v.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(Error::shape(format!("cross_entropy logits {s:?}, {} labels", labels.len())));
            }
            let c = s[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::LabelOutOfRange { label: bad, classes: c });
            }
            let xs = v.data();
            let mut probs = vec![0.0; xs.len()];
            let mut loss = 0.0;
            for (r, &lab) in labels.iter().enumerate() {
                let row = &xs[r * c..(r + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                let lse = mx + sum.ln();
                loss += lse - row[lab];
                for j in 0..c {
                    probs[r * c + j] = (row[j] - lse).exp();
                }
            }
            (loss / labels.len() as f64, probs)
        };
        let op = Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs };
        Ok(self.emit(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Mean elementwise sigmoid binary cross-entropy against `{0,1}` targets.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var<'g>> {
        let loss = {
            let v = self.value();
            if v.numel() != targets.len() {
                return Err(Error::shape(format!("bce logits {:?}, {} targets", v.shape(), targets.len())));
            }
            let xs = v.data();
            let mut total = 0.0;
            for (x, y) in xs.iter().zip(targets) {
                total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            }
            total / xs.len() as f64
        };
        let op = Op::BceWithLogits { logits: self.id, targets: targets.to_vec() };
        Ok(self.emit(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Cumulative sum anchored at the center index of `axis` (which must
    /// have odd length): `out[c] = 0`, `out[i] = out[i-1] + in[i]` above the
    /// center, `out[i] = out[i+1] - in[i]` below it.
    pub fn centered_cumsum(&self, axis: usize) -> Result<Var<'g>> {
        let t = {
            let v = self.value();
            if axis >= v.rank() {
                return Err(Error::shape(format!("axis {axis} for {:?}", v.shape())));
            }
            let (outer, k, inner) = split_axis(v.shape(), axis);
            if k % 2 == 0 {
                return Err(Error::EvenK(k));
            }
            let c = k / 2;
            let xs = v.data();
            let mut out = vec![0.0; xs.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * k + j) * inner + i;
                    for j in c + 1..k {
                        out[at(j)] = out[at(j - 1)] + xs[at(j)];
                    }
                    for j in (0..c).rev() {
                        out[at(j)] = out[at(j + 1)] - xs[at(j)];
                    }
                }
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        };
        Ok(self.emit(t, Op::CenteredCumsum { input: self.id, axis }, &[self.id]))
    }
}
