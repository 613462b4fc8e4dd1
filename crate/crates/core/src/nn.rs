//! Parameterized layers: convolutions, normalization, linear maps,
//! multi-head self-attention and the feed-forward sublayer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::cost::CostRow;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding, dense, no bias.
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self { c_in, c_out, kernel: (k, k), stride: (1, 1), pad: (k / 2, k / 2), groups: 1, bias: false }
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self::new(c_in, c_out, 1)
    }

    pub fn depthwise(c: usize, k: usize) -> Self {
        Self { groups: c, ..Self::new(c, c, k) }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn pad(mut self, ph: usize, pw: usize) -> Self {
        self.pad = (ph, pw);
        self
    }

    pub fn kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn num_params(&self) -> u64 {
        let w = self.weight_shape().iter().product::<usize>();
        (w + if self.bias { self.c_out } else { 0 }) as u64
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let g = ConvGeom {
            c_in: self.c_in,
            h,
            w,
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            ph: self.pad.0,
            pw: self.pad.1,
        };
        g.output_hw()
            .ok_or_else(|| Error::EmptyOutput(format!("{h}x{w} input, kernel {:?}, pad {:?}", self.kernel, self.pad)))
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::shape(format!(
                "groups {} must divide channels {} -> {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let fan_in = ws[1] * ws[2] * ws[3];
        let w = uniform(rng, &ws, (6.0 / fan_in as f64).sqrt());
        Ok(Self::with_weight(store, name, spec, w))
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::with_weight(store, name, spec, Tensor::zeros(&spec.weight_shape())))
    }

    fn with_weight(store: &mut ParamStore, name: &str, spec: ConvSpec, w: Tensor) -> Self {
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.c_out]), ParamKind::NoDecay));
        Self { name: name.to_string(), spec, weight, bias }
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = &self.spec;
        let y = cx.metered(&self.name, || x.conv2d(&cx.param(self.weight), s.stride, s.pad, s.groups))?;
        match self.bias {
            None => Ok(y),
            Some(b) => y.add(&cx.param(b).reshape(&[s.c_out, 1, 1])?),
        }
    }

    /// Static cost for one `[C,H,W]` input image.
    pub fn cost(&self, input: [usize; 3]) -> Result<CostRow> {
        let (oh, ow) = self.spec.output_hw(input[1], input[2])?;
        let ws = self.spec.weight_shape();
        let macs = (ws.iter().product::<usize>() * oh * ow) as u64;
        Ok(CostRow::new(&self.name, "conv", self.spec.num_params(), macs, vec![self.spec.c_out, oh, ow]))
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input[0] != self.spec.c_in {
            return Err(Error::shape(format!("{}: expects {} channels, got {}", self.name, self.spec.c_in, input[0])));
        }
        let (oh, ow) = self.spec.output_hw(input[1], input[2])?;
        Ok([self.spec.c_out, oh, ow])
    }
}

/// Batch normalization over `[N,C,H,W]` with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = [channels];
        Self {
            name: name.to_string(),
            channels,
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&c), ParamKind::NoDecay),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&c), ParamKind::NoDecay),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&c), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&c), ParamKind::Buffer),
        }
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update (momentum 0.1, unbiased variance); eval mode uses the stored
    /// statistics.
    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let (gamma, beta) = (cx.param(self.gamma), cx.param(self.beta));
        let rm = cx.store.get(self.running_mean).data();
        let rv = cx.store.get(self.running_var).data();
        if !cx.is_train() {
            return x.batch_norm_eval(&gamma, &beta, rm, rv, NORM_EPS);
        }
        let (y, mean, var) = x.batch_norm_train(&gamma, &beta, NORM_EPS)?;
        let s = x.shape();
        let m = (s[0] * s[2] * s[3]) as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b).collect();
        let new_var = rv.iter().zip(&var).map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * unbias).collect();
        cx.push_stat_update(self.running_mean, new_mean);
        cx.push_stat_update(self.running_var, new_var);
        Ok(y)
    }

    pub fn cost(&self, shape: [usize; 3]) -> CostRow {
        CostRow::new(&self.name, "norm", 2 * self.channels as u64, 0, shape.to_vec())
    }
}

/// Convolution followed by batch norm and an optional ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: bool,
}

impl ConvBn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: ConvSpec, act: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), spec)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), spec.c_out),
            act,
        })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let y = self.bn.forward(cx, self.conv.forward(cx, x)?)?;
        Ok(if self.act { y.relu6() } else { y })
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.conv.output_shape(input)
    }

    pub fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        let c = self.conv.cost(input)?;
        let out = [c.output_shape[0], c.output_shape[1], c.output_shape[2]];
        Ok(vec![c, self.bn.cost(out)])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            name: name.to_string(),
            dim,
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]), ParamKind::NoDecay),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::NoDecay),
        }
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(&cx.param(self.gamma), &cx.param(self.beta), NORM_EPS)
    }

    pub fn cost(&self, shape: Vec<usize>) -> CostRow {
        CostRow::new(&self.name, "norm", 2 * self.dim as u64, 0, shape)
    }
}

/// `y = x W + b` over the last axis, `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Uniform `±1/sqrt(d_in)` weights, zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = uniform(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        Self {
            name: name.to_string(),
            d_in,
            d_out,
            weight: store.add(format!("{name}.weight"), w, ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamKind::NoDecay),
        }
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.last() != Some(&self.d_in) {
            return Err(Error::shape(format!("{}: expects last dim {}, got {s:?}", self.name, self.d_in)));
        }
        let rows = s.iter().product::<usize>() / self.d_in;
        let y = cx.metered(&self.name, || x.reshape(&[rows, self.d_in])?.matmul(&cx.param(self.weight)))?;
        let y = y.add(&cx.param(self.bias))?;
        let mut out = s;
        *out.last_mut().unwrap() = self.d_out;
        y.reshape(&out)
    }

    pub fn num_params(&self) -> u64 {
        (self.d_in * self.d_out + self.d_out) as u64
    }

    /// Cost for `rows` input vectors.
    pub fn cost(&self, rows: usize) -> CostRow {
        let macs = (rows * self.d_in * self.d_out) as u64;
        CostRow::new(&self.name, "linear", self.num_params(), macs, vec![rows, self.d_out])
    }
}

/// Multi-head self-attention with biased Q, K, V and output projections.
/// Operates on `[B, T, d]`; residual and pre-norm belong to the caller.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub name: String,
    pub d: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mhsa {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::HeadsDontDivide { heads, d_model: d });
        }
        Ok(Self {
            name: name.to_string(),
            d,
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
        })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::shape(format!("{}: expects [B,T,{}], got {s:?}", self.name, self.d)));
        }
        let (b, t, d, h) = (s[0], s[1], self.d, self.heads);
        let dh = d / h;
        let split = |v: Var<'g>| -> Result<Var<'g>> {
            v.reshape(&[b, t, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, dh])
        };
        let q = split(self.q.forward(cx, x)?)?;
        let k = split(self.k.forward(cx, x)?)?;
        let v = split(self.v.forward(cx, x)?)?;
        let kt = k.transpose_last()?;
        let scores = cx.metered(&self.name, || q.bmm(&kt))?.scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax_last()?;
        cx.tap(&format!("{}.attn", self.name), attn);
        let ctxv = cx.metered(&self.name, || attn.bmm(&v))?;
        let merged = ctxv.reshape(&[b, h, t, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        self.o.forward(cx, merged)
    }

    pub fn num_params(&self) -> u64 {
        4 * self.q.num_params()
    }

    /// Cost for `seqs` sequences of `t` tokens: one row for the four
    /// projections and one for the score/value products.
    pub fn cost(&self, seqs: usize, t: usize) -> Vec<CostRow> {
        let rows = seqs * t;
        let mut out: Vec<CostRow> = [&self.q, &self.k, &self.v, &self.o].iter().map(|l| l.cost(rows)).collect();
        let macs = (2 * seqs * t * t * self.d) as u64;
        out.push(CostRow::new(&self.name, "attention", 0, macs, vec![seqs * self.heads, t, t]));
        out
    }
}

/// Per-token `W2 gelu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.fc2.forward(cx, self.fc1.forward(cx, x)?.gelu())
    }

    pub fn cost(&self, rows: usize) -> Vec<CostRow> {
        vec![self.fc1.cost(rows), self.fc2.cost(rows)]
    }
}

/// Mean over the spatial axes: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<'g>(x: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("global_avg_pool expects [N,C,H,W], got {s:?}")));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.mean_axis(2)?.reshape(&[s[0], s[1]])
}
