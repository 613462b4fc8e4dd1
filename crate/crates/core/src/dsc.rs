//! Dynamic snake convolution.
//!
//! A snake kernel has `K` sampling points laid out along one image axis.
//! Each point is displaced perpendicular to that axis by an offset that is
//! accumulated outward from the kernel center in tanh-bounded steps, so the
//! sampling path bends continuously like a vessel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostRow;
use crate::error::{Error, Result};
use crate::nn::{uniform, BatchNorm2d, Conv2d, ConvBn, ConvSpec};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Kernel runs along the width; offsets move rows.
    Horizontal,
    /// Kernel runs along the height; offsets move columns.
    Vertical,
}

/// Base positions `p_i = i - (K-1)/2` along the kernel axis.
pub fn base_offsets(k: usize) -> Vec<f64> {
    (0..k).map(|i| i as f64 - ((k - 1) / 2) as f64).collect()
}

/// `raw: [N,K,H,W] -> Δp: [N,K,H,W]` with `Δp[center] = 0` and
/// `|Δp[i] - Δp[i±1]| = |tanh(raw[i])| ≤ 1` stepping away from the center.
pub fn accumulate_snake_offsets<'g>(raw: Var<'g>) -> Result<Var<'g>> {
    let s = raw.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("snake offsets expect [N,K,H,W], got {s:?}")));
    }
    if s[1].is_multiple_of(2) {
        return Err(Error::EvenK(s[1]));
    }
    raw.tanh().centered_cumsum(1)
}

/// `y(x0) = Σ_i Σ_c w[o,c,i] · x_c(x0 + p_i + Δp_i)` with bilinear sampling.
///
/// `x: [N,Cin,H,W]`, `weight: [Cout,Cin,K]`, `offsets: [N,K,H,W]`.
pub fn snake_conv2d<'g>(x: Var<'g>, weight: Var<'g>, offsets: Var<'g>, axis: Axis) -> Result<Var<'g>> {
    let (xs, ws, os) = (x.shape(), weight.shape(), offsets.shape());
    if xs.len() != 4 || ws.len() != 3 || os.len() != 4 {
        return Err(Error::shape(format!("snake_conv2d x {xs:?} weight {ws:?} offsets {os:?}")));
    }
    let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, k) = (ws[0], ws[2]);
    if ws[1] != c_in || os != [n, k, h, w] {
        return Err(Error::shape(format!("snake_conv2d x {xs:?} weight {ws:?} offsets {os:?}")));
    }
    if k % 2 == 0 {
        return Err(Error::EvenK(k));
    }
    let g = x.graph();
    let p = k * h * w;
    let base = base_offsets(k);
    // Undisplaced coordinates of every (point, row, col), one component each.
    let mut perp = Vec::with_capacity(p);
    let mut along = Vec::with_capacity(n * p);
    for &pi in &base {
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = (r as f64, c as f64);
                match axis {
                    Axis::Horizontal => {
                        perp.push(rr);
                        along.push(cc + pi);
                    }
                    Axis::Vertical => {
                        perp.push(cc);
                        along.push(rr + pi);
                    }
                }
            }
        }
    }
    let along: Vec<f64> = along.iter().cycle().take(n * p).copied().collect();
    let perp = g.constant(Tensor::from_parts(vec![p, 1], perp));
    let along = g.constant(Tensor::from_parts(vec![n, p, 1], along));
    let moved = offsets.reshape(&[n, p, 1])?.add(&perp)?;
    let coords = match axis {
        Axis::Horizontal => Var::concat(&[moved, along], 2)?,
        Axis::Vertical => Var::concat(&[along, moved], 2)?,
    };
    let sampled = x.bilinear_sample(&coords)?; // [N, Cin, K*H*W]
    let cols = sampled
        .reshape(&[n, c_in * k, h * w])?
        .permute(&[1, 0, 2])?
        .reshape(&[c_in * k, n * h * w])?;
    let y = weight.reshape(&[c_out, c_in * k])?.matmul(&cols)?;
    y.reshape(&[c_out, n, h, w])?.permute(&[1, 0, 2, 3])
}

/// Learned snake kernel `w: [Cout, Cin, K]` along one axis.
#[derive(Clone, Debug)]
pub struct SnakeConv {
    pub name: String,
    pub axis: Axis,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub weight: ParamId,
}

impl SnakeConv {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, axis: Axis, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::EvenK(k));
        }
        let w = uniform(rng, &[c_out, c_in, k], (6.0 / (c_in * k) as f64).sqrt());
        let weight = store.add(format!("{name}.weight"), w, ParamKind::Weight);
        Ok(Self { name: name.to_string(), axis, c_in, c_out, k, weight })
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>, offsets: Var<'g>) -> Result<Var<'g>> {
        cx.metered(&self.name, || snake_conv2d(x, cx.param(self.weight), offsets, self.axis))
    }

    /// Same weights as an ordinary `1×K` (horizontal) or `K×1` (vertical)
    /// convolution with "same" padding: the zero-offset special case.
    pub fn forward_standard<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let half = (self.k - 1) / 2;
        let (shape, pad) = match self.axis {
            Axis::Horizontal => ([self.c_out, self.c_in, 1, self.k], (0, half)),
            Axis::Vertical => ([self.c_out, self.c_in, self.k, 1], (half, 0)),
        };
        let w = cx.param(self.weight).reshape(&shape)?;
        x.conv2d(&w, (1, 1), pad, 1)
    }

    pub fn cost(&self, input: [usize; 3]) -> CostRow {
        let hw = input[1] * input[2];
        let sampling = 4 * self.c_in * self.k * hw;
        let mixing = self.c_out * self.c_in * self.k * hw;
        let params = (self.c_out * self.c_in * self.k) as u64;
        CostRow::new(&self.name, "snake", params, (sampling + mixing) as u64, vec![self.c_out, input[1], input[2]])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DscArgs {
    pub c_in: usize,
    pub c_out: usize,
    /// Width of each axis branch before fusion.
    pub hidden: usize,
    pub k: usize,
}

/// Two-axis snake block: offset predictor, horizontal and vertical snake
/// convolutions (each + BN + ReLU6) at stride 1, channel concat, pointwise
/// fusion, then a stride-2 depthwise 3×3 downsample.
#[derive(Clone, Debug)]
pub struct DscBlock {
    pub name: String,
    pub args: DscArgs,
    pub predictor: Conv2d,
    pub snake_h: SnakeConv,
    pub bn_h: BatchNorm2d,
    pub snake_v: SnakeConv,
    pub bn_v: BatchNorm2d,
    pub fuse: ConvBn,
    pub down: ConvBn,
}

impl DscBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, args: DscArgs) -> Result<Self> {
        let DscArgs { c_in, c_out, hidden, k } = args;
        if k % 2 == 0 {
            return Err(Error::EvenK(k));
        }
        if c_in == 0 || c_out == 0 || hidden == 0 {
            return Err(Error::config(name, "dsc widths must be positive"));
        }
        let predictor = Conv2d::zeros(store, &format!("{name}.offset"), ConvSpec::new(c_in, 2 * k, 3).with_bias())?;
        let snake_h = SnakeConv::new(store, rng, &format!("{name}.snake_h"), Axis::Horizontal, c_in, hidden, k)?;
        let bn_h = BatchNorm2d::new(store, &format!("{name}.snake_h.bn"), hidden);
        let snake_v = SnakeConv::new(store, rng, &format!("{name}.snake_v"), Axis::Vertical, c_in, hidden, k)?;
        let bn_v = BatchNorm2d::new(store, &format!("{name}.snake_v.bn"), hidden);
        let fuse = ConvBn::new(store, rng, &format!("{name}.fuse"), ConvSpec::pointwise(2 * hidden, c_out), true)?;
        let down = ConvBn::new(store, rng, &format!("{name}.down"), ConvSpec::depthwise(c_out, 3).stride(2), true)?;
        Ok(Self { name: name.to_string(), args, predictor, snake_h, bn_h, snake_v, bn_v, fuse, down })
    }

    /// Raw predictor output `[N, 2K, H, W]`: horizontal branch first.
    pub fn predict_offsets<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.predictor.forward(cx, x)
    }

    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let k = self.args.k;
        let raw = self.predict_offsets(cx, x)?;
        let dh = accumulate_snake_offsets(raw.narrow(1, 0, k)?)?;
        let dv = accumulate_snake_offsets(raw.narrow(1, k, k)?)?;
        cx.tap(&format!("{}.offsets_h", self.name), dh);
        cx.tap(&format!("{}.offsets_v", self.name), dv);
        let yh = self.bn_h.forward(cx, self.snake_h.forward(cx, x, dh)?)?.relu6();
        let yv = self.bn_v.forward(cx, self.snake_v.forward(cx, x, dv)?)?.relu6();
        self.tail(cx, yh, yv)
    }

    /// The same block with both snake kernels replaced by their standard
    /// `1×K` / `K×1` convolutions (offsets ignored).
    pub fn forward_standard<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let yh = self.bn_h.forward(cx, self.snake_h.forward_standard(cx, x)?)?.relu6();
        let yv = self.bn_v.forward(cx, self.snake_v.forward_standard(cx, x)?)?.relu6();
        self.tail(cx, yh, yv)
    }

    fn tail<'g>(&self, cx: &Ctx<'g>, yh: Var<'g>, yv: Var<'g>) -> Result<Var<'g>> {
        let cat = Var::concat(&[yh, yv], 1)?;
        self.down.forward(cx, self.fuse.forward(cx, cat)?)
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input[0] != self.args.c_in {
            return Err(Error::shape(format!("{}: expects {} channels, got {}", self.name, self.args.c_in, input[0])));
        }
        self.down.output_shape([self.args.c_out, input[1], input[2]])
    }

    pub fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        let hidden = [self.args.hidden, input[1], input[2]];
        let mut rows = vec![
            self.predictor.cost(input)?,
            self.snake_h.cost(input),
            self.bn_h.cost(hidden),
            self.snake_v.cost(input),
            self.bn_v.cost(hidden),
        ];
        rows.extend(self.fuse.cost([2 * self.args.hidden, input[1], input[2]])?);
        rows.extend(self.down.cost([self.args.c_out, input[1], input[2]])?);
        Ok(rows)
    }
}
