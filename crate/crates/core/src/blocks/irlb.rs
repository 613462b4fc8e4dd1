use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Block;
use crate::cost::CostRow;
use crate::error::{Error, Result};
use crate::nn::{ConvBn, ConvSpec};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrlbArgs {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub expansion: f64,
}

/// Inverted residual linear bottleneck: pointwise expand (BN, ReLU6),
/// depthwise 3×3 (BN, ReLU6), pointwise project (BN, no activation), plus
/// an identity shortcut when stride is 1 and widths match.
#[derive(Clone, Debug)]
pub struct Irlb {
    pub name: String,
    pub args: IrlbArgs,
    pub expand: ConvBn,
    pub dw: ConvBn,
    pub project: ConvBn,
}

impl Irlb {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: IrlbArgs) -> Result<Self> {
        if args.c_in == 0 || args.c_out == 0 || !(args.expansion > 0.0) || !(args.stride == 1 || args.stride == 2) {
            return Err(Error::config(name, format!("invalid IRLB arguments {args:?}")));
        }
        let hidden = Self::hidden_width(args.c_in, args.expansion);
        let expand = ConvBn::new(store, rng, &format!("{name}.expand"), ConvSpec::pointwise(args.c_in, hidden), true)?;
        let dw = ConvBn::new(store, rng, &format!("{name}.dw"), ConvSpec::depthwise(hidden, 3).stride(args.stride), true)?;
        let project = ConvBn::new(store, rng, &format!("{name}.project"), ConvSpec::pointwise(hidden, args.c_out), false)?;
        Ok(Self { name: name.to_string(), args, expand, dw, project })
    }

    pub fn hidden_width(c_in: usize, expansion: f64) -> usize {
        ((c_in as f64 * expansion).round() as usize).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.args.stride == 1 && self.args.c_in == self.args.c_out
    }
}

impl Block for Irlb {
    fn kind(&self) -> &'static str {
        "irlb"
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.expand.forward(cx, x)?;
        let h = self.dw.forward(cx, h)?;
        let y = self.project.forward(cx, h)?;
        if self.has_residual() {
            y.add(&x)
        } else {
            Ok(y)
        }
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let e = self.expand.output_shape(input)?;
        let d = self.dw.output_shape(e)?;
        self.project.output_shape(d)
    }

    fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        let e = self.expand.output_shape(input)?;
        let d = self.dw.output_shape(e)?;
        let mut rows = self.expand.cost(input)?;
        rows.extend(self.dw.cost(e)?);
        rows.extend(self.project.cost(d)?);
        Ok(rows)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform;
    use crate::params::Mode;
    use crate::tensor::Graph;
    use rand::SeedableRng;

    fn block(c_in: usize, c_out: usize, stride: usize) -> (ParamStore, Irlb) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Irlb::new(&mut store, &mut rng, "b", IrlbArgs { c_in, c_out, stride, expansion: 4.0 }).unwrap();
        (store, b)
    }

    #[test]
    fn zero_weights_leave_pure_residual() {
        let (mut store, b) = block(4, 4, 1);
        for c in [&b.expand.conv, &b.dw.conv, &b.project.conv] {
            store.get_mut(c.weight).data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(&mut rng, &[2, 4, 5, 5], 1.0);
        for mode in [Mode::Train, Mode::Eval] {
            let g = Graph::new();
            let cx = Ctx::new(&g, &store, mode);
            let y = b.forward(&cx, g.constant(x.clone())).unwrap().tensor();
            assert!(y.bitwise_eq(&x));
        }
    }

    #[test]
    fn stride_two_halves_without_residual() {
        let (store, b) = block(4, 4, 2);
        assert!(!b.has_residual());
        assert_eq!(b.output_shape([4, 8, 8]).unwrap(), [4, 4, 4]);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let y = b.forward(&cx, g.constant(uniform(&mut ChaCha8Rng::seed_from_u64(3), &[1, 4, 8, 8], 1.0))).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 4, 4]);
        let (_, c) = block(4, 6, 1);
        assert!(!c.has_residual());
    }

    #[test]
    fn cost_rows_follow_layers() {
        let (_, b) = block(8, 16, 2);
        let rows = b.cost([8, 16, 16]).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["b.expand.conv", "b.expand.bn", "b.dw.conv", "b.dw.bn", "b.project.conv", "b.project.bn"]);
        assert_eq!(rows[0].macs, 8 * 32 * 256);
        assert_eq!(rows[2].macs, 32 * 9 * 64);
        assert_eq!(rows[4].macs, 32 * 16 * 64);
    }
}
