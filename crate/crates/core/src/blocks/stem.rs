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
pub struct StemArgs {
    pub c_in: usize,
    pub c_out: usize,
}

/// 3×3 stride-2 conv, BN, ReLU6.
#[derive(Clone, Debug)]
pub struct Stem {
    pub name: String,
    pub conv: ConvBn,
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: StemArgs) -> Result<Self> {
        if args.c_in == 0 || args.c_out == 0 {
            return Err(Error::config(name, "stem widths must be positive"));
        }
        let conv = ConvBn::new(store, rng, name, ConvSpec::new(args.c_in, args.c_out, 3).stride(2), true)?;
        Ok(Self { name: name.to_string(), conv })
    }
}

impl Block for Stem {
    fn kind(&self) -> &'static str {
        "stem"
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.conv.forward(cx, x)
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.conv.output_shape(input)
    }

    fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        self.conv.cost(input)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
