//! Composite blocks behind a common trait, instantiated by kind name from a
//! JSON block plan.

mod hybrid;
mod irlb;
mod stem;

use std::collections::BTreeMap;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostRow;
use crate::dsc::{DscArgs, DscBlock};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Var;

pub use hybrid::{fold_tokens, unfold_tokens, HybridArgs, HybridBlock, TransformerLayer};
pub use irlb::{Irlb, IrlbArgs};
pub use stem::{Stem, StemArgs};

/// A feature-map-to-feature-map stage component, `[N,C,H,W] -> [N,C',H',W']`.
pub trait Block: fmt::Debug {
    fn kind(&self) -> &'static str;
    fn name(&self) -> &str;
    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>>;
    /// Output `[C,H,W]` for one input image of shape `[C,H,W]`.
    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]>;
    /// Per-layer static cost for one input image.
    fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>>;
    fn as_any(&self) -> &dyn std::any::Any;
}

/// One entry of a block plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: String,
    pub name: String,
    pub args: serde_json::Value,
}

impl BlockSpec {
    pub fn new(kind: &str, name: &str, args: impl Serialize) -> Self {
        Self {
            kind: kind.to_string(),
            name: name.to_string(),
            args: serde_json::to_value(args).expect("block args serialize"),
        }
    }
}

pub type BlockFactory = fn(&mut ParamStore, &mut ChaCha8Rng, &str, &serde_json::Value) -> Result<Box<dyn Block>>;

/// Name-to-constructor table for block kinds.
#[derive(Clone)]
pub struct BlockRegistry {
    factories: BTreeMap<String, BlockFactory>,
}

impl Default for BlockRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("stem", build_stem);
        r.register("irlb", build_irlb);
        r.register("dsc", build_dsc);
        r.register("hybrid", build_hybrid);
        r
    }
}

impl BlockRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn register(&mut self, kind: &str, factory: BlockFactory) {
        self.factories.insert(kind.to_string(), factory);
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, spec: &BlockSpec) -> Result<Box<dyn Block>> {
        let f = self.factories.get(&spec.kind).ok_or_else(|| Error::UnknownBlock(spec.kind.clone()))?;
        f(store, rng, &spec.name, &spec.args)
    }
}

fn parse<T: for<'de> Deserialize<'de>>(name: &str, args: &serde_json::Value) -> Result<T> {
    serde_json::from_value(args.clone()).map_err(|e| Error::config(name, e.to_string()))
}

fn build_stem(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: &serde_json::Value) -> Result<Box<dyn Block>> {
    Ok(Box::new(Stem::new(store, rng, name, parse(name, args)?)?))
}

fn build_irlb(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: &serde_json::Value) -> Result<Box<dyn Block>> {
    Ok(Box::new(Irlb::new(store, rng, name, parse(name, args)?)?))
}

fn build_dsc(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: &serde_json::Value) -> Result<Box<dyn Block>> {
    Ok(Box::new(DscBlock::new(store, rng, name, parse::<DscArgs>(name, args)?)?))
}

fn build_hybrid(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, args: &serde_json::Value) -> Result<Box<dyn Block>> {
    Ok(Box::new(HybridBlock::new(store, rng, name, parse(name, args)?)?))
}

impl Block for DscBlock {
    fn kind(&self) -> &'static str {
        "dsc"
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        DscBlock::forward(self, cx, x)
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        DscBlock::output_shape(self, input)
    }

    fn cost(&self, input: [usize; 3]) -> Result<Vec<CostRow>> {
        DscBlock::cost(self, input)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}
