//! Full classifier assembled from a declarative configuration.

mod checkpoint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockRegistry, BlockSpec, HybridArgs, IrlbArgs, StemArgs};
use crate::cost::{CostReport, CostRow};
use crate::dsc::DscArgs;
use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, Linear};
use crate::params::{Ctx, Mode, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, LoadReport};

/// Total downsampling from input to final feature map.
pub const DOWNSAMPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    Multiclass,
    Multilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DscConfig {
    /// Ablation flag S.
    pub enabled: bool,
    pub k: usize,
    pub hidden: usize,
    /// Output width of the stage-2 downsample (DSC or its IRLB stand-in).
    pub out: usize,
}

impl Default for DscConfig {
    fn default() -> Self {
        Self { enabled: true, k: 9, hidden: 256, out: 192 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    /// Ablation flag V.
    pub enabled: bool,
    /// Transformer layers in stages 3 and 4.
    pub depth: [usize; 2],
    pub heads: usize,
    pub ffn_ratio: f64,
    /// Token patch of stages 3 and 4.
    pub patch: [[usize; 2]; 2],
}

impl Default for VitConfig {
    fn default() -> Self {
        Self { enabled: true, depth: [2, 3], heads: 4, ffn_ratio: 2.0, patch: [[2, 2], [1, 1]] }
    }
}

/// Stages 3-4 when the transformer stages are disabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnStagesConfig {
    pub widths: [usize; 2],
    pub blocks: [usize; 2],
}

impl Default for CnnStagesConfig {
    fn default() -> Self {
        Self { widths: [192, 288], blocks: [3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: [usize; 2],
    pub in_channels: usize,
    /// Widths of stem, stage 1, stage 2, stage 3, stage 4.
    pub channel_plan: [usize; 5],
    /// IRLB blocks in stages 1 and 2 (first block of stage 1 has stride 2).
    pub blocks_per_stage: [usize; 2],
    pub expansion: f64,
    pub dsc: DscConfig,
    pub vit: VitConfig,
    pub cnn_stages: CnnStagesConfig,
    /// Ablation flag P: checkpoint to initialize from (head excluded).
    pub pretrained_init: Option<String>,
    pub num_classes: usize,
    pub head: HeadMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [224, 224],
            in_channels: 3,
            channel_plan: [32, 32, 112, 160, 160],
            blocks_per_stage: [1, 1],
            expansion: 4.0,
            dsc: DscConfig::default(),
            vit: VitConfig::default(),
            cnn_stages: CnnStagesConfig::default(),
            pretrained_init: None,
            num_classes: 2,
            head: HeadMode::Multiclass,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks and desk-scale training.
    pub fn tiny(input: usize) -> Self {
        Self {
            input_size: [input, input],
            channel_plan: [4, 8, 8, 16, 16],
            dsc: DscConfig { enabled: true, k: 9, hidden: 8, out: 16 },
            vit: VitConfig { depth: [1, 1], heads: 2, ..VitConfig::default() },
            cnn_stages: CnnStagesConfig { widths: [16, 16], blocks: [1, 1] },
            ..Self::default()
        }
    }

    /// Ablation flags as `(V, S)`; B is always on, P is `pretrained_init`.
    pub fn with_flags(mut self, vit: bool, dsc: bool) -> Self {
        self.vit.enabled = vit;
        self.dsc.enabled = dsc;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::config("input_size", format!("{h}x{w} must be positive multiples of {DOWNSAMPLE}")));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        if self.channel_plan.contains(&0) {
            return Err(Error::config("channel_plan", "all widths must be positive"));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("blocks_per_stage", "each stage needs at least one block"));
        }
        if !(self.expansion > 0.0) {
            return Err(Error::config("expansion", "must be positive"));
        }
        if self.dsc.out == 0 || self.dsc.hidden == 0 {
            return Err(Error::config("dsc", "widths must be positive"));
        }
        if self.dsc.k.is_multiple_of(2) {
            return Err(Error::config("dsc.k", format!("must be odd, got {}", self.dsc.k)));
        }
        if self.vit.enabled {
            if self.vit.heads == 0 {
                return Err(Error::config("vit.heads", "must be positive"));
            }
            for (i, &d) in self.channel_plan[3..].iter().enumerate() {
                if d % self.vit.heads != 0 {
                    return Err(Error::config(
                        "vit.heads",
                        format!("{} heads do not divide stage-{} width {d}", self.vit.heads, i + 3),
                    ));
                }
            }
            if !(self.vit.ffn_ratio > 0.0) {
                return Err(Error::config("vit.ffn_ratio", "must be positive"));
            }
            if self.vit.patch.iter().flatten().any(|&p| p == 0) {
                return Err(Error::config("vit.patch", "patch sides must be positive"));
            }
        } else if self.cnn_stages.widths.contains(&0) || self.cnn_stages.blocks.contains(&0) {
            return Err(Error::config("cnn_stages", "widths and block counts must be positive"));
        }
        let min_classes = match self.head {
            HeadMode::Multiclass => 2,
            HeadMode::Multilabel => 1,
        };
        if self.num_classes < min_classes {
            return Err(Error::config("num_classes", format!("needs at least {min_classes} for {:?}", self.head)));
        }
        Ok(())
    }

    /// The ordered block plan this configuration describes.
    pub fn block_plan(&self) -> Result<Vec<BlockSpec>> {
        self.validate()?;
        let [c_stem, c1, c2, c3, c4] = self.channel_plan;
        let mut plan = vec![BlockSpec::new("stem", "stem", StemArgs { c_in: self.in_channels, c_out: c_stem })];
        let irlb = |c_in, c_out, stride| IrlbArgs { c_in, c_out, stride, expansion: self.expansion };
        let mut c = c_stem;
        for (stage, (&n, &width)) in self.blocks_per_stage.iter().zip(&[c1, c2]).enumerate() {
            for i in 0..n {
                let stride = if stage == 0 && i == 0 { 2 } else { 1 };
                plan.push(BlockSpec::new("irlb", &format!("stage{}.{i}", stage + 1), irlb(c, width, stride)));
                c = width;
            }
        }
        let out = self.dsc.out;
        plan.push(if self.dsc.enabled {
            BlockSpec::new("dsc", "down", DscArgs { c_in: c, c_out: out, hidden: self.dsc.hidden, k: self.dsc.k })
        } else {
            BlockSpec::new("irlb", "down", irlb(c, out, 2))
        });
        c = out;
        // spatial size entering stage 3
        let mut hw = [self.input_size[0] / 8, self.input_size[1] / 8];
        for s in 0..2 {
            let name = format!("stage{}", s + 3);
            if self.vit.enabled {
                let d = [c3, c4][s];
                let args = HybridArgs {
                    c_in: c,
                    d,
                    depth: self.vit.depth[s],
                    heads: self.vit.heads,
                    ffn_hidden: ((d as f64 * self.vit.ffn_ratio).round() as usize).max(1),
                    patch: self.vit.patch[s],
                    input_hw: hw,
                };
                plan.push(BlockSpec::new("hybrid", &format!("{name}.0"), args));
                c = d;
            } else {
                let width = self.cnn_stages.widths[s];
                for i in 0..self.cnn_stages.blocks[s] {
                    let stride = if i == 0 { 2 } else { 1 };
                    plan.push(BlockSpec::new("irlb", &format!("{name}.{i}"), irlb(c, width, stride)));
                    c = width;
                }
            }
            hw = [hw[0] / 2, hw[1] / 2];
        }
        Ok(plan)
    }
}

/// Classifier: block sequence, global average pooling, linear head.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub plan: Vec<BlockSpec>,
    pub blocks: Vec<Box<dyn Block>>,
    pub head: Linear,
    /// Set when `pretrained_init` was applied.
    pub init_report: Option<LoadReport>,
}

impl Model {
    /// Deterministic construction from `config.seed`; applies
    /// `pretrained_init` when set.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Self::build_with(config, &BlockRegistry::default())
    }

    pub fn build_with(config: &ModelConfig, registry: &BlockRegistry) -> Result<Self> {
        let plan = config.block_plan()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = plan
            .iter()
            .map(|spec| registry.build(&mut store, &mut rng, spec))
            .collect::<Result<Vec<_>>>()?;
        let mut shape = [config.in_channels, config.input_size[0], config.input_size[1]];
        for b in &blocks {
            shape = b.output_shape(shape)?;
        }
        let factor = config.input_size[0] / shape[1];
        if factor != DOWNSAMPLE || !config.input_size[0].is_multiple_of(shape[1]) {
            return Err(Error::config("block plan", format!("downsampling factor {factor}, expected {DOWNSAMPLE}")));
        }
        let head = Linear::new(&mut store, &mut rng, "head.fc", shape[0], config.num_classes);
        let mut model = Self { config: config.clone(), store, plan, blocks, head, init_report: None };
        if let Some(path) = &config.pretrained_init {
            let report = model.load_pretrained(Path::new(path))?;
            model.init_report = Some(report);
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn block(&self, name: &str) -> Option<&dyn Block> {
        self.blocks.iter().find(|b| b.name() == name).map(|b| b.as_ref())
    }

    /// Feature-map `[C,H,W]` after every block for one input image.
    pub fn shapes(&self, input: [usize; 3]) -> Result<Vec<(String, [usize; 3])>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            shape = b.output_shape(shape)?;
            out.push((b.name().to_string(), shape));
        }
        Ok(out)
    }

    /// Ratio of input height to final feature-map height.
    pub fn downsample_factor(&self) -> Result<usize> {
        let [h, w] = self.config.input_size;
        let last = self.shapes([self.config.in_channels, h, w])?.pop().expect("non-empty plan").1;
        Ok(h / last[1])
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!("model expects [N,{},H,W], got {s:?}", self.config.in_channels)));
        }
        if !s[2].is_multiple_of(DOWNSAMPLE) || !s[3].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::IndivisibleInput { h: s[2], w: s[3], factor: DOWNSAMPLE });
        }
        Ok(())
    }

    /// Final feature map; every block output is tapped under its name.
    pub fn features<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        self.check_input(&x)?;
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(cx, h)?;
            cx.tap(b.name(), h);
        }
        Ok(h)
    }

    /// Raw logits `[N, num_classes]`.
    pub fn forward<'g>(&self, cx: &Ctx<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let f = self.features(cx, x)?;
        self.head.forward(cx, global_avg_pool(f)?)
    }

    /// Static per-layer cost for one `[C, H, W]` image.
    pub fn cost(&self, input_hw: [usize; 2]) -> Result<CostReport> {
        let input = [self.config.in_channels, input_hw[0], input_hw[1]];
        if !input_hw[0].is_multiple_of(DOWNSAMPLE) || !input_hw[1].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::IndivisibleInput { h: input_hw[0], w: input_hw[1], factor: DOWNSAMPLE });
        }
        let mut rows: Vec<CostRow> = Vec::new();
        let mut shape = input;
        for b in &self.blocks {
            rows.extend(b.cost(shape)?);
            shape = b.output_shape(shape)?;
        }
        rows.push(self.head.cost(1));
        Ok(CostReport::from_rows(input.to_vec(), rows))
    }

    /// Multiply-accumulates actually executed per layer by one eval-mode
    /// forward pass on a blank `[1, C, H, W]` image, in execution order.
    pub fn measured_cost(&self, input_hw: [usize; 2]) -> Result<Vec<(String, u64)>> {
        let g = Graph::new();
        let cx = Ctx::new(&g, &self.store, Mode::Eval).frozen().metering();
        let x = Tensor::zeros(&[1, self.config.in_channels, input_hw[0], input_hw[1]]);
        self.forward(&cx, g.constant(x))?;
        Ok(cx.mac_log())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::{Graph, Tensor};

    #[test]
    fn default_plan_downsamples_by_32() {
        let m = Model::build(&ModelConfig::default()).unwrap();
        let shapes = m.shapes([3, 224, 224]).unwrap();
        assert_eq!(shapes.last().unwrap().1, [160, 7, 7]);
        assert_eq!(m.downsample_factor().unwrap(), 32);
        let names: Vec<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["stem", "stage1.0", "stage2.0", "down", "stage3.0", "stage4.0"]);
    }

    #[test]
    fn baseline_flags_give_pure_cnn() {
        let m = Model::build(&ModelConfig::default().with_flags(false, false)).unwrap();
        assert!(m.blocks.iter().all(|b| b.kind() == "irlb" || b.kind() == "stem"));
        assert_eq!(m.downsample_factor().unwrap(), 32);
    }

    #[test]
    fn same_seed_same_registry() {
        let cfg = ModelConfig::tiny(32);
        let a = Model::build(&cfg).unwrap();
        let b = Model::build(&cfg).unwrap();
        assert!(a.store.bitwise_eq(&b.store));
        let c = Model::build(&ModelConfig { seed: 1, ..cfg }).unwrap();
        assert!(!a.store.bitwise_eq(&c.store));
    }

    #[test]
    fn logits_shape_and_zero_head() {
        let mut m = Model::build(&ModelConfig { num_classes: 3, ..ModelConfig::tiny(32) }).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 7919) % 1000) as f64 / 1000.0);
        let g = Graph::new();
        let cx = Ctx::new(&g, &m.store, Mode::Train);
        let y = m.forward(&cx, g.constant(x.clone())).unwrap().tensor();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.is_finite());
        drop(cx);
        m.store.get_mut(m.head.weight).data_mut().fill(0.0);
        let g = Graph::new();
        let cx = Ctx::new(&g, &m.store, Mode::Eval);
        let y = m.forward(&cx, g.constant(x)).unwrap().tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        let m = Model::build(&ModelConfig::tiny(32)).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &m.store, Mode::Eval);
        assert!(matches!(
            m.forward(&cx, g.constant(Tensor::zeros(&[1, 3, 48, 40]))),
            Err(Error::IndivisibleInput { h: 48, w: 40, factor: 32 })
        ));
        let bad = ModelConfig { num_classes: 1, ..ModelConfig::tiny(32) };
        assert!(matches!(Model::build(&bad), Err(Error::InvalidConfig { field, .. }) if field == "num_classes"));
        let bad = ModelConfig { input_size: [100, 100], ..ModelConfig::default() };
        assert!(matches!(Model::build(&bad), Err(Error::InvalidConfig { field, .. }) if field == "input_size"));
        let json = r#"{"channel_plan": [4, 8, 8, 16, 16], "widths": 3}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn static_cost_equals_executed_cost() {
        for (v, s) in [(true, true), (true, false), (false, true), (false, false)] {
            let m = Model::build(&ModelConfig::tiny(64).with_flags(v, s)).unwrap();
            let report = m.cost([64, 64]).unwrap();
            let mut measured = m.measured_cost([64, 64]).unwrap();
            let mut stat: Vec<(String, u64)> = report.rows.iter().filter(|r| r.macs > 0).map(|r| (r.name.clone(), r.macs)).collect();
            measured.sort();
            stat.sort();
            assert_eq!(measured, stat, "flags V={v} S={s}");
            assert_eq!(measured.iter().map(|r| r.1).sum::<u64>(), report.total_macs);
        }
    }

    #[test]
    fn registry_total_matches_cost_rows() {
        for (v, s) in [(true, true), (true, false), (false, true), (false, false)] {
            let m = Model::build(&ModelConfig::default().with_flags(v, s)).unwrap();
            let r = m.cost([224, 224]).unwrap();
            assert_eq!(r.total_params as usize, m.num_params(), "flags V={v} S={s}");
        }
    }
}
