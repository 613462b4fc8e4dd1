//! Masked image modeling: random patch masks, input-space masking with a
//! learned per-channel token, a pixel-shuffle reconstruction head and an L1
//! loss restricted to masked pixels.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, DOWNSAMPLE};
use crate::nn::{Conv2d, ConvSpec};
use crate::params::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{random_dihedral, AdamW, ScheduleSpec};

/// Patch-level mask shared by every image of a batch (`true` = masked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub grid: Vec<bool>,
}

impl MaskSpec {
    pub fn from_grid(grid_h: usize, grid_w: usize, patch_size: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != grid_h * grid_w || patch_size == 0 {
            return Err(Error::shape(format!("mask grid {grid_h}x{grid_w} with {} cells", grid.len())));
        }
        Ok(Self { grid_h, grid_w, patch_size, grid })
    }

    /// Row-major indices of masked patches.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.grid.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn image_hw(&self) -> [usize; 2] {
        [self.grid_h * self.patch_size, self.grid_w * self.patch_size]
    }

    /// Pixel-resolution mask `[1, 1, H, W]` of zeros and ones.
    pub fn pixel_mask(&self) -> Tensor {
        let [h, w] = self.image_hw();
        let p = self.patch_size;
        Tensor::from_fn(&[1, 1, h, w], |i| {
            let (r, c) = (i / w, i % w);
            self.grid[(r / p) * self.grid_w + c / p] as u8 as f64
        })
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[2..] != self.image_hw() {
            return Err(Error::shape(format!(
                "image {shape:?} does not match a {}x{} mask of {}px patches",
                self.grid_h, self.grid_w, self.patch_size
            )));
        }
        Ok(())
    }
}

/// Masks exactly `round(ratio·h·w)` distinct patches, chosen uniformly.
pub fn sample_mask(grid_h: usize, grid_w: usize, ratio: f64, patch_size: usize, rng: &mut impl Rng) -> Result<MaskSpec> {
    let cells = grid_h * grid_w;
    let count = (ratio * cells as f64).round();
    if !(ratio > 0.0 && ratio < 1.0) || count < 1.0 || count >= cells as f64 {
        return Err(Error::DegenerateGrid { h: grid_h, w: grid_w, ratio, count: count.max(0.0) as usize });
    }
    let mut grid = vec![false; cells];
    for i in sample(rng, cells, count as usize) {
        grid[i] = true;
    }
    MaskSpec::from_grid(grid_h, grid_w, patch_size, grid)
}

/// `x·(1 − M) + token·M` with `token` broadcast per channel.
pub fn apply_mask<'g>(x: Var<'g>, m: &MaskSpec, token: Var<'g>) -> Result<Var<'g>> {
    let s = x.shape();
    m.check_image(&s)?;
    if token.shape() != [s[1]] {
        return Err(Error::shape(format!("mask token {:?} for {} channels", token.shape(), s[1])));
    }
    let g = x.graph();
    let pm = m.pixel_mask();
    let keep = g.constant(Tensor::from_fn(pm.shape(), |i| 1.0 - pm.data()[i]));
    let pm = g.constant(pm);
    let tok = token.reshape(&[1, s[1], 1, 1])?;
    x.mul(&keep)?.add(&tok.mul(&pm)?)
}

/// Mean absolute error over masked pixel-channels only.
pub fn simmim_loss<'g>(pred: Var<'g>, target: Var<'g>, m: &MaskSpec) -> Result<Var<'g>> {
    let s = pred.shape();
    if s != target.shape() {
        return Err(Error::shape(format!("prediction {s:?} vs target {:?}", target.shape())));
    }
    m.check_image(&s)?;
    let count = m.count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let pm = pred.graph().constant(m.pixel_mask());
    let err = pred.sub(&target)?.abs().mul(&pm)?.sum();
    let denom = s[0] * s[1] * count * m.patch_size * m.patch_size;
    Ok(err.scale(1.0 / denom as f64))
}

/// Reconstruction head: a learned mask token and a pointwise conv that
/// predicts a `32×32` pixel block per final-feature position.
#[derive(Clone, Debug)]
pub struct MimHead {
    pub mask_token: ParamId,
    pub predictor: Conv2d,
    pub channels: usize,
}

impl MimHead {
    pub const PREFIX: &'static str = "mim.";

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, channels: usize, d_feat: usize) -> Result<Self> {
        let mask_token = store.add("mim.mask_token", Tensor::zeros(&[channels]), ParamKind::NoDecay);
        let spec = ConvSpec::pointwise(d_feat, channels * DOWNSAMPLE * DOWNSAMPLE).with_bias();
        let predictor = Conv2d::new(store, rng, "mim.predictor", spec)?;
        Ok(Self { mask_token, predictor, channels })
    }

    /// Adds a head sized for `model` to its parameter store.
    pub fn attach(model: &mut Model, seed: u64) -> Result<Self> {
        let [h, w] = model.config.input_size;
        let shapes = model.shapes([model.config.in_channels, h, w])?;
        let d = shapes.last().expect("non-empty plan").1[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(&mut model.store, &mut rng, model.config.in_channels, d)
    }

    /// `[N, d, h, w]` features to `[N, C, 32h, 32w]` pixels.
    pub fn predict<'g>(&self, cx: &Ctx<'g>, feats: Var<'g>) -> Result<Var<'g>> {
        let y = self.predictor.forward(cx, feats)?;
        let s = y.shape();
        let (n, h, w, p, c) = (s[0], s[2], s[3], DOWNSAMPLE, self.channels);
        y.reshape(&[n, c, p, p, h, w])?.permute(&[0, 1, 4, 2, 5, 3])?.reshape(&[n, c, h * p, w * p])
    }

    /// Masked input, reconstruction and loss for one batch.
    pub fn loss<'g>(&self, model: &Model, cx: &Ctx<'g>, images: &Tensor, m: &MaskSpec) -> Result<Var<'g>> {
        let x = cx.graph.constant(images.clone());
        let xm = apply_mask(x, m, cx.param(self.mask_token))?;
        let feats = model.features(cx, xm)?;
        let pred = self.predict(cx, feats)?;
        simmim_loss(pred, x, m)
    }
}

/// Forward, masked loss, backward and one AdamW step; returns the loss.
pub fn pretrain_step(
    model: &mut Model,
    head: &MimHead,
    images: &Tensor,
    m: &MaskSpec,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let (loss, grads, stats) = {
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, Mode::Train);
        let loss = head.loss(model, &cx, images, m)?;
        let value = loss.value().item();
        let grads = g.backward(loss)?;
        (value, cx.param_grads(&grads), cx.take_stat_updates())
    };
    opt.step(&mut model.store, &grads, lr)?;
    model.store.apply_stat_updates(stats);
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub mask_patch: usize,
    /// Seeds shuffling, masks and the reconstruction head.
    pub seed: u64,
    /// Random rotations by multiples of 90° and mirrors of each image.
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 20,
            min_lr: 0.0,
            weight_decay: 0.05,
            mask_ratio: 0.6,
            mask_patch: 32,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// `epoch,step,lr,loss` lines.
pub fn pretrain_csv(log: &[PretrainEntry]) -> String {
    let mut s = String::from("epoch,step,lr,loss\n");
    for e in log {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.step, e.lr, e.loss));
    }
    s
}

/// Self-supervised pretraining on the images of `data` (labels unused).
/// The reconstruction head is attached to `model.store` and returned.
pub fn pretrain(model: &mut Model, data: &Dataset, cfg: &PretrainConfig) -> Result<(MimHead, Vec<PretrainEntry>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || cfg.mask_patch == 0 {
        return Err(Error::config("pretrain", "batch_size and mask_patch must be positive"));
    }
    let [h, w] = data.hw();
    if h % cfg.mask_patch != 0 || w % cfg.mask_patch != 0 {
        return Err(Error::config("mask_patch", format!("{} does not divide {h}x{w}", cfg.mask_patch)));
    }
    let sched = ScheduleSpec {
        base_lr: cfg.base_lr,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch: data.len().div_ceil(cfg.batch_size),
        min_lr: cfg.min_lr,
    };
    sched.validate()?;
    let head = MimHead::attach(model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut lr) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            lr = sched.lr_at(step);
            let m = sample_mask(h / cfg.mask_patch, w / cfg.mask_patch, cfg.mask_ratio, cfg.mask_patch, &mut rng)?;
            let mut x = data.batch(idx).0;
            if cfg.augment {
                x = random_dihedral(&x, &mut rng)?;
            }
            total += pretrain_step(model, &head, &x, &m, &mut opt, lr)?;
            step += 1;
        }
        let loss = total / sched.steps_per_epoch as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.5} lr {lr:.3e}");
        log.push(PretrainEntry { epoch, step, lr, loss });
    }
    Ok((head, log))
}
