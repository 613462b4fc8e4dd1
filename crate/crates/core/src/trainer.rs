//! AdamW, warmup + cosine schedule, classification losses and the
//! supervised training / evaluation loops.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dihedral, Dataset, Labels};
use crate::error::{Error, Result};
use crate::metrics::{report_multiclass, report_multilabel, MetricReport};
use crate::model::{HeadMode, Model};
use crate::params::{Ctx, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// AdamW with decoupled weight decay. Moments are allocated lazily per
/// parameter; parameters without a gradient in a step are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, moments: Vec::new() }
    }

    /// One update of every parameter in `grads`. Only `Weight` parameters
    /// are decayed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if store.get(*id).shape() != g.shape() {
                return Err(Error::shape(format!(
                    "{}: gradient {:?} vs parameter {:?}",
                    store.entry(*id).name,
                    g.shape(),
                    store.get(*id).shape()
                )));
            }
        }
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let kind = store.entry(*id).kind;
            if kind == ParamKind::Buffer {
                continue;
            }
            let wd = if kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let p = store.get_mut(*id).data_mut();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                p[i] -= lr * (mh / (vh.sqrt() + self.eps)) + lr * wd * p[i];
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    pub min_lr: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(Error::config("schedule", "epochs and steps per epoch must be positive"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("warmup {} must be shorter than {} epochs", self.warmup_epochs, self.total_epochs),
            ));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Linear warmup from 0, then half-cosine decay reaching `min_lr` at
    /// step `total_steps()`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_epochs * self.steps_per_epoch;
        let total = self.total_steps();
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

pub fn lr_at(step: usize, s: &ScheduleSpec) -> f64 {
    s.lr_at(step)
}

/// Softmax cross-entropy (multiclass) or mean sigmoid binary cross-entropy
/// (multilabel; class indices are one-hot encoded).
pub fn classification_loss<'g>(logits: Var<'g>, labels: &Labels, head: HeadMode) -> Result<Var<'g>> {
    match (head, labels) {
        (HeadMode::Multiclass, Labels::Classes(c)) => logits.cross_entropy(c),
        (HeadMode::Multiclass, Labels::MultiHot(_)) => {
            Err(Error::config("head", "multiclass head needs class-index labels"))
        }
        (HeadMode::Multilabel, Labels::MultiHot(rows)) => {
            let t: Vec<f64> = rows.iter().flatten().map(|&b| b as u8 as f64).collect();
            logits.bce_with_logits(&t)
        }
        (HeadMode::Multilabel, Labels::Classes(c)) => {
            let k = logits.shape()[1];
            let mut t = vec![0.0; c.len() * k];
            for (i, &l) in c.iter().enumerate() {
                if l >= k {
                    return Err(Error::LabelOutOfRange { label: l, classes: k });
                }
                t[i * k + l] = 1.0;
            }
            logits.bce_with_logits(&t)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    /// Seeds batch shuffling.
    pub seed: u64,
    /// Stop once evaluation AUC reaches this value.
    pub stop_at_auc: Option<f64>,
    /// Random rotations by multiples of 90° and mirrors of each training
    /// image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 0,
            min_lr: 0.0,
            weight_decay: 5e-4,
            seed: 0,
            stop_at_auc: None,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self, n: usize) -> ScheduleSpec {
        ScheduleSpec {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: n.div_ceil(self.batch_size.max(1)),
            min_lr: self.min_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// First epoch (1-based) whose evaluation AUC reached `stop_at_auc`.
    pub reached_at: Option<usize>,
}

impl TrainLog {
    /// `epoch,step,lr,loss[,auc,auprc,f1,accuracy]`, one line per epoch.
    pub fn to_csv(&self) -> String {
        let with_metrics = self.entries.iter().any(|e| e.metrics.is_some());
        let mut s = String::from("epoch,step,lr,loss");
        if with_metrics {
            s.push_str(",auc,auprc,f1,accuracy");
        }
        s.push('\n');
        for e in &self.entries {
            let _ = write!(s, "{},{},{},{}", e.epoch, e.step, e.lr, e.loss);
            if let Some(m) = &e.metrics {
                let _ = write!(s, ",{},{},{},{}", m.auc, m.auprc, m.f1, m.accuracy);
            } else if with_metrics {
                s.push_str(",,,,");
            }
            s.push('\n');
        }
        s
    }
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(model: &mut Model, opt: &mut AdamW, images: &Tensor, labels: &Labels, lr: f64) -> Result<f64> {
    let (loss, grads, stats) = {
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, Mode::Train);
        let logits = model.forward(&cx, g.constant(images.clone()))?;
        let loss = classification_loss(logits, labels, model.config.head)?;
        let value = loss.value().item();
        let grads = g.backward(loss)?;
        (value, cx.param_grads(&grads), cx.take_stat_updates())
    };
    opt.step(&mut model.store, &grads, lr)?;
    model.store.apply_stat_updates(stats);
    Ok(loss)
}

/// Supervised training with per-epoch shuffling from `cfg.seed`. When
/// `eval` is given every epoch is evaluated on it and logged.
pub fn train(model: &mut Model, data: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let sched = cfg.schedule(data.len());
    sched.validate()?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            lr = sched.lr_at(step);
            let (mut x, y) = data.batch(idx);
            if cfg.augment {
                x = random_dihedral(&x, &mut rng)?;
            }
            total += train_step(model, &mut opt, &x, &y, lr)?;
            step += 1;
        }
        let loss = total / sched.steps_per_epoch as f64;
        if !loss.is_finite() {
            log::warn!("epoch {epoch}: non-finite training loss");
        }
        let metrics = eval.map(|d| evaluate(model, d)).transpose()?;
        log::info!(
            "epoch {epoch}: loss {loss:.5} lr {lr:.3e}{}",
            metrics.as_ref().map(|m| format!(" auc {:.4}", m.auc)).unwrap_or_default()
        );
        let reached = matches!((&metrics, cfg.stop_at_auc), (Some(m), Some(th)) if m.auc >= th);
        log.entries.push(LogEntry { epoch, step, lr, loss, metrics });
        if reached {
            log.reached_at = Some(epoch);
            break;
        }
    }
    Ok(log)
}

/// [`dihedral`] with one uniformly drawn symmetry per image.
pub fn random_dihedral(images: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let ops: Vec<u8> = (0..images.shape()[0]).map(|_| rng.gen_range(0..8)).collect();
    dihedral(images, &ops)
}

/// Eval-mode class probabilities (softmax or sigmoid), one row per image.
pub fn predict(model: &Model, images: &Tensor, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let n = images.shape()[0];
    let per = images.numel() / n;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch_size.max(1)) {
        let b = batch_size.max(1).min(n - start);
        let mut shape = images.shape().to_vec();
        shape[0] = b;
        let x = Tensor::new(&shape, images.data()[start * per..(start + b) * per].to_vec())?;
        let g = Graph::new();
        let cx = Ctx::new(&g, &model.store, Mode::Eval).frozen();
        let logits = model.forward(&cx, g.constant(x))?;
        let probs = match model.config.head {
            HeadMode::Multiclass => logits.softmax_last()?,
            HeadMode::Multilabel => logits.sigmoid(),
        };
        let t = probs.tensor();
        let c = t.shape()[1];
        out.extend(t.data().chunks(c).map(|r| r.to_vec()));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probs = predict(model, &data.images, 32)?;
    match &data.labels {
        Labels::Classes(c) => report_multiclass(&probs, c),
        Labels::MultiHot(m) => report_multilabel(&probs, m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(kind: ParamKind, v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1], v), kind);
        (s, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store_with(ParamKind::Weight, 0.5);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut s, &[(id, Tensor::full(&[1], 1.0))], 1e-3).unwrap();
        let delta = 0.5 - s.get(id).item();
        assert!((delta - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let (mut s, id) = store_with(ParamKind::Weight, 2.0);
        let mut opt = AdamW::new(0.05);
        for _ in 0..3 {
            let before = s.get(id).item();
            opt.step(&mut s, &[(id, Tensor::zeros(&[1]))], 0.1).unwrap();
            assert_eq!(s.get(id).item(), before - 0.1 * 0.05 * before);
        }
        let (mut s, id) = store_with(ParamKind::Weight, 2.0);
        AdamW::new(0.0).step(&mut s, &[(id, Tensor::zeros(&[1]))], 0.1).unwrap();
        assert_eq!(s.get(id).item(), 2.0);
        let (mut s, id) = store_with(ParamKind::NoDecay, 2.0);
        AdamW::new(0.5).step(&mut s, &[(id, Tensor::zeros(&[1]))], 0.1).unwrap();
        assert_eq!(s.get(id).item(), 2.0);
        assert!(AdamW::new(0.0).step(&mut s, &[(id, Tensor::zeros(&[2]))], 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = ScheduleSpec { base_lr: 1e-3, warmup_epochs: 2, total_epochs: 10, steps_per_epoch: 5, min_lr: 0.0 };
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(10) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(9) - s.lr_at(10)).abs() < 1.1e-4);
        assert!(s.lr_at(50).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for step in 10..=50 {
            assert!(s.lr_at(step) <= prev);
            prev = s.lr_at(step);
        }
        let bad = ScheduleSpec { warmup_epochs: 10, ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let ce = classification_loss(z, &Labels::Classes(vec![0, 3]), HeadMode::Multiclass).unwrap();
        assert!((ce.value().item() - 4f64.ln()).abs() < 1e-12);
        let bce = classification_loss(z, &Labels::MultiHot(vec![vec![true, false, true, false]; 2]), HeadMode::Multilabel)
            .unwrap();
        assert!((bce.value().item() - 2f64.ln()).abs() < 1e-12);
        let one_hot = g.constant(Tensor::new(&[1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        let ce = classification_loss(one_hot, &Labels::Classes(vec![0]), HeadMode::Multiclass).unwrap();
        assert!(ce.value().item() < 1e-10);
        assert!(matches!(
            classification_loss(z, &Labels::Classes(vec![0, 4]), HeadMode::Multiclass),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
        let huge = g.constant(Tensor::new(&[1, 2], vec![1e4, -1e4]).unwrap());
        for labels in [vec![0], vec![1]] {
            let l = classification_loss(huge, &Labels::Classes(labels), HeadMode::Multiclass).unwrap();
            assert!(l.value().item().is_finite());
        }
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            entries: vec![LogEntry { epoch: 1, step: 2, lr: 0.5, loss: 0.25, metrics: None }],
            reached_at: None,
        };
        assert_eq!(log.to_csv(), "epoch,step,lr,loss\n1,2,0.5,0.25\n");
    }
}
