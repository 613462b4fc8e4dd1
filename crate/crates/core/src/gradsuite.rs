//! Named finite-difference cases covering every differentiable op, layer,
//! block, the end-to-end tiny model and the masked reconstruction loss.
//!
//! Each case reduces its output to a scalar through a fixed random weighting
//! (`Σ out·R`), so every output coordinate contributes with a distinct
//! sensitivity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{Block, HybridArgs, HybridBlock, Irlb, IrlbArgs, Stem, StemArgs};
use crate::dsc::{snake_conv2d, Axis, DscArgs, DscBlock};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Ffn, LayerNorm, Mhsa};
use crate::params::{Ctx, Mode, ParamKind, ParamStore};
use crate::simmim::{apply_mask, MaskSpec, MimHead};
use crate::tensor::{gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

type CaseFn = fn(u64, &GradCheckOptions) -> Result<GradCheckReport>;

pub struct GradCase {
    pub name: &'static str,
    run: CaseFn,
}

impl GradCase {
    pub fn run(&self, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        (self.run)(seed, opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ out·R` with `R` drawn from `seed` for the output's shape.
fn weighted_sum<'g>(out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = rand_tensor(&mut rng, &out.shape(), -1.0, 1.0);
    Ok(out.mul(&out.graph().constant(r))?.sum())
}

fn check_ops(
    inputs: Vec<Tensor>,
    seed: u64,
    opts: &GradCheckOptions,
    f: impl for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
) -> Result<GradCheckReport> {
    gradient_check(|_, v| weighted_sum(f(v)?, seed), &inputs, opts)
}

/// Checks the input and every trainable tensor of `store` through `f`,
/// run in training mode.
fn check_layer(
    store: &ParamStore,
    x: Tensor,
    seed: u64,
    opts: &GradCheckOptions,
    f: impl for<'g> Fn(&Ctx<'g>, Var<'g>) -> Result<Var<'g>>,
) -> Result<GradCheckReport> {
    let ids: Vec<_> = store.trainable().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    gradient_check_with(
        store,
        |g, store, v| {
            let cx = Ctx::new(g, store, Mode::Train);
            for (&id, &var) in ids.iter().zip(&v[1..]) {
                cx.bind(id, var);
            }
            weighted_sum(f(&cx, v[0])?, seed)
        },
        &inputs,
        opts,
    )
}

/// Replaces zero-initialized offset predictors with small random weights so
/// sample points leave the integer grid (where bilinear sampling has kinks).
fn randomize_offsets(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).name.contains(".offset.")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
}

fn case_conv(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
    check_ops(vec![x, w], seed, o, |v| v[0].conv2d(&v[1], (2, 1), (1, 1), 1))
}

fn case_depthwise(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 4, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[4, 1, 3, 3], -1.0, 1.0);
    check_ops(vec![x, w], seed, o, |v| v[0].conv2d(&v[1], (1, 1), (1, 1), 4))
}

fn case_grouped(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 4, 5, 4], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[6, 2, 1, 3], -1.0, 1.0);
    check_ops(vec![x, w], seed, o, |v| v[0].conv2d(&v[1], (1, 2), (0, 1), 2))
}

fn case_bilinear(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 3, 5, 6], -1.0, 1.0);
    // includes points outside the image (zero padding)
    let c = rand_tensor(&mut r, &[2, 9, 2], -1.5, 6.5);
    check_ops(vec![x, c], seed, o, |v| v[0].bilinear_sample(&v[1]))
}

fn case_snake_conv(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[3, 2, 5], -1.0, 1.0);
    let off = rand_tensor(&mut r, &[2, 5, 5, 5], -1.7, 1.7);
    let h = check_ops(vec![x.clone(), w.clone(), off.clone()], seed, o, |v| {
        snake_conv2d(v[0], v[1], v[2], Axis::Horizontal)
    })?;
    let v = check_ops(vec![x, w, off], seed, o, |v| snake_conv2d(v[0], v[1], v[2], Axis::Vertical))?;
    Ok(if v.max_rel_error > h.max_rel_error { merge(v, h) } else { merge(h, v) })
}

fn merge(worse: GradCheckReport, other: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        checked: worse.checked + other.checked,
        skipped_kinks: worse.skipped_kinks + other.skipped_kinks,
        ..worse
    }
}

fn case_batch_norm(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[3, 4, 3, 2], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[4], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[4], -0.5, 0.5);
    let (mean, var) = ([0.1, -0.2, 0.3, 0.0], [1.0, 0.5, 2.0, 0.8]);
    let train = check_ops(vec![x.clone(), gamma.clone(), beta.clone()], seed, o, |v| {
        Ok(v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0)
    })?;
    let eval = check_ops(vec![x, gamma, beta], seed, o, |v| v[0].batch_norm_eval(&v[1], &v[2], &mean, &var, 1e-5))?;
    Ok(if eval.max_rel_error > train.max_rel_error { merge(eval, train) } else { merge(train, eval) })
}

fn case_layer_norm(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[6], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[6], -0.5, 0.5);
    check_ops(vec![x, gamma, beta], seed, o, |v| v[0].layer_norm(&v[1], &v[2], 1e-5))
}

fn case_relu6(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[40], -2.0, 8.0);
    check_ops(vec![x], seed, o, |v| Ok(v[0].relu6()))
}

fn case_activations(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[12], -2.0, 2.0);
    let p = rand_tensor(&mut r, &[12], 0.2, 3.0);
    check_ops(vec![x, p], seed, o, |v| {
        let parts = [
            v[0].gelu(),
            v[0].tanh(),
            v[0].sigmoid(),
            v[0].exp(),
            v[0].abs(),
            v[0].square(),
            v[1].ln(),
            v[1].sqrt(),
        ];
        Var::concat(&parts, 0)
    })
}

fn case_softmax(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[3, 5], -3.0, 3.0);
    check_ops(vec![x], seed, o, |v| v[0].softmax_last())
}

fn case_matmul(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0);
    let c = rand_tensor(&mut r, &[5, 2], -1.0, 1.0);
    check_ops(vec![a, b, c], seed, o, |v| v[0].bmm(&v[1])?.reshape(&[6, 5])?.matmul(&v[2]))
}

fn case_shape_ops(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
    let y = rand_tensor(&mut r, &[3, 1], -1.0, 1.0);
    check_ops(vec![x, y], seed, o, |v| {
        let a = v[0].permute(&[2, 0, 1])?.narrow(0, 1, 2)?;
        let b = v[0].transpose_last()?.sum_axis(1)?.mean_axis(0)?.reshape(&[1, 3, 1])?;
        let c = v[0].sub(&v[1])?.scale(0.5).add_scalar(1.0);
        let d = v[0].mean_axis(2)?.centered_cumsum(1)?;
        Var::concat(
            &[a.reshape(&[12])?, b.reshape(&[3])?, c.reshape(&[24])?, d.reshape(&[6])?, v[1].sum().reshape(&[1])?],
            0,
        )
    })
}

fn case_losses(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut r, &[4, 3], -3.0, 3.0);
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
    check_ops(vec![x], seed, o, |v| {
        let ce = v[0].cross_entropy(&[0, 2, 1, 2])?;
        let bce = v[0].bce_with_logits(&targets)?;
        Var::concat(&[ce.reshape(&[1])?, bce.reshape(&[1])?], 0)
    })
}

fn case_mhsa(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = Mhsa::new(&mut store, &mut r, "attn", 8, 2)?;
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 5, 8], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| m.forward(cx, x))
}

fn case_ffn(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let f = Ffn::new(&mut store, &mut r, "ffn", 6, 12);
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| f.forward(cx, ln.forward(cx, x)?))
}

/// Zero-initialized biases and norm shifts hide sign errors; give them values.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).kind == ParamKind::NoDecay).collect();
    for id in ids {
        let name = store.entry(id).name.clone();
        for v in store.get_mut(id).data_mut() {
            *v += if name.ends_with(".weight") { rng.gen_range(-0.3..0.3) } else { rng.gen_range(-0.5..0.5) };
        }
    }
}

fn case_stem(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = Stem::new(&mut store, &mut r, "stem", StemArgs { c_in: 3, c_out: 4 })?;
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| b.forward(cx, x))
}

fn case_irlb(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let res = Irlb::new(&mut store, &mut r, "a", IrlbArgs { c_in: 3, c_out: 3, stride: 1, expansion: 2.0 })?;
    let down = Irlb::new(&mut store, &mut r, "b", IrlbArgs { c_in: 3, c_out: 4, stride: 2, expansion: 2.0 })?;
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| down.forward(cx, res.forward(cx, x)?))
}

fn case_dsc_block(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = DscBlock::new(&mut store, &mut r, "dsc", DscArgs { c_in: 3, c_out: 4, hidden: 3, k: 5 })?;
    randomize_offsets(&mut store, &mut r);
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| Block::forward(&b, cx, x))
}

fn case_hybrid_block(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let args = HybridArgs { c_in: 3, d: 4, depth: 1, heads: 2, ffn_hidden: 8, patch: [2, 2], input_hw: [8, 8] };
    let b = HybridBlock::new(&mut store, &mut r, "hy", args)?;
    randomize_biases(&mut store, &mut r);
    let x = rand_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    check_layer(&store, x, seed, o, |cx, x| b.forward(cx, x))
}

fn tiny_model(seed: u64) -> Result<(Model, ChaCha8Rng)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::build(&ModelConfig { seed, ..ModelConfig::tiny(32) })?;
    randomize_offsets(&mut m.store, &mut r);
    randomize_biases(&mut m.store, &mut r);
    Ok((m, r))
}

fn case_model(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let (m, mut r) = tiny_model(seed)?;
    let x = rand_tensor(&mut r, &[2, 3, 32, 32], 0.0, 1.0);
    check_layer(&m.store, x, seed, o, |cx, x| m.forward(cx, x)?.cross_entropy(&[0, 1]))
}

fn case_apply_mask(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mask = MaskSpec::from_grid(2, 2, 2, vec![true, false, false, true])?;
    let x = rand_tensor(&mut r, &[2, 3, 4, 4], 0.0, 1.0);
    let tok = rand_tensor(&mut r, &[3], -1.0, 1.0);
    check_ops(vec![x, tok], seed, o, |v| apply_mask(v[0], &mask, v[1]))
}

fn case_simmim_loss(seed: u64, o: &GradCheckOptions) -> Result<GradCheckReport> {
    let (mut m, mut r) = tiny_model(seed)?;
    let head = MimHead::attach(&mut m, seed)?;
    for v in m.store.get_mut(head.mask_token).data_mut() {
        *v = r.gen_range(0.0..1.0);
    }
    let mask = MaskSpec::from_grid(4, 4, 8, (0..16).map(|i| i % 3 != 1).collect())?;
    let x = rand_tensor(&mut r, &[2, 3, 32, 32], 0.0, 1.0);
    let ids: Vec<_> = m.store.trainable().collect();
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| m.store.get(id).clone()));
    // the loss is already scalar: no random weighting
    gradient_check_with(
        &m.store,
        |g, store, v| {
            let cx = Ctx::new(g, store, Mode::Train);
            for (&id, &var) in ids.iter().zip(&v[1..]) {
                cx.bind(id, var);
            }
            let xm = apply_mask(v[0], &mask, cx.param(head.mask_token))?;
            let pred = head.predict(&cx, m.features(&cx, xm)?)?;
            crate::simmim::simmim_loss(pred, v[0], &mask)
        },
        &inputs,
        o,
    )
}

/// Every case, in report order.
pub fn cases() -> Vec<GradCase> {
    macro_rules! case {
        ($n:literal, $f:ident) => {
            GradCase { name: $n, run: $f }
        };
    }
    vec![
        case!("conv", case_conv),
        case!("depthwise", case_depthwise),
        case!("grouped_conv", case_grouped),
        case!("bilinear_sample", case_bilinear),
        case!("snake_conv", case_snake_conv),
        case!("batch_norm", case_batch_norm),
        case!("layer_norm", case_layer_norm),
        case!("relu6", case_relu6),
        case!("activations", case_activations),
        case!("softmax", case_softmax),
        case!("matmul", case_matmul),
        case!("shape_ops", case_shape_ops),
        case!("losses", case_losses),
        case!("mhsa", case_mhsa),
        case!("ffn", case_ffn),
        case!("stem", case_stem),
        case!("irlb", case_irlb),
        case!("dsc_block", case_dsc_block),
        case!("hybrid_block", case_hybrid_block),
        case!("model", case_model),
        case!("apply_mask", case_apply_mask),
        case!("simmim_loss", case_simmim_loss),
    ]
}

pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs the selected cases (all when `only` is empty). Unknown names are a
/// configuration error.
pub fn run_suite(only: &[String], seed: u64, tolerance: f64, opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    let all = cases();
    if let Some(bad) = only.iter().find(|n| !all.iter().any(|c| c.name == n.as_str())) {
        return Err(Error::config("op", format!("unknown case `{bad}`; known: {}", case_names().join(", "))));
    }
    let mut out = Vec::new();
    for case in all.iter().filter(|c| only.is_empty() || only.iter().any(|n| n == c.name)) {
        let r = case.run(seed, opts)?;
        log::info!("{}: max rel err {:.3e} over {} coords", case.name, r.max_rel_error, r.checked);
        out.push(CaseResult {
            name: case.name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped_kinks: r.skipped_kinks,
            passed: r.checked > 0 && r.max_rel_error <= tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_case_rejected() {
        let r = run_suite(&["nope".into()], 0, 1e-4, &GradCheckOptions::default());
        assert!(matches!(r, Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn names_are_unique() {
        let mut n = case_names();
        n.sort_unstable();
        n.dedup();
        assert_eq!(n.len(), cases().len());
    }
}
