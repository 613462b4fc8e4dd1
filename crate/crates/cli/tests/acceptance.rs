//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Tolerances are pinned below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snakevit::data::{self, Dataset, Labels, SynthSpec};
use snakevit::dsc::{DscArgs, DscBlock};
use snakevit::gradsuite;
use snakevit::metrics::{average_precision, roc_auc};
use snakevit::model::{HeadMode, Model, ModelConfig, DOWNSAMPLE};
use snakevit::nn::uniform;
use snakevit::params::{Ctx, Mode, ParamStore};
use snakevit::reference;
use snakevit::simmim::{self, PretrainConfig};
use snakevit::tensor::GradCheckOptions;
use snakevit::trainer::{self, TrainConfig, TrainLog};
use snakevit::{Graph, Tensor};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const DSC_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-10;
const AUC_TARGET: f64 = 0.90;
const DESK_EPOCHS: usize = 100;
const DESK_BUDGET: Duration = Duration::from_secs(900);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn gradient_suite() -> Outcome {
    let required = [
        "conv", "depthwise", "bilinear_sample", "batch_norm", "layer_norm", "relu6", "softmax", "mhsa", "ffn", "irlb",
        "dsc_block", "hybrid_block", "model", "simmim_loss",
    ];
    let names = gradsuite::case_names();
    if let Some(missing) = required.iter().find(|r| !names.contains(r)) {
        return Err(format!("no gradient case for {missing}"));
    }
    let t = Instant::now();
    let results = gradsuite::run_suite(&[], 0, GRAD_TOL, &GradCheckOptions::default()).map_err(e)?;
    let elapsed = t.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("empty suite")?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    check(
        failed.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "{} cases, worst {} at {:.2e} (tol {GRAD_TOL:e}), failed {failed:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn dsc_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_in = rng.gen_range(2..6);
        let args = DscArgs { c_in, c_out: rng.gen_range(2..8), hidden: rng.gen_range(2..6), k: [3, 5, 7, 9][seed as usize % 4] };
        let mut store = ParamStore::new();
        let block = DscBlock::new(&mut store, &mut rng, "dsc", args).map_err(e)?;
        let hw = 2 * rng.gen_range(3..8);
        let x = uniform(&mut rng, &[2, c_in, hw, hw + 2], 1.0);
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, Mode::Train);
        let a = block.forward(&cx, g.constant(x.clone())).map_err(e)?.tensor();
        let b = block.forward_standard(&cx, g.constant(x)).map_err(e)?.tensor();
        worst = worst.max(a.max_abs_diff(&b));
    }
    check(worst <= DSC_TOL, format!("20 seeds, max abs diff {worst:.2e} (tol {DSC_TOL:e})"))
}

fn simmim_contract() -> Outcome {
    let d = PretrainConfig::default();
    let grid = reference::INPUT_SIZE / d.mask_patch;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = simmim::sample_mask(grid, grid, d.mask_ratio, d.mask_patch, &mut rng).map_err(e)?;
    let expected = (d.mask_ratio * (grid * grid) as f64).round() as usize;
    let target = uniform(&mut rng, &[2, 3, reference::INPUT_SIZE, reference::INPUT_SIZE], 1.0);
    let pred = uniform(&mut rng, target.shape(), 1.0);

    let g = Graph::new();
    let p = g.param(pred);
    let loss = simmim::simmim_loss(p, g.constant(target.clone()), &m).map_err(e)?;
    let grad = g.backward(loss).map_err(e)?.wrt(p);
    let pm = m.pixel_mask();
    let plane = pm.numel();
    let (mut leaked, mut dead) = (0usize, 0usize);
    for (i, &gv) in grad.data().iter().enumerate() {
        match (pm.data()[i % plane] == 1.0, gv == 0.0) {
            (false, false) => leaked += 1,
            (true, true) => dead += 1,
            _ => {}
        }
    }

    let g = Graph::new();
    let perfect = simmim::simmim_loss(g.param(target.clone()), g.constant(target), &m).map_err(e)?.value().item();
    check(
        m.count() == expected && leaked == 0 && dead == 0 && perfect == 0.0,
        format!(
            "mask {} of {} patches (expected {expected}), nonzero unmasked grads {leaked}, zero masked grads {dead}, perfect loss {perfect}",
            m.count(),
            grid * grid
        ),
    )
}

fn cost_calibration() -> Outcome {
    let hw = [reference::INPUT_SIZE; 2];
    let mut full = Model::build(&ModelConfig::default()).map_err(e)?.cost(hw).map_err(e)?;
    let ok_full = full.check_against(Some(reference::PARAMS_M), Some(reference::GMACS), reference::TOLERANCE);
    let mut no_dsc = Model::build(&ModelConfig::default().with_flags(true, false)).map_err(e)?.cost(hw).map_err(e)?;
    let ok_no_dsc = no_dsc.check_against(Some(reference::NO_DSC_PARAMS_M), Some(reference::NO_DSC_GMACS), reference::TOLERANCE);
    let mut mismatched = Vec::new();
    for (v, s) in [(true, true), (true, false), (false, true), (false, false)] {
        let m = Model::build(&ModelConfig::tiny(64).with_flags(v, s)).map_err(e)?;
        let report = m.cost([64, 64]).map_err(e)?;
        let mut stat: Vec<(String, u64)> = report.rows.iter().filter(|r| r.macs > 0).map(|r| (r.name.clone(), r.macs)).collect();
        let mut measured = m.measured_cost([64, 64]).map_err(e)?;
        stat.sort();
        measured.sort();
        if stat != measured || measured.iter().map(|r| r.1).sum::<u64>() != report.total_macs {
            mismatched.push(format!("V={v} S={s}"));
        }
    }
    let dev = |r: &snakevit::cost::CostReport| {
        r.reference.iter().map(|c| format!("{} {:+.1}%", c.label, 100.0 * c.relative_deviation)).collect::<Vec<_>>().join(" ")
    };
    check(
        ok_full && ok_no_dsc && mismatched.is_empty(),
        format!(
            "full {:.3}M/{:.3}G ({}), no-dsc {:.3}M/{:.3}G ({}), static vs executed mismatches {mismatched:?}",
            full.params_m,
            full.gmacs,
            dev(&full),
            no_dsc.params_m,
            no_dsc.gmacs,
            dev(&no_dsc)
        ),
    )
}

fn architecture_contract() -> Outcome {
    let mut bad = Vec::new();
    for (v, s) in [(true, true), (true, false), (false, true), (false, false)] {
        for (cfg, n) in [(ModelConfig::default(), 1), (ModelConfig { num_classes: 5, ..ModelConfig::tiny(96) }, 3)] {
            let cfg = cfg.with_flags(v, s);
            let model = Model::build(&cfg).map_err(e)?;
            let factor = model.downsample_factor().map_err(e)?;
            let [h, w] = cfg.input_size;
            let g = Graph::new();
            let cx = Ctx::new(&g, &model.store, Mode::Eval).frozen();
            let logits = model.forward(&cx, g.constant(Tensor::zeros(&[n, 3, h, w]))).map_err(e)?;
            if factor != DOWNSAMPLE || logits.shape() != [n, cfg.num_classes] {
                bad.push(format!("V={v} S={s} {h}px: factor {factor}, logits {:?}", logits.shape()));
            }
        }
    }
    check(bad.is_empty(), format!("4 flag combinations x 2 configs, violations {bad:?}"))
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Recounts precision and recall from scratch at every cut of the
/// (score desc, index asc) order.
fn sweep_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for k in 1..=order.len() {
        let tp = order[..k].iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / k as f64);
        prev_recall = recall;
    }
    ap
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut auc_err, mut ap_err): (f64, f64) = (0.0, 0.0);
    for inst in 0..1000 {
        let n = rng.gen_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        labels[0] = true;
        labels[1] = false;
        // every other instance on a coarse grid so ties occur
        let scores: Vec<f64> =
            (0..n).map(|_| if inst % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(0..5) as f64 / 4.0 }).collect();
        auc_err = auc_err.max((roc_auc(&scores, &labels).map_err(e)? - pairwise_auc(&scores, &labels)).abs());
        ap_err = ap_err.max((average_precision(&scores, &labels).map_err(e)? - sweep_ap(&scores, &labels)).abs());
    }
    let mut loss_err: f64 = 0.0;
    for c in [2usize, 3, 5, 10] {
        let g = Graph::new();
        let logits = g.constant(Tensor::full(&[4, c], 0.7));
        let ce = trainer::classification_loss(logits, &Labels::Classes(vec![0, 1, c - 1, 1]), HeadMode::Multiclass);
        loss_err = loss_err.max((ce.map_err(e)?.value().item() - (c as f64).ln()).abs());
        let bce = trainer::classification_loss(
            g.constant(Tensor::zeros(&[2, c])),
            &Labels::MultiHot(vec![vec![true; c], vec![false; c]]),
            HeadMode::Multilabel,
        );
        loss_err = loss_err.max((bce.map_err(e)?.value().item() - 2f64.ln()).abs());
    }
    check(
        auc_err <= METRIC_TOL && ap_err <= METRIC_TOL && loss_err <= LOSS_TOL,
        format!("1000 instances: auc {auc_err:.1e}, ap {ap_err:.1e} (tol {METRIC_TOL:e}); ln C / ln 2 losses {loss_err:.1e} (tol {LOSS_TOL:e})"),
    )
}

fn desk_corpus() -> snakevit::Result<(Dataset, Dataset)> {
    let train = data::generate(&SynthSpec::default())?;
    let test = data::generate(&SynthSpec { n: 100, offset: 200, ..SynthSpec::default() })?;
    Ok((train, test))
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: DESK_EPOCHS,
        batch_size: 8,
        base_lr: 1e-3,
        seed,
        stop_at_auc: Some(AUC_TARGET),
        augment: true,
        ..TrainConfig::default()
    }
}

fn desk_model_config(seed: u64, init: Option<&Path>) -> ModelConfig {
    ModelConfig { seed, pretrained_init: init.map(|p| p.to_string_lossy().into_owned()), ..ModelConfig::tiny(64) }
}

fn desk_run(train: &Dataset, test: &Dataset, seed: u64, init: Option<&Path>) -> snakevit::Result<TrainLog> {
    let mut model = Model::build(&desk_model_config(seed, init))?;
    trainer::train(&mut model, train, Some(test), &desk_train_config(seed))
}

fn desk_learning() -> Outcome {
    let (train, test) = desk_corpus().map_err(e)?;
    let t = Instant::now();
    let log = desk_run(&train, &test, 7, None).map_err(e)?;
    let elapsed = t.elapsed();
    let again = desk_run(&train, &test, 7, None).map_err(e)?;
    let best = log.entries.iter().filter_map(|e| e.metrics.as_ref()).map(|m| m.auc).fold(0.0, f64::max);
    check(
        log.reached_at.is_some() && log == again && elapsed < DESK_BUDGET,
        format!(
            "AUC {AUC_TARGET} reached at epoch {:?} (best {best:.4}), rerun identical {}, {:.1}s",
            log.reached_at,
            log == again,
            elapsed.as_secs_f64()
        ),
    )
}

fn pretraining_direction() -> Outcome {
    let (train, test) = desk_corpus().map_err(e)?;
    let dir = tempfile::tempdir().map_err(e)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let mut model = Model::build(&desk_model_config(seed, None)).map_err(e)?;
        let cfg = PretrainConfig {
            epochs: 30,
            batch_size: 8,
            warmup_epochs: 2,
            mask_patch: 8,
            seed,
            augment: true,
            ..PretrainConfig::default()
        };
        simmim::pretrain(&mut model, &train, &cfg).map_err(e)?;
        let ckpt = dir.path().join(format!("encoder{seed}.stk"));
        model
            .save_filtered(&ckpt, |n| !n.starts_with("head.") && !n.starts_with(simmim::MimHead::PREFIX))
            .map_err(e)?;
        let pre = desk_run(&train, &test, seed, Some(&ckpt)).map_err(e)?.reached_at;
        let scratch = desk_run(&train, &test, seed, None).map_err(e)?.reached_at;
        ok &= match (pre, scratch) {
            (Some(p), Some(s)) => p <= s,
            (Some(_), None) => true,
            _ => false,
        };
        rows.push(format!("seed {seed}: pretrained {pre:?} vs scratch {scratch:?}"));
    }
    check(ok, rows.join(", "))
}

struct CliRun {
    stdout: Vec<Vec<u8>>,
    files: BTreeMap<PathBuf, Vec<u8>>,
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect(root, &p, out)?;
        } else {
            out.insert(p.strip_prefix(root).expect("under root").to_path_buf(), std::fs::read(&p)?);
        }
    }
    Ok(())
}

/// Every subcommand, run inside `dir` with relative paths.
fn cli_pipeline(dir: &Path) -> Result<CliRun, String> {
    std::fs::write(dir.join("pretrain.json"), r#"{"pretrain": {"batch_size": 8, "mask_patch": 8, "warmup_epochs": 0}}"#)
        .map_err(e)?;
    std::fs::write(dir.join("train.json"), r#"{"train": {"batch_size": 8}}"#).map_err(e)?;
    let steps: &[&[&str]] = &[
        &["synth", "--out", "train", "--n", "16", "--seed", "3"],
        &["synth", "--out", "test", "--n", "8", "--offset", "16", "--seed", "3"],
        &["analyze", "--json"],
        &["analyze", "--tiny", "--input-size", "64", "--ablation", "no-vit"],
        &["gradcheck", "--op", "conv", "--op", "snake_conv"],
        &["pretrain", "--tiny", "--config", "pretrain.json", "--data", "train", "--out", "pre", "--epochs", "1", "--seed", "1"],
        &[
            "train", "--tiny", "--config", "train.json", "--data", "train", "--eval", "test", "--init-from", "pre/encoder.stk",
            "--out", "run", "--epochs", "2", "--seed", "1",
        ],
        &["eval", "--model", "run/model.stk", "--data", "test", "--out", "run/report.json"],
        &["cam", "--model", "run/model.stk", "--data", "test", "--index", "2", "--out", "run/cam.pgm"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_snakevit"))
            .args(*args)
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(e)?;
        if !out.status.success() {
            return Err(format!("`snakevit {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        stdout.push(out.stdout);
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files).map_err(e)?;
    Ok(CliRun { stdout, files })
}

fn cli_determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(e)?;
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    std::fs::create_dir(&a).map_err(e)?;
    std::fs::create_dir(&b).map_err(e)?;
    let (ra, rb) = (cli_pipeline(&a)?, cli_pipeline(&b)?);
    let differing: Vec<String> = ra
        .files
        .keys()
        .chain(rb.files.keys())
        .filter(|k| ra.files.get(*k) != rb.files.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let stdout_same = ra.stdout == rb.stdout;
    check(
        differing.is_empty() && stdout_same,
        format!("{} artifacts from 9 commands, differing {differing:?}, stdout identical {stdout_same}", ra.files.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient suite", gradient_suite),
        ("snake-conv identity", dsc_identity),
        ("masked-modeling loss contract", simmim_contract),
        ("cost calibration", cost_calibration),
        ("architecture contract", architecture_contract),
        ("metric oracles", metric_oracles),
        ("desk-scale learning", desk_learning),
        ("pretraining direction", pretraining_direction),
        ("CLI determinism", cli_determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n}. {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n}. {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
