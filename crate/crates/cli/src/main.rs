//! `snakevit` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 threshold not met,
//! 4 I/O or file-format error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use snakevit::data::{self, Dataset, SynthSpec, SynthTask};
use snakevit::explain;
use snakevit::gradsuite;
use snakevit::model::{Model, ModelConfig};
use snakevit::reference;
use snakevit::simmim::{self, PretrainConfig};
use snakevit::tensor::GradCheckOptions;
use snakevit::trainer::{self, TrainConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("threshold not met: {0}")]
    Threshold(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Threshold(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<snakevit::Error> for CliError {
    fn from(e: snakevit::Error) -> Self {
        use snakevit::Error as E;
        match e {
            E::Io(_) | E::CorruptManifest(_) | E::CorruptCheckpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "snakevit", version, about = "Hybrid CNN/transformer kit: cost analysis, gradient checks, synthetic data, pretraining, training, evaluation and Grad-CAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Report parameters and multiply-accumulates per layer.
    Analyze(AnalyzeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic vessel corpus.
    Synth(SynthArgs),
    /// Masked-image-modeling pretraining; writes an encoder checkpoint.
    Pretrain(PretrainArgs),
    /// Supervised training; writes a model checkpoint and a log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus; writes a metric report.
    Eval(EvalArgs),
    /// Grad-CAM heat map of one image as an 8-bit PGM.
    Cam(CamArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// every component on
    None,
    /// snake-convolution downsampling replaced by an inverted residual block
    NoDsc,
    /// transformer stages replaced by convolutional stages
    NoVit,
    /// both of the above
    Baseline,
}

impl Ablation {
    fn flags(self) -> (bool, bool) {
        match self {
            Ablation::None => (true, true),
            Ablation::NoDsc => (true, false),
            Ablation::NoVit => (false, true),
            Ablation::Baseline => (false, false),
        }
    }
}

#[derive(Args)]
struct ModelSource {
    /// JSON model configuration; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale configuration instead of the full one.
    #[arg(long)]
    tiny: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Square input resolution (multiple of 32).
    #[arg(long)]
    input_size: Option<usize>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Exit 3 when totals deviate more than 10% from the embedded reference targets.
    #[arg(long)]
    check_reference: bool,
    /// Component ablation applied on top of the configuration.
    #[arg(long, value_enum, default_value_t = Ablation::None)]
    ablation: Ablation,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = gradsuite::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Only run the named cases (repeatable); see --list.
    #[arg(long = "op")]
    ops: Vec<String>,
    /// List case names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON corpus specification; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of images.
    #[arg(long)]
    n: Option<usize>,
    /// Index of the first image (disjoint ranges give disjoint splits).
    #[arg(long)]
    offset: Option<usize>,
    /// Image side length.
    #[arg(long)]
    hw: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Tortuosity,
    Lesion,
    Both,
}

impl From<TaskArg> for SynthTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Tortuosity => SynthTask::Tortuosity,
            TaskArg::Lesion => SynthTask::Lesion,
            TaskArg::Both => SynthTask::Both,
        }
    }
}

/// Configuration file of `pretrain`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PretrainRun {
    model: ModelConfig,
    pretrain: PretrainConfig,
}

/// Configuration file of `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainRun {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON with optional `model` and `pretrain` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale model configuration.
    #[arg(long)]
    tiny: bool,
    /// Corpus directory (or manifest path).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for encoder.stk, pretrain_log.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model and pretraining seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale model configuration.
    #[arg(long)]
    tiny: bool,
    /// Training corpus directory (or manifest path).
    #[arg(long)]
    data: PathBuf,
    /// Corpus evaluated after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Pretrained encoder checkpoint to initialize from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Output directory for model.stk, train_log.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint (its `.json` sidecar must sit next to it).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metric report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Exit 3 when the AUC is below this value.
    #[arg(long)]
    min_auc: Option<f64>,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Image index within the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Target class; defaults to the predicted one.
    #[arg(long)]
    class: Option<usize>,
    /// Feature map to explain.
    #[arg(long, default_value = explain::DEFAULT_LAYER)]
    layer: String,
    /// PGM file to write.
    #[arg(long)]
    out: PathBuf,
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// `base` with the keys of the JSON file at `path` laid over it. Unknown
/// keys are rejected by the target type.
fn resolve<T: Serialize + DeserializeOwned>(base: T, path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else { return Ok(base) };
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn echo<T: Serialize>(cfg: &T) -> CliResult<String> {
    let s = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))? + "\n";
    eprint!("resolved config:\n{s}");
    Ok(s)
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn base_model(tiny: bool) -> ModelConfig {
    if tiny {
        ModelConfig::tiny(reference::INPUT_SIZE)
    } else {
        ModelConfig::default()
    }
}

/// Input size, class count and head mode always follow the corpus.
fn fit_to_data(cfg: &mut ModelConfig, data: &Dataset) {
    cfg.input_size = data.hw();
    cfg.num_classes = data.classes.len();
    cfg.head = data.head();
}

fn threads() -> CliResult<usize> {
    match std::env::var("STK_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("STK_THREADS must be a positive integer, got `{s}`"))),
        },
    }
}

fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    let mut cfg = resolve(base_model(a.model.tiny), a.model.config.as_deref())?;
    let (vit, dsc) = a.ablation.flags();
    cfg = cfg.with_flags(vit, dsc);
    if let Some(s) = a.input_size {
        cfg.input_size = [s, s];
    }
    echo(&cfg)?;
    let model = Model::build(&cfg)?;
    let mut report = model.cost(cfg.input_size)?;
    let mut ok = true;
    if a.check_reference {
        let targets = match a.ablation {
            Ablation::None => (reference::PARAMS_M, reference::GMACS),
            Ablation::NoDsc => (reference::NO_DSC_PARAMS_M, reference::NO_DSC_GMACS),
            other => return Err(CliError::Config(format!("no reference targets for ablation {other:?}"))),
        };
        if cfg.input_size != [reference::INPUT_SIZE; 2] {
            return Err(CliError::Config(format!("reference targets are for {0}x{0} input", reference::INPUT_SIZE)));
        }
        ok = report.check_against(Some(targets.0), Some(targets.1), reference::TOLERANCE);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?);
    } else {
        print!("{}", report.to_table());
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::Threshold("cost deviates from the reference targets by more than 10%".into()))
    }
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if a.list {
        for n in gradsuite::case_names() {
            println!("{n}");
        }
        return Ok(());
    }
    if !(a.tolerance > 0.0) {
        return Err(CliError::Config(format!("tolerance must be positive, got {}", a.tolerance)));
    }
    let opts = GradCheckOptions { seed: a.seed, ..GradCheckOptions::default() };
    let results = gradsuite::run_suite(&a.ops, a.seed, a.tolerance, &opts)?;
    let w = results.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<w$}  max_rel_error {:.3e}  checked {:>4}  skipped {:>3}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    println!("{} of {} cases within {:e}", results.len() - failed.len(), results.len(), a.tolerance);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = resolve(SynthSpec::default(), a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(o) = a.offset {
        spec.offset = o;
    }
    if let Some(hw) = a.hw {
        spec.hw = hw;
    }
    if let Some(t) = a.task {
        spec.task = t.into();
    }
    echo(&spec)?;
    create_dir(&a.out)?;
    let (_, manifest) = data::gen_dataset(&spec, &a.out)?;
    println!("{} images of {1}x{1} written to {2} (images sha256 {3})", manifest.n, manifest.hw, a.out.display(), manifest.sha256[0]);
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let base = PretrainRun { model: base_model(a.tiny), ..PretrainRun::default() };
    let mut run = resolve(base, a.config.as_deref())?;
    let data = data::load_dataset(&a.data)?;
    fit_to_data(&mut run.model, &data);
    if let Some(s) = a.seed {
        run.model.seed = s;
        run.pretrain.seed = s;
    }
    if let Some(e) = a.epochs {
        run.pretrain.epochs = e;
    }
    let resolved = echo(&run)?;
    let mut model = Model::build(&run.model)?;
    let (_, log) = simmim::pretrain(&mut model, &data, &run.pretrain)?;
    create_dir(&a.out)?;
    // the classifier head and reconstruction head are not part of the encoder
    let ckpt = a.out.join("encoder.stk");
    model.save_filtered(&ckpt, |n| !n.starts_with("head.") && !n.starts_with(simmim::MimHead::PREFIX))?;
    write_file(&a.out.join("pretrain_log.csv"), simmim::pretrain_csv(&log).as_bytes())?;
    write_file(&a.out.join("config.json"), resolved.as_bytes())?;
    if let Some(last) = log.last() {
        println!("pretrained {} epochs, final loss {:.6}; encoder at {}", last.epoch, last.loss, ckpt.display());
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let base = TrainRun { model: base_model(a.tiny), ..TrainRun::default() };
    let mut run = resolve(base, a.config.as_deref())?;
    let data = data::load_dataset(&a.data)?;
    let eval = a.eval.as_deref().map(data::load_dataset).transpose()?;
    fit_to_data(&mut run.model, &data);
    if let Some(s) = a.seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(p) = &a.init_from {
        run.model.pretrained_init = Some(p.to_string_lossy().into_owned());
    }
    if run.train.stop_at_auc.is_some() && eval.is_none() {
        return Err(CliError::Config("train.stop_at_auc needs --eval".into()));
    }
    let resolved = echo(&run)?;
    let mut model = Model::build(&run.model)?;
    let log = trainer::train(&mut model, &data, eval.as_ref(), &run.train)?;
    create_dir(&a.out)?;
    model.save(&a.out.join("model.stk"))?;
    write_file(&a.out.join("train_log.csv"), log.to_csv().as_bytes())?;
    write_file(&a.out.join("config.json"), resolved.as_bytes())?;
    let last = log.entries.last();
    match last.and_then(|e| e.metrics.as_ref()) {
        Some(m) => println!("trained {} epochs, final loss {:.6}, eval auc {:.4}", log.entries.len(), last.unwrap().loss, m.auc),
        None => println!("trained {} epochs, final loss {:.6}", log.entries.len(), last.map_or(f64::NAN, |e| e.loss)),
    }
    match (run.train.stop_at_auc, log.reached_at) {
        (Some(th), None) => Err(CliError::Threshold(format!("eval auc never reached {th}"))),
        (Some(_), Some(epoch)) => {
            println!("auc threshold reached at epoch {epoch}");
            Ok(())
        }
        _ => Ok(()),
    }
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let model = Model::load(&a.model)?;
    let data = data::load_dataset(&a.data)?;
    let report = trainer::evaluate(&model, &data)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))? + "\n";
    write_file(&a.out, json.as_bytes())?;
    println!("auc {:.4}  auprc {:.4}  f1 {:.4}  accuracy {:.4}", report.auc, report.auprc, report.f1, report.accuracy);
    match a.min_auc {
        Some(th) if report.auc < th => Err(CliError::Threshold(format!("auc {:.4} below {th}", report.auc))),
        _ => Ok(()),
    }
}

fn cam(a: CamArgs) -> CliResult<()> {
    let model = Model::load(&a.model)?;
    let data = data::load_dataset(&a.data)?;
    if a.index >= data.len() {
        return Err(CliError::Config(format!("index {} out of range for {} images", a.index, data.len())));
    }
    let image = data.image(a.index);
    let class = match a.class {
        Some(c) => c,
        None => {
            let p = trainer::predict(&model, &image, 1)?;
            (0..p[0].len()).max_by(|&i, &j| p[0][i].total_cmp(&p[0][j])).unwrap_or(0)
        }
    };
    let map = explain::grad_cam(&model, &image, class, &a.layer)?;
    explain::write_pgm(&map.values, &a.out)?;
    let s = map.values.shape();
    println!("class {class} at layer {}: {}x{} map written to {}", map.layer, s[0], s[1], a.out.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let n = threads()?;
    log::debug!("STK_THREADS={n}; all kernels run on the calling thread");
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cam(a) => cam(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
