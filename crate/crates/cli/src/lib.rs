//! Subcommand implementations behind the `vastsum` binary.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error.

pub mod args;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use vastsum_core::autodiff::{finite_difference_check, finite_difference_check_with_fault, BoundParams, Fault, Tape};
use vastsum_core::data::{generate_synthetic, make_folds, write_atomic};
use vastsum_core::decoder::{budget_capacity, decode_summary};
use vastsum_core::eval::{evaluate_oracle, evaluate_records, flip_rate};
use vastsum_core::head::HeadConfig;
use vastsum_core::model::infer;
use vastsum_core::scorer::ScorerConfig;
use vastsum_core::trainer::{log_to_csv, smooth_objective, Trainer, VideoDraws};
use vastsum_core::{Checkpoint, Dataset, DatasetMode, ModelConfig, RunConfig, SyntheticConfig};

pub use args::{Cli, Command};

/// Gradient check tolerance on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step of the gradient check.
pub const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] vastsum_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use vastsum_core::Error as E;
        match self {
            CliError::Check(_) => 1,
            CliError::Core(E::Numeric { .. } | E::Shape { .. }) => 1,
            CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Decode(a) => decode(&a),
        Command::StabilityReport(a) => stability_report(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

/// Parsed config plus the raw document, to tell explicit keys from defaults.
fn load_config(path: Option<&Path>) -> Result<(RunConfig, Value)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), Value::Object(Default::default())));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    Ok((cfg, raw))
}

fn explicit(raw: &Value, pointer: &str) -> bool {
    raw.pointer(pointer).is_some()
}

fn load_dataset(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<Dataset> {
    let path = flag
        .or(cfg.dataset.as_ref())
        .ok_or_else(|| CliError::Usage("no dataset given; pass --dataset or set `dataset` in the config".into()))?;
    Dataset::load(path).map_err(|e| CliError::Usage(format!("cannot load dataset {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

#[derive(Clone, Copy)]
enum Part {
    Train,
    Test,
}

fn select_fold(data: Dataset, a: &args::DataArgs, seed: u64, part: Part) -> Result<Dataset> {
    let Some(k) = a.fold else {
        return Ok(data);
    };
    let folds = make_folds(&data.ids(), a.folds, seed)?;
    let fold = folds
        .get(k)
        .ok_or_else(|| CliError::Usage(format!("--fold {k} is out of range for {} folds", a.folds)))?;
    let ids = match part {
        Part::Train => &fold.train,
        Part::Test => &fold.test,
    };
    Ok(data.subset(ids)?)
}

/// Seeded hold-out of `fraction` of the videos; training keeps dataset order.
fn split_validation(data: Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if fraction == 0.0 {
        return Ok((data, None));
    }
    let n = data.len();
    let n_val = ((fraction * n as f64).round() as usize).max(1);
    if n_val >= n {
        return Err(CliError::Usage(format!(
            "train.val_fraction {fraction} leaves no training videos out of {n}"
        )));
    }
    let mut ids = data.ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_ids: Vec<String> = ids[..n_val].to_vec();
    let train_ids: Vec<String> = data.ids().into_iter().filter(|id| !val_ids.contains(id)).collect();
    let val_ids: Vec<String> = data.ids().into_iter().filter(|id| val_ids.contains(id)).collect();
    Ok((data.subset(&train_ids)?, Some(data.subset(&val_ids)?)))
}

/// Worker count from `VASTSUM_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("VASTSUM_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(CliError::Usage(format!("VASTSUM_THREADS: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "VASTSUM_THREADS must be a positive integer, got `{s}`"
            ))),
        },
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(vastsum_core::Error::from)?;
            Ok(())
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--rho must lie in (0, 1], got {rho}")))
    }
}

fn check_features(ck: &Checkpoint, data: &Dataset) -> Result<()> {
    if ck.model.scorer.input_dim != data.feature_dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}-dimensional features, dataset has {}",
            ck.model.scorer.input_dim,
            data.feature_dim()
        )));
    }
    Ok(())
}

/// Model scores per video under `mode`: `mu` for TVSum, `p` for SumMe.
fn predict(ck: &Checkpoint, data: &Dataset, mode: DatasetMode) -> Result<Vec<Vec<f64>>> {
    data.videos
        .iter()
        .map(|v| {
            Ok(infer(&ck.params, &ck.model, &v.features, &v.segments)?
                .scores(mode)
                .to_vec())
        })
        .collect()
}

pub fn gen_data(a: &args::GenDataArgs) -> Result<()> {
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.synthetic.seed = seed;
    }
    if let Some(mode) = a.mode {
        cfg.synthetic.mode = mode;
    }
    if let Some(n) = a.videos {
        cfg.synthetic.n_videos = n;
    }
    cfg.validate()?;
    let data = generate_synthetic(&cfg.synthetic)?;
    data.save(&a.out)?;
    eprintln!("wrote {} {} videos to {}", data.len(), data.mode, a.out.display());
    Ok(())
}

pub fn train(a: &args::TrainArgs) -> Result<()> {
    let (mut cfg, raw) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    let data = load_dataset(a.data.dataset.as_ref(), &cfg)?;
    match a.mode {
        Some(mode) => cfg.train.mode = mode,
        None if !explicit(&raw, "/train/mode") => cfg.train.mode = data.mode,
        None => {}
    }
    // feature width is a property of the data unless pinned by the config
    if !explicit(&raw, "/model/scorer/input_dim") {
        cfg.model.scorer.input_dim = data.feature_dim();
    }
    if let Some(path) = &a.data.dataset {
        cfg.dataset = Some(path.clone());
    }
    cfg.validate()?;
    let threads = threads_from_env()?;

    let data = select_fold(data, &a.data, cfg.train.seed, Part::Train)?;
    let (train_set, val_set) = split_validation(data, cfg.train.val_fraction, cfg.train.seed)?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    std::fs::create_dir_all(&out).map_err(vastsum_core::Error::from)?;
    cfg.out_dir = Some(out.clone());
    let mut resolved = serde_json::to_string_pretty(&cfg).map_err(vastsum_core::Error::from)?;
    resolved.push('\n');
    write_atomic(&out.join("config.json"), resolved.as_bytes())?;

    let checkpoint = |params: &vastsum_core::params::ParamStore, epoch: Option<usize>| Checkpoint {
        model: cfg.model.clone(),
        mode: cfg.train.mode,
        epoch,
        params: params.clone(),
    };
    let log_path = out.join("train_log.csv");
    let mut log = Vec::new();
    let trainer = Trainer::new(&cfg.model, &cfg.loss, &cfg.train).with_threads(threads);
    let outcome = trainer.run(&train_set, val_set.as_ref(), |report, params| {
        log.push(report.clone());
        write_atomic(&log_path, log_to_csv(&log)?.as_bytes())?;
        checkpoint(params, Some(report.losses.epoch)).save(&out.join("last.json"))?;
        eprintln!(
            "epoch {:>4}  main {:.6}  total {:.6}",
            report.losses.epoch, report.losses.main, report.losses.total
        );
        Ok(())
    })?;

    let last_epoch = outcome.log.last().map(|r| r.losses.epoch);
    checkpoint(&outcome.params, last_epoch).save(&out.join("final.json"))?;
    if let Some(best) = &outcome.best {
        checkpoint(&best.params, Some(best.epoch)).save(&out.join("best.json"))?;
        eprintln!("best validation rho {:.4} at epoch {}", best.val_rho, best.epoch);
    }
    eprintln!("wrote checkpoints and train_log.csv to {}", out.display());
    Ok(())
}

pub fn eval(a: &args::EvalArgs) -> Result<()> {
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let data = load_dataset(a.data.dataset.as_ref(), &cfg)?;
    let protocol = a.mode.unwrap_or(data.mode);
    if protocol != data.mode {
        return Err(CliError::Usage(format!(
            "protocol {protocol} does not match the dataset's {} annotations",
            data.mode
        )));
    }
    let data = select_fold(data, &a.data, cfg.train.seed, Part::Test)?;
    let report = match (&a.checkpoint, a.oracle) {
        (_, true) => evaluate_oracle(protocol, &data.videos)?,
        (Some(path), false) => {
            let ck = load_checkpoint(path)?;
            check_features(&ck, &data)?;
            evaluate_records(protocol, &data.videos, &predict(&ck, &data, protocol)?)?
        }
        (None, false) => {
            return Err(CliError::Usage(
                "--checkpoint is required unless --oracle is given".into(),
            ))
        }
    };
    emit(a.out.as_ref(), &report.to_csv()?)
}

#[derive(Serialize)]
struct DecodedVideo<'a> {
    id: &'a str,
    n_frames: usize,
    capacity: usize,
    n_selected: usize,
    selected_segments: Vec<usize>,
    mask: Vec<u8>,
}

#[derive(Serialize)]
struct DecodeOutput<'a> {
    rho: f64,
    videos: Vec<DecodedVideo<'a>>,
}

pub fn decode(a: &args::DecodeArgs) -> Result<()> {
    check_rho(a.rho)?;
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(a.data.dataset.as_ref(), &cfg)?;
    check_features(&ck, &data)?;
    let data = select_fold(data, &a.data, cfg.train.seed, Part::Test)?;
    let scores = predict(&ck, &data, ck.mode)?;

    let mut videos = Vec::with_capacity(data.len());
    let mut violations = Vec::new();
    for (v, s) in data.videos.iter().zip(&scores) {
        let summary = decode_summary(s, &v.picks, &v.partition, a.rho)?;
        let capacity = budget_capacity(a.rho, v.n_frames())?;
        let n_selected = summary.n_selected_frames();
        if n_selected > capacity {
            violations.push(format!("{}: {n_selected} frames > {capacity}", v.id));
        }
        videos.push(DecodedVideo {
            id: &v.id,
            n_frames: v.n_frames(),
            capacity,
            n_selected,
            selected_segments: summary.selected_segments,
            mask: summary.mask.iter().map(|&y| u8::from(y)).collect(),
        });
    }
    let mut text = serde_json::to_string(&DecodeOutput { rho: a.rho, videos }).map_err(vastsum_core::Error::from)?;
    text.push('\n');
    emit(a.out.as_ref(), &text)?;
    if !violations.is_empty() {
        return Err(CliError::Check(format!("budget exceeded: {}", violations.join("; "))));
    }
    Ok(())
}

pub fn stability_report(a: &args::StabilityArgs) -> Result<()> {
    check_rho(a.rho)?;
    let (mut cfg, _) = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let sigma = a.sigma.unwrap_or(cfg.loss.sigma_perturb);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma must be non-negative, got {sigma}")));
    }
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(a.data.dataset.as_ref(), &cfg)?;
    check_features(&ck, &data)?;
    let data = select_fold(data, &a.data, cfg.train.seed, Part::Test)?;
    let scores = predict(&ck, &data, ck.mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Core(e.into());
    w.write_record(["video_id", "flip_rate"]).map_err(csv_err)?;
    let mut sum = 0.0;
    for (v, s) in data.videos.iter().zip(&scores) {
        let rate = flip_rate(s, &v.picks, &v.partition, a.rho, sigma, a.trials, rng.next_u64())?;
        sum += rate;
        w.write_record([v.id.clone(), rate.to_string()]).map_err(csv_err)?;
    }
    let mean = if data.is_empty() { 0.0 } else { sum / data.len() as f64 };
    w.write_record(["mean".to_owned(), mean.to_string()]).map_err(csv_err)?;
    let bytes = w.into_inner().map_err(|e| CliError::Core(e.into_error().into()))?;
    emit(a.out.as_ref(), &String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Model used by `gradcheck`: d=16, two heads, one encoder and one
/// refinement block, four latent dimensions.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        scorer: ScorerConfig {
            input_dim: 8,
            model_dim: 16,
            heads: 2,
            layers: 1,
            refine_blocks: 1,
            kernel: 3,
            max_len: 16,
            ffn_mult: 2,
        },
        head: HeadConfig {
            latent_dim: 4,
            hidden_dim: 16,
            temperature: 1.0,
        },
    }
}

/// One video of 12 steps, 8 features, 3 segments and 3 annotators.
pub fn gradcheck_video_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        n_videos: 1,
        steps: 12,
        feature_dim: 8,
        annotators: 3,
        segments: 3,
        mode: DatasetMode::Tvsum,
        seed,
        ..SyntheticConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub max_relative_error: f64,
    pub worst: Option<(String, usize)>,
    pub n_checked: usize,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

/// Likelihood, soft-min BCE and KL of the gradcheck model against central
/// differences.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64, fault: Option<Fault>) -> Result<GradcheckOutcome> {
    let model = gradcheck_model();
    let mut data = generate_synthetic(&gradcheck_video_config(seed))?;
    let video = data.videos.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.init_params(&mut rng);
    let latent = VideoDraws::sample(&mut rng, &video, &model, &cfg.loss)?.latent;
    let build = |tape: &mut Tape, p: &BoundParams<'_>| smooth_objective(tape, p, &model, &cfg.loss, &video, &latent);
    let report = match fault {
        None => finite_difference_check(&params, GRADCHECK_STEP, build)?,
        Some(f) => finite_difference_check_with_fault(&params, GRADCHECK_STEP, f, build)?,
    };
    Ok(GradcheckOutcome {
        max_relative_error: report.max_relative_error,
        worst: report.worst,
        n_checked: report.n_checked,
    })
}

pub fn gradcheck(a: &args::GradcheckArgs) -> Result<()> {
    let (cfg, _) = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let fault = a.inject_fault.then_some(Fault::GeluDerivative);
    let out = run_gradcheck(&cfg, a.seed, fault)?;
    let worst = out
        .worst
        .as_ref()
        .map_or_else(|| "-".to_owned(), |(name, i)| format!("{name}[{i}]"));
    println!(
        "max_relative_error {:.3e} at {worst} over {} entries: {}",
        out.max_relative_error,
        out.n_checked,
        if out.passed() { "PASS" } else { "FAIL" }
    );
    if out.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "max relative error {:.3e} is not below {GRADCHECK_TOLERANCE:e}",
            out.max_relative_error
        )))
    }
}
