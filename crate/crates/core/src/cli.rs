//! The `uxmil` command line.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attention::{export_attention, instance_attention};
use crate::dataset::{prepare_all, Manifest, PreparedEpisode};
use crate::error::{Error, Result};
use crate::eval::{run_cv, TrainConfig};
use crate::frontend::FrontendConfig;
use crate::gradcheck::suite;
use crate::model::{Modality, ModelConfig, UxModel};
use crate::synth::{generate_dataset, plan_dataset, verify_separability, CueChannels, SynthConfig};
use crate::weights_io;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("UXMIL_GIT_DESCRIBE"), ")");

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

/// Minimum cue-counting accuracy for `synth` to succeed.
pub const SEPARABILITY_TARGET: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 128 mel bands × 512 frames, 112×112 faces.
    Standard,
    /// 16×16 patches and frames, for single-core runs.
    Desk,
    /// Minimal dimensions for gradient checks.
    Toy,
}

impl Profile {
    pub fn model(self, modality: Modality) -> ModelConfig {
        match self {
            Profile::Standard => ModelConfig::standard(modality),
            Profile::Desk => ModelConfig::desk(modality),
            Profile::Toy => ModelConfig::toy(modality),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Depth {
    Ops,
    Model,
    All,
}

/// Settings shared by every command: the config file merged with flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub modality: Modality,
    /// Full architecture; when absent it is derived from `profile` and `modality`.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub manifest: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            profile: Profile::Desk,
            modality: Modality::Multimodal,
            model: None,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            manifest: None,
            weights: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; relative paths are taken from the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.weights, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone().unwrap_or_else(|| self.profile.model(self.modality));
        m.modality = self.modality;
        m
    }

    /// Propagates the top-level seed and fills in the architecture.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        let model = self.model_config();
        model.validate()?;
        self.model = Some(model);
        self.train.validate()?;
        Ok(self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "uxmil", version = VERSION, about = "Multimodal multi-instance UX estimation from face video and voice")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for preprocessing and folds.
    #[arg(long, global = true, env = "UXMIL_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print debug-level log lines.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and verify that its cues are countable.
    Synth(SynthArgs),
    /// Subject-independent cross-validation on a manifest.
    Train(TrainArgs),
    /// Attention rollout scores for one episode or all of them.
    Attend(AttendArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Summarise a weight file, manifest or report.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub episodes_per_subject: Option<usize>,
    #[arg(long, value_parser = parse_channels)]
    pub cue_channels: Option<CueChannels>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub frame_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_modality)]
    pub modality: Option<Modality>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttendArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Episode id, or `all`.
    #[arg(long)]
    pub episode: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub depth: Depth,
    /// Sampled coordinates per parameter tensor in the model suite.
    #[arg(long, default_value_t = 8)]
    pub coords: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_channels(s: &str) -> std::result::Result<CueChannels, String> {
    match s {
        "both" => Ok(CueChannels::Both),
        "vision" | "vision_only" => Ok(CueChannels::VisionOnly),
        "audio" | "audio_only" => Ok(CueChannels::AudioOnly),
        _ => Err(format!("unknown cue channels {s:?}; expected both, vision or audio")),
    }
}

/// Logs to stderr and, once attached, to `run.log`.
struct RunLogger {
    level: log::LevelFilter,
    file: Mutex<Option<File>>,
}

impl log::Log for RunLogger {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= self.level
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let line = format!("[{}] {}", r.level(), r.args());
        eprintln!("{line}");
        if let Some(f) = self.file.lock().expect("log lock").as_mut() {
            let _ = writeln!(f, "{line}");
        }
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log lock").as_mut() {
            let _ = f.flush();
        }
    }
}

static LOGGER: std::sync::OnceLock<RunLogger> = std::sync::OnceLock::new();

fn init_logging(verbose: bool) {
    let level = if verbose { log::LevelFilter::Debug } else { log::LevelFilter::Info };
    let logger = LOGGER.get_or_init(|| RunLogger { level, file: Mutex::new(None) });
    if log::set_logger(logger).is_ok() {
        log::set_max_level(level);
    }
}

/// Creates `out`, writes `resolved_config.json` and starts `run.log`.
fn start_run(out: &Path, command: &str, cfg: &RunConfig, threads: usize) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = serde_json::json!({
        "command": command,
        "version": VERSION,
        "threads": threads,
        "config": cfg,
    });
    let path = out.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&resolved)? + "\n").map_err(|e| Error::io(&path, e))?;
    let log_path = out.join("run.log");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    if let Some(l) = LOGGER.get() {
        *l.file.lock().expect("log lock") = Some(file);
    }
    log::info!("uxmil {VERSION} {command} seed {} threads {threads}", cfg.seed);
    Ok(())
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("missing --{what} (or \"{what}\" in the config file)")))
}

enum Outcome {
    Done,
    VerificationFailed(String),
}

fn cmd_synth(mut cfg: RunConfig, a: SynthArgs, threads: usize) -> Result<Outcome> {
    if let Some(v) = a.subjects {
        cfg.synth.n_subjects = v;
    }
    if let Some(v) = a.episodes_per_subject {
        cfg.synth.episodes_per_subject = v;
    }
    if let Some(v) = a.cue_channels {
        cfg.synth.cue_channels = v;
    }
    if let Some(v) = a.label_noise {
        cfg.synth.label_noise = v;
    }
    if let Some(v) = a.frame_size {
        cfg.synth.frame_size = v;
    }
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    cfg.out = Some(out.clone());
    let cfg = cfg.resolve()?;
    cfg.synth.validate()?;
    start_run(&out, "synth", &cfg, threads)?;
    let manifest = generate_dataset(&cfg.synth, &out)?;
    log::info!("wrote {} episodes to {}", manifest.episodes.len(), out.display());
    let report = verify_separability(&manifest, &cfg.synth)?;
    let (_, planned) = plan_dataset(&cfg.synth)?;
    let recovered = report
        .detections
        .iter()
        .zip(&planned)
        .filter(|(d, p)| d.predicted as usize == p.plan.strength + 1)
        .count();
    let accuracy = recovered as f64 / planned.len() as f64;
    log::info!("cue-counting oracle: {:.4} of planted strengths, {:.4} of labels", accuracy, report.accuracy);
    let path = out.join("separability.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    if accuracy < SEPARABILITY_TARGET {
        return Ok(Outcome::VerificationFailed(format!(
            "cue-counting oracle recovered {accuracy:.4} < {SEPARABILITY_TARGET}"
        )));
    }
    Ok(Outcome::Done)
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs, threads: usize) -> Result<Outcome> {
    if let Some(m) = a.modality {
        cfg.modality = m;
    }
    if let Some(p) = a.profile {
        cfg.profile = p;
        cfg.model = None;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.folds {
        cfg.train.folds = v;
    }
    let manifest_path = require(a.manifest.or(cfg.manifest.clone()), "manifest")?;
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    cfg.manifest = Some(manifest_path.clone());
    cfg.out = Some(out.clone());
    let cfg = cfg.resolve()?;
    start_run(&out, "train", &cfg, threads)?;
    let model_cfg = cfg.model_config();
    let manifest = Manifest::load(&manifest_path)?;
    let frontend = FrontendConfig::for_model(&model_cfg);
    let episodes = prepare_all(&manifest, &frontend, model_cfg.modality)?;
    log::info!("prepared {} episodes for {}", episodes.len(), model_cfg.modality.as_str());
    let cv = run_cv(&episodes, &manifest.question_id, &model_cfg, &cfg.train, Some(&out))?;
    log::info!(
        "mean acc7 {:.6} acc3 {:.6} (majority acc3 {:.6})",
        cv.report.acc7,
        cv.report.acc3,
        cv.report.majority_acc3
    );
    Ok(Outcome::Done)
}

fn cmd_attend(mut cfg: RunConfig, a: AttendArgs, threads: usize) -> Result<Outcome> {
    let weights = require(a.weights.or(cfg.weights.clone()), "weights")?;
    let manifest_path = require(a.manifest.or(cfg.manifest.clone()), "manifest")?;
    let out = require(a.out.or(cfg.out.clone()), "out")?;
    let model = UxModel::load(&weights)?;
    cfg.modality = model.config().modality;
    cfg.model = Some(model.config().clone());
    cfg.weights = Some(weights);
    cfg.manifest = Some(manifest_path.clone());
    cfg.out = Some(out.clone());
    let cfg = cfg.resolve()?;
    start_run(&out, "attend", &cfg, threads)?;
    let manifest = Manifest::load(&manifest_path)?;
    let selected: Vec<_> = if a.episode == "all" {
        manifest.episodes.iter().collect()
    } else {
        vec![manifest
            .episode(&a.episode)
            .ok_or_else(|| Error::Input(format!("unknown episode id {:?}", a.episode)))?]
    };
    let frontend = FrontendConfig::for_model(model.config());
    for ep in selected {
        let prepared = PreparedEpisode::prepare(ep, &frontend, model.config().modality)?;
        let attn = instance_attention(&model, &prepared.input())?;
        let dir = if a.episode == "all" { out.join(&ep.episode_id) } else { out.clone() };
        export_attention(&ep.episode_id, &attn, &dir)?;
        log::info!("{}: attention written to {}", ep.episode_id, dir.display());
    }
    Ok(Outcome::Done)
}

fn cmd_gradcheck(mut cfg: RunConfig, a: GradcheckArgs, threads: usize) -> Result<Outcome> {
    let out = a.out.or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    cfg.out = Some(out.clone());
    cfg.profile = Profile::Toy;
    cfg.model = None;
    let cfg = cfg.resolve()?;
    start_run(&out, "gradcheck", &cfg, threads)?;
    let mut entries = Vec::new();
    if matches!(a.depth, Depth::Ops | Depth::All) {
        entries.extend(suite::ops_suite(cfg.seed, a.inject_fault)?.into_iter().map(|(n, r)| (format!("ops.{n}"), r)));
    }
    if matches!(a.depth, Depth::Model | Depth::All) {
        entries.extend(suite::model_suite(cfg.seed, a.coords)?.into_iter().map(|(n, r)| (format!("model.{n}"), r)));
    }
    let mut failed = 0;
    for (name, r) in &entries {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {name:<56} max_rel_error {:.3e} (tol {:.0e}, {} checked)", r.max_rel_error, r.tolerance, r.checked);
        failed += (!r.passed) as usize;
    }
    log::info!("{} components checked, {failed} failed", entries.len());
    if failed > 0 {
        return Ok(Outcome::VerificationFailed(format!("{failed} gradient checks failed")));
    }
    Ok(Outcome::Done)
}

fn cmd_inspect(mut cfg: RunConfig, a: InspectArgs, threads: usize) -> Result<Outcome> {
    let out = a.out.or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    cfg.out = Some(out.clone());
    let cfg = cfg.resolve()?;
    start_run(&out, "inspect", &cfg, threads)?;
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    if bytes.starts_with(weights_io::MAGIC) {
        let records = weights_io::read_weights(&mut bytes.as_slice())?;
        let total: usize = records.iter().map(|(_, t)| t.numel()).sum();
        for (name, t) in &records {
            let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64).sqrt();
            println!("{name:<56} {:?} rms {rms:.6}", t.shape());
        }
        println!("{} tensors, {total} values", records.len());
        return Ok(Outcome::Done);
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: neither a weight file nor JSON: {e}", a.path.display())))?;
    if value.get("episodes").is_some() {
        let m = Manifest::load(&a.path)?;
        let mut counts = [0usize; 7];
        for e in &m.episodes {
            counts[e.label as usize - 1] += 1;
        }
        println!("question {}: {} episodes, {} subjects", m.question_id, m.episodes.len(), m.subjects().len());
        println!("label counts 1..7: {counts:?}");
    } else if let Some(folds) = value.get("folds").and_then(|f| f.as_array()) {
        for f in folds {
            println!("fold {} acc7 {} acc3 {} n_test {}", f["fold"], f["acc7"], f["acc3"], f["n_test"]);
        }
        println!("mean acc7 {} acc3 {}", value["acc7"], value["acc3"]);
    } else {
        println!("{}", serde_json::to_string_pretty(&value)?);
    }
    Ok(Outcome::Done)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let threads = cli.threads.unwrap_or(1).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::debug!("thread pool already initialised: {e}");
    }
    let result = (|| {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        match cli.command {
            Command::Synth(a) => cmd_synth(cfg, a, threads),
            Command::Train(a) => cmd_train(cfg, a, threads),
            Command::Attend(a) => cmd_attend(cfg, a, threads),
            Command::Gradcheck(a) => cmd_gradcheck(cfg, a, threads),
            Command::Inspect(a) => cmd_inspect(cfg, a, threads),
        }
    })();
    let code = match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::VerificationFailed(msg)) => {
            log::error!("{msg}");
            EXIT_VERIFY
        }
        Err(e) => {
            log::error!("{e}");
            EXIT_ERROR
        }
    };
    log::logger().flush();
    code
}
