//! `lava` command-line front end.
//!
//! Exit codes: 0 success, 1 validation or configuration error (including
//! bad flags), 2 I/O error, 3 internal invariant failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lava::corpus::{preprocess, read_manifest, synth_corpus, write_wav_f32, Manifest, Split, SynthSpec, TARGET_RATE};
use lava::error::{Error, Result};
use lava::experiment::{
    ae_clips, autoencoder_checkpoint, fit_head, head_checkpoint, head_probs, level_metrics, load_encoder,
    load_head, run_experiment, split_of, write_json, AeStageConfig, ExperimentConfig, AE_CKPT,
};
use lava::heads::{ClipBank, FeatureCache, HeadSpec, Level};
use lava::pipeline::{
    error_propagation_eval, generalization_eval, infer, Expectation, Models, ScoredBatch, Thresholds,
};
use lava::rejection::{calibrate_threshold, collect_confidences};
use lava::checkpoint::Checkpoint;
use lava::training::TrainConfig;

#[derive(Parser)]
#[command(name = "lava", version, about = "Hierarchical audio deepfake attribution")]
struct Cli {
    /// Suppress progress lines on standard error.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the deterministic synthetic corpus.
    SynthCorpus(SynthArgs),
    /// Preprocess one file to 16 kHz, peak 1, 48000 samples (float WAV).
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the autoencoder on the fake train/val splits of a manifest.
    TrainAe(TrainAeArgs),
    /// Train a classification head on the frozen encoder.
    TrainHead(TrainHeadArgs),
    /// Calibrate a head's rejection threshold on its training split.
    Calibrate(CalibrateArgs),
    /// Attribute one audio file.
    Infer {
        #[arg(long)]
        audio: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Evaluate trained models on a manifest.
    Eval(EvalArgs),
    /// Run every stage end to end and write the report bundle.
    RunExperiment {
        /// JSON experiment configuration.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in configuration: desk or smoke.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train,val,test clips per technology.
    #[arg(long, default_value = "300,100,100")]
    per_technology: String,
    #[arg(long, default_value_t = 100)]
    real_test: usize,
    #[arg(long, default_value_t = 100)]
    unseen_test: usize,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        cfg
    }
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory manifest paths are relative to; defaults to the manifest's directory.
    #[arg(long)]
    root: Option<PathBuf>,
}

impl ManifestArgs {
    fn load(&self) -> Result<(Manifest, PathBuf)> {
        let root = self.root.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        });
        Ok((read_manifest(&self.manifest)?, root))
    }
}

#[derive(Args)]
struct TrainAeArgs {
    #[command(flatten)]
    data: ManifestArgs,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON stage configuration (train, beta, crops).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOverrides,
    #[arg(long)]
    beta: Option<f64>,
    /// Train on this many random crops instead of full clips.
    #[arg(long)]
    crops: Option<usize>,
    #[arg(long)]
    crop_len: Option<usize>,
    #[arg(long)]
    val_crops: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Ada,
    Admr,
}

impl From<LevelArg> for Level {
    fn from(l: LevelArg) -> Self {
        match l {
            LevelArg::Ada => Level::Ada,
            LevelArg::Admr => Level::Admr,
        }
    }
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long, value_enum)]
    level: LevelArg,
    #[arg(long)]
    no_attention: bool,
    #[command(flatten)]
    data: ManifestArgs,
    /// Autoencoder checkpoint providing the frozen encoder.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Accuracy target of the initial calibration stored with the head.
    #[arg(long, default_value_t = 0.85)]
    target_acc: f64,
    /// Train on one random window of this many feature frames per batch; 0 uses whole clips.
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_enum)]
    level: LevelArg,
    #[arg(long, default_value_t = 0.85)]
    target_acc: f64,
    #[command(flatten)]
    data: ManifestArgs,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    encoder: PathBuf,
    /// Where to write the recalibrated head; defaults to overwriting `--head`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// Directory holding autoencoder.lava, ada.lava and admr.lava.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    ada: Option<PathBuf>,
    #[arg(long)]
    admr: Option<PathBuf>,
}

impl ModelArgs {
    fn path(&self, explicit: &Option<PathBuf>, file: &str) -> Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| self.models.as_ref().map(|d| d.join(file)))
            .ok_or_else(|| Error::Argument(format!("pass --models or an explicit path for {file}")))
    }

    fn load(&self) -> Result<(Models, Thresholds)> {
        let encoder = load_encoder(&self.path(&self.encoder, AE_CKPT)?)?;
        let (ada, ada_t) = load_head(&self.path(&self.ada, "ada.lava")?)?;
        let (admr, admr_t) = load_head(&self.path(&self.admr, "admr.lava")?)?;
        if ada.spec.level != Level::Ada || admr.spec.level != Level::Admr {
            return Err(Error::Validation("--ada and --admr must hold ADA and ADMR heads".into()));
        }
        let missing = |l: &str| Error::Config(format!("{l} head has no calibrated threshold; run `lava calibrate`"));
        let th = Thresholds {
            ada: ada_t.ok_or_else(|| missing("ADA"))?.tau,
            admr: admr_t.ok_or_else(|| missing("ADMR"))?.tau,
        };
        Ok((
            Models {
                encoder,
                ada,
                admr: Some(admr),
            },
            th,
        ))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Metrics,
    ErrorProp,
    Generalization,
}

#[derive(Clone, Copy, ValueEnum)]
enum RejectionArg {
    Off,
    AsError,
    Both,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    mode: EvalMode,
    #[command(flatten)]
    data: ManifestArgs,
    #[command(flatten)]
    models: ModelArgs,
    /// Split to evaluate; generalization defaults to every entry.
    #[arg(long)]
    split: Option<String>,
    /// Metrics mode only; both levels when omitted.
    #[arg(long, value_enum)]
    level: Option<LevelArg>,
    #[arg(long, value_enum, default_value = "both")]
    rejection: RejectionArg,
    /// Comma-separated allowed attributions for generalization, e.g. "unknown,Codec/*".
    #[arg(long)]
    expect: Option<String>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn progress(quiet: bool) -> impl FnMut(&str) {
    move |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    }
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(value, p),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut log = progress(cli.quiet);
    match cli.command {
        Command::SynthCorpus(a) => {
            let counts: Vec<usize> = a
                .per_technology
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Argument(format!("--per-technology `{}` is not three integers", a.per_technology)))?;
            let counts: [usize; 3] = counts
                .try_into()
                .map_err(|_| Error::Argument("--per-technology needs exactly three counts".into()))?;
            let c = synth_corpus(&SynthSpec::balanced(a.seed, counts, a.real_test, a.unseen_test), &a.out)?;
            let per_split = |s| c.manifest.iter().filter(|e| e.split == s).count();
            println!(
                "{}",
                json!({
                    "out": a.out,
                    "train": per_split(Split::Train),
                    "val": per_split(Split::Val),
                    "test": per_split(Split::Test),
                    "unseen": c.unseen.len(),
                })
            );
        }
        Command::Preprocess { input, output } => {
            let w = preprocess(&input)?;
            if let Some(out) = &output {
                write_wav_f32(out, &w.samples, TARGET_RATE)?;
            }
            println!(
                "{}",
                json!({"rate": w.rate, "length": w.len(), "peak": w.peak(), "silent": w.silent})
            );
        }
        Command::TrainAe(a) => {
            let mut stage: AeStageConfig = match &a.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?)
                .map_err(|e| Error::Config(e.to_string()))?,
                None => AeStageConfig {
                    train: TrainConfig::default(),
                    train_crops: 0,
                    ..AeStageConfig::default()
                },
            };
            stage.train = a.train.apply(stage.train);
            if let Some(b) = a.beta {
                stage.beta = b;
            }
            if let Some(n) = a.crops {
                stage.train_crops = n;
            }
            if let Some(n) = a.crop_len {
                stage.crop_len = n;
            }
            if let Some(n) = a.val_crops {
                stage.val_crops = n;
            }
            stage.validate()?;
            let (manifest, root) = a.data.load()?;
            if let Some(e) = manifest.iter().find(|e| !e.is_fake() && e.split != Split::Test) {
                return Err(Error::Validation(format!(
                    "autoencoder training is fake-only, found real entry {}",
                    e.path.display()
                )));
            }
            let (train, val) = ae_clips(&root, &manifest, &stage)?;
            let loss = lava::autoencoder::LossConfig { beta: stage.beta };
            let outcome = lava::autoencoder::train_autoencoder_on(&train, &val, &stage.train, &loss, |r| {
                log(&format!("epoch {}: train {:.6}, val {:.6}", r.epoch, r.train_loss, r.val_loss))
            })?;
            autoencoder_checkpoint(&outcome, &stage).save(&a.out)?;
            let history = a.out.with_extension("history.jsonl");
            lava::autoencoder::write_history(&outcome.history, &history)?;
            println!(
                "{}",
                json!({"checkpoint": a.out, "history": history, "best_epoch": outcome.best_epoch,
                       "best_val_loss": outcome.history[outcome.best_epoch - 1].val_loss})
            );
        }
        Command::TrainHead(a) => {
            let level = Level::from(a.level);
            let spec = HeadSpec::new(level, !a.no_attention);
            let (manifest, root) = a.data.load()?;
            let encoder = load_encoder(&a.encoder)?;
            let cfg = TrainConfig {
                window: a.window,
                ..a.train.apply(TrainConfig::default())
            };
            let used: Manifest = [Split::Train, Split::Val]
                .into_iter()
                .flat_map(|s| level.select(&split_of(&manifest, s)))
                .collect();
            level.labels(&used)?;
            let scratch = tempfile::tempdir().map_err(|e| Error::Io {
                path: std::env::temp_dir(),
                source: e,
            })?;
            let cache = FeatureCache::build(&encoder, &root, &used, scratch.path())?;
            let head = fit_head(spec, &encoder, &cache, &manifest, &cfg, a.target_acc, &mut log)?;
            head_checkpoint(&head.model, Some(&head.threshold), cfg.seed)?.save(&a.out)?;
            let history = a.out.with_extension("history.jsonl");
            lava::autoencoder::write_history(&head.history, &history)?;
            println!(
                "{}",
                json!({"checkpoint": a.out, "history": history, "level": level, "attention": spec.attention,
                       "tau": head.threshold.tau, "epochs": head.history.len()})
            );
        }
        Command::Calibrate(a) => {
            let level = Level::from(a.level);
            let (model, _) = load_head(&a.head)?;
            if model.spec.level != level {
                return Err(Error::Validation(format!(
                    "--level {} does not match the head's level {}",
                    level.as_str(),
                    model.spec.level.as_str()
                )));
            }
            let (manifest, root) = a.data.load()?;
            let encoder = load_encoder(&a.encoder)?;
            let train = level.select(&split_of(&manifest, Split::Train));
            let labels = level.labels(&train)?;
            let clips = lava::corpus::load_clips(&root, &train)?;
            let bank = ClipBank {
                clips: &clips,
                encoder: &encoder,
            };
            let records = collect_confidences(&model, &encoder, &bank, &labels, 16)?;
            let t = calibrate_threshold(&records, a.target_acc, level)?;
            let seed = Checkpoint::load(&a.head)?.meta_parsed::<u64>("seed").unwrap_or(0);
            head_checkpoint(&model, Some(&t), seed)?.save(a.out.as_ref().unwrap_or(&a.head))?;
            println!("{}", serde_json::to_string(&t)?);
        }
        Command::Infer { audio, models } => {
            let (models, th) = models.load()?;
            let clip = preprocess(&audio)?.samples;
            let clips = [clip];
            let bank = ClipBank {
                clips: &clips,
                encoder: &models.encoder,
            };
            let scored = ScoredBatch::score(&models, &bank, th.ada, 1)?;
            let r = infer(&scored, 0, th)?;
            r.check()?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Eval(a) => eval(a, &mut log)?,
        Command::RunExperiment { config, preset, out } => {
            let cfg = match (config, preset) {
                (Some(p), _) => ExperimentConfig::load(&p)?,
                (None, Some(name)) => ExperimentConfig::preset(&name)?,
                (None, None) => return Err(Error::Argument("pass --config or --preset".into())),
            };
            let s = run_experiment(&cfg, &out, &mut log)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Gradcheck { seed } => {
            let checks = lava::selfcheck::gradcheck_suite(seed)?;
            let mut failed = Vec::new();
            for c in &checks {
                println!(
                    "{}",
                    json!({"check": c.name, "max_rel_error": c.max_rel_error, "passed": c.passed()})
                );
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Invariant(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn eval(a: EvalArgs, log: &mut dyn FnMut(&str)) -> Result<()> {
    let (manifest, root) = a.data.load()?;
    let (models, th) = a.models.load()?;
    let split: Option<Split> = match (&a.split, a.mode) {
        (Some(s), _) => Some(s.parse().map_err(Error::Argument)?),
        (None, EvalMode::Generalization) => None,
        (None, _) => Some(Split::Test),
    };
    let entries: Manifest = match split {
        Some(s) => split_of(&manifest, s),
        None => manifest,
    };
    if entries.is_empty() {
        return Err(Error::Argument("no manifest entries to evaluate".into()));
    }
    log(&format!("evaluating {} entries", entries.len()));
    let report = match a.mode {
        EvalMode::Metrics => {
            let levels = match a.level {
                Some(l) => vec![Level::from(l)],
                None => vec![Level::Ada, Level::Admr],
            };
            let mut out = serde_json::Map::new();
            for level in levels {
                let (head, tau) = match level {
                    Level::Ada => (&models.ada, th.ada),
                    Level::Admr => (models.admr.as_ref().expect("loaded"), th.admr),
                };
                let chosen = level.select(&entries);
                if chosen.is_empty() {
                    continue;
                }
                let labels = level.labels(&chosen)?;
                let clips = lava::corpus::load_clips(&root, &chosen)?;
                let bank = ClipBank {
                    clips: &clips,
                    encoder: &models.encoder,
                };
                let probs = head_probs(head, &models.encoder, &bank, a.batch)?;
                let (off, as_error) = level_metrics(level, &probs, &labels, tau)?;
                let mut m = serde_json::Map::new();
                if matches!(a.rejection, RejectionArg::Off | RejectionArg::Both) {
                    m.insert("rejection_off".into(), serde_json::to_value(&off)?);
                }
                if matches!(a.rejection, RejectionArg::AsError | RejectionArg::Both) {
                    m.insert("rejection_as_error".into(), serde_json::to_value(&as_error)?);
                }
                out.insert(level.as_str().into(), m.into());
            }
            serde_json::Value::Object(out)
        }
        EvalMode::ErrorProp | EvalMode::Generalization => {
            let clips = lava::corpus::load_clips(&root, &entries)?;
            let bank = ClipBank {
                clips: &clips,
                encoder: &models.encoder,
            };
            let scored = ScoredBatch::score(&models, &bank, th.ada, a.batch)?;
            if matches!(a.mode, EvalMode::ErrorProp) {
                serde_json::to_value(error_propagation_eval(&entries, &scored, th)?)?
            } else {
                let expect = a.expect.as_ref().map(|s| Expectation {
                    allowed: s.split(',').map(|p| p.trim().to_owned()).collect(),
                });
                serde_json::to_value(generalization_eval(entries.len(), &scored, th, expect.as_ref())?)?
            }
        }
    };
    emit(&report, a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
