//! End-to-end runs: corpus, autoencoder, both heads, calibration,
//! evaluation and the report bundle.
//!
//! Everything under the output directory except `timings.json` is a
//! deterministic function of the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder_on, write_history, AeOutcome, LossConfig, ENCODER_NAME};
use crate::checkpoint::{Checkpoint, ARCH_AUTOENCODER, ARCH_HEAD};
use crate::corpus::{load_clips, synth_corpus, Manifest, ManifestEntry, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::heads::{train_head_on, FeatureBank, FeatureCache, HeadModel, HeadSpec, Level};
use crate::kernel::{ParamStore, BN_EPS, BN_MOMENTUM};
use crate::pipeline::{
    compute_metrics, error_propagation_eval, generalization_eval, ErrorPropagationReport, Expectation,
    GeneralizationReport, Metrics, Models, RejectionMode, ScoredBatch, Scorer, Thresholds,
};
use crate::rejection::{calibrate_threshold, collect_confidences, decide, Prediction, RejectionThreshold, Tau};
use crate::training::TrainConfig;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TIMINGS: &str = "timings.json";
pub const CORPUS_DIR: &str = "corpus";
pub const MODELS_DIR: &str = "models";
pub const REPORTS_DIR: &str = "reports";
pub const AE_CKPT: &str = "autoencoder.lava";

pub fn head_file(level: Level, attention: bool) -> String {
    format!("{}{}.lava", level.as_str(), if attention { "" } else { "_no_attention" })
}

pub fn metrics_file(level: Level, attention: bool) -> String {
    format!("metrics_{}{}.json", level.as_str(), if attention { "" } else { "_no_attention" })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Train, val, test clips per technology.
    pub per_technology: [usize; 3],
    pub real_test: usize,
    pub unseen_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            per_technology: [300, 100, 100],
            real_test: 100,
            unseen_test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeStageConfig {
    pub train: TrainConfig,
    pub beta: f64,
    /// Number of training crops; 0 trains on every full clip.
    pub train_crops: usize,
    pub val_crops: usize,
    pub crop_len: usize,
}

impl Default for AeStageConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                max_epochs: 3,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            beta: LossConfig::default().beta,
            train_crops: 384,
            val_crops: 128,
            crop_len: 2000,
        }
    }
}

impl AeStageConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        // Four stride-2 layers: crops must survive the round trip exactly.
        if self.train_crops > 0 && (self.val_crops == 0 || self.crop_len < 64 || self.crop_len % 16 != 0) {
            return Err(Error::Config("crops need val_crops > 0 and a crop_len >= 64 divisible by 16".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadStageConfig {
    pub ada: TrainConfig,
    pub admr: TrainConfig,
    pub attention: bool,
    /// Also trains attention-free heads and writes their metrics.
    pub ablation: bool,
}

impl Default for HeadStageConfig {
    fn default() -> Self {
        let base = TrainConfig {
            lr: 1e-3,
            batch: 8,
            window: 1000,
            ..TrainConfig::default()
        };
        Self {
            ada: TrainConfig { max_epochs: 3, ..base.clone() },
            admr: TrainConfig { max_epochs: 6, ..base },
            attention: true,
            ablation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub autoencoder: AeStageConfig,
    pub heads: HeadStageConfig,
    pub target_acc: f64,
    /// Allowed final attributions for unseen-source clips.
    pub generalization_expect: Vec<String>,
    pub eval_batch: usize,
    /// Keep the prefix-feature cache after the run.
    pub keep_features: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            autoencoder: AeStageConfig::default(),
            heads: HeadStageConfig::default(),
            target_acc: 0.85,
            generalization_expect: vec!["unknown".into(), "Codec/*".into()],
            eval_batch: 16,
            keep_features: false,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// A tiny corpus for an end-to-end check in seconds.
    pub fn smoke() -> Self {
        let one = TrainConfig {
            max_epochs: 1,
            batch: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        Self {
            corpus: CorpusConfig {
                seed: 0,
                per_technology: [6, 6, 6],
                real_test: 3,
                unseen_test: 3,
            },
            autoencoder: AeStageConfig {
                train: one.clone(),
                train_crops: 8,
                val_crops: 4,
                crop_len: 2000,
                ..AeStageConfig::default()
            },
            heads: HeadStageConfig {
                ada: one.clone(),
                admr: one,
                attention: true,
                ablation: true,
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(Error::Argument(format!("unknown preset `{name}`, expected desk or smoke"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        for t in [&self.heads.ada, &self.heads.admr] {
            t.validate()?;
        }
        if !(self.target_acc > 0.0 && self.target_acc <= 1.0) {
            return Err(Error::Config(format!("target_acc {} outside (0, 1]", self.target_acc)));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        let [tr, va, te] = self.corpus.per_technology;
        if tr < 6 || va < 6 || te < 6 {
            return Err(Error::Config("each split needs at least 6 clips per technology".into()));
        }
        Ok(())
    }
}

/// Implementation choices recorded in every run manifest.
pub fn decisions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("trim_policy", "keep the first 48000 samples, zero-pad shorter clips"),
        ("resampler", "Kaiser windowed sinc, beta 8, 32 zero crossings per side, cutoff 0.9 of the lower Nyquist"),
        ("mono_mix", "per-sample channel mean"),
        ("loss_reduction", "smoothed L1 averaged over every element of the batch"),
        ("calibration", "smallest distinct training-set confidence whose accepted-set accuracy meets the target; >= acceptance"),
        ("classifier_loss", "softmax cross-entropy"),
        ("frozen_batchnorm", "encoder batch norms run in eval mode during head training"),
        ("final_conv", "each head owns a private copy of the encoder's final convolution"),
        ("attention_parameters", "separate per head"),
        ("early_stopping", "stop once validation loss fails to strictly improve for more than `patience` epochs; keep the best epoch"),
        ("ada_error", crate::pipeline::ADA_ERROR_DEFINITION),
        ("admr_error", crate::pipeline::ADMR_ERROR_DEFINITION),
        ("metrics_tables", "per-level metrics are reported with rejection off and with rejection counted as an error"),
        ("synth_order", "harmonic source, band limit, comb, peak 0.9, noise floor, quantizer last"),
        ("head_window", "each head batch trains on one random window of `window` prefix frames; validation, calibration and evaluation use whole clips"),
    ])
}

#[derive(Clone, Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a ExperimentConfig,
    seeds: BTreeMap<&'static str, u64>,
    versions: BTreeMap<&'static str, String>,
    decisions: BTreeMap<&'static str, &'static str>,
    files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ada_macro_f1: f64,
    pub admr_macro_f1: f64,
    pub ada_macro_f1_no_attention: Option<f64>,
    pub admr_macro_f1_no_attention: Option<f64>,
    pub tau_ada: Tau,
    pub tau_admr: Tau,
    pub ada_error_rate: f64,
    pub admr_misclassification_rate: f64,
    pub unseen_ada_rejection_rate: f64,
    pub unseen_conformance: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct LevelMetrics<'a> {
    level: Level,
    attention: bool,
    rejection_off: &'a Metrics,
    rejection_as_error: &'a Metrics,
}

#[derive(Clone, Debug, Serialize)]
struct ThresholdReport<'a> {
    ada: &'a RejectionThreshold,
    admr: &'a RejectionThreshold,
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ------------------------------------------------------------ checkpoints

pub fn autoencoder_checkpoint(outcome: &AeOutcome, cfg: &AeStageConfig) -> Checkpoint {
    Checkpoint::new(ARCH_AUTOENCODER, outcome.store.clone())
        .with_meta("beta", cfg.beta)
        .with_meta("seed", cfg.train.seed)
        .with_meta("best_epoch", outcome.best_epoch)
        .with_meta("bn_eps", BN_EPS)
        .with_meta("bn_momentum", BN_MOMENTUM)
}

/// Encoder tensors of an autoencoder checkpoint.
pub fn encoder_from(ckpt: &Checkpoint) -> Result<ParamStore<f32>> {
    if ckpt.arch != ARCH_AUTOENCODER {
        return Err(Error::checkpoint("arch", format!("expected {ARCH_AUTOENCODER}, found {}", ckpt.arch)));
    }
    let mut enc = ckpt.params.subset(&format!("{ENCODER_NAME}."));
    enc.freeze_all();
    Ok(enc)
}

pub fn load_encoder(path: &Path) -> Result<ParamStore<f32>> {
    encoder_from(&Checkpoint::load(path)?)
}

pub fn head_checkpoint(model: &HeadModel, threshold: Option<&RejectionThreshold>, seed: u64) -> Result<Checkpoint> {
    let level = model.spec.level;
    let mut c = Checkpoint::new(ARCH_HEAD, model.params.clone())
        .with_meta("level", level.as_str())
        .with_meta("vocabulary", level.vocab().join(","))
        .with_meta("attention", model.spec.attention)
        .with_meta("seed", seed)
        .with_meta("bn_eps", BN_EPS);
    if let Some(t) = threshold {
        c = c
            .with_meta("tau", t.tau)
            .with_meta("target_acc", t.target_acc)
            .with_meta("calibration", serde_json::to_string(&t.summary)?);
    }
    Ok(c)
}

pub fn head_from(ckpt: &Checkpoint) -> Result<(HeadModel, Option<RejectionThreshold>)> {
    if ckpt.arch != ARCH_HEAD {
        return Err(Error::checkpoint("arch", format!("expected {ARCH_HEAD}, found {}", ckpt.arch)));
    }
    let spec = ckpt.head_spec()?;
    let threshold = match ckpt.meta.get("tau") {
        None => None,
        Some(_) => Some(RejectionThreshold {
            level: spec.level,
            tau: ckpt.meta_parsed("tau")?,
            target_acc: ckpt.meta_parsed("target_acc")?,
            summary: serde_json::from_str(ckpt.meta("calibration")?)
                .map_err(|e| Error::checkpoint("meta.calibration", e.to_string()))?,
        }),
    };
    Ok((
        HeadModel {
            spec,
            params: ckpt.params.clone(),
        },
        threshold,
    ))
}

pub fn load_head(path: &Path) -> Result<(HeadModel, Option<RejectionThreshold>)> {
    head_from(&Checkpoint::load(path)?)
}

// -------------------------------------------------------------- helpers

/// `n` evenly spaced items of `items`.
pub fn spread<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n].clone()).collect()
}

/// One seeded random window of `len` samples from each clip.
pub fn random_crops(clips: &[Vec<f32>], len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clips
        .iter()
        .map(|c| {
            let start = if c.len() > len { rng.gen_range(0..=c.len() - len) } else { 0 };
            let mut w: Vec<f32> = c[start..c.len().min(start + len)].to_vec();
            w.resize(len, 0.0);
            w
        })
        .collect()
}

pub fn split_of(entries: &[ManifestEntry], split: Split) -> Vec<ManifestEntry> {
    entries.iter().filter(|e| e.split == split).cloned().collect()
}

pub fn head_probs(model: &HeadModel, encoder: &ParamStore<f32>, bank: &dyn FeatureBank, batch: usize) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..bank.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(model.probs_from_prefix(encoder, bank.batch(chunk)?)?);
    }
    Ok(out)
}

/// Both rejection modes over one level's labeled probabilities.
pub fn level_metrics(level: Level, probs: &[Vec<f64>], labels: &[usize], tau: Tau) -> Result<(Metrics, Metrics)> {
    let vocab = level.vocab();
    let preds: Vec<Prediction> = probs.iter().map(|p| decide(p, vocab, tau)).collect::<Result<_>>()?;
    let pairs: Vec<(&str, &Prediction)> = labels.iter().map(|&y| vocab[y]).zip(preds.iter()).collect();
    Ok((
        compute_metrics(&pairs, vocab, RejectionMode::Off)?,
        compute_metrics(&pairs, vocab, RejectionMode::AsError)?,
    ))
}

/// A trained and calibrated head.
pub struct TrainedHead {
    pub model: HeadModel,
    pub threshold: RejectionThreshold,
    pub history: Vec<crate::heads::HeadEpochRecord>,
}

/// Trains one head on cached features and calibrates it on its training split.
pub fn fit_head(
    spec: HeadSpec,
    encoder: &ParamStore<f32>,
    cache: &FeatureCache,
    manifest: &Manifest,
    cfg: &TrainConfig,
    target_acc: f64,
    log: &mut dyn FnMut(&str),
) -> Result<TrainedHead> {
    let level = spec.level;
    let pick = |s| level.select(&split_of(manifest, s));
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    let (train_y, val_y) = (level.labels(&train)?, level.labels(&val)?);
    let (train_bank, val_bank) = (cache.bank(&train)?, cache.bank(&val)?);
    let tag = format!("{}{}", level.as_str(), if spec.attention { "" } else { " (no attention)" });
    let out = train_head_on(spec, encoder, &train_bank, &train_y, &val_bank, &val_y, cfg, |r| {
        log(&format!(
            "head {tag} epoch {}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ))
    })?;
    let records = collect_confidences(&out.model, encoder, &train_bank, &train_y, cfg.batch)?;
    let threshold = calibrate_threshold(&records, target_acc, level)?;
    log(&format!("head {tag}: tau {} (accepted {:.4})", threshold.tau, threshold.summary.accepted_fraction));
    Ok(TrainedHead {
        model: out.model,
        threshold,
        history: out.history,
    })
}

/// Loads the fake train and val clips for autoencoder training, cropped when configured.
pub fn ae_clips(corpus_dir: &Path, manifest: &Manifest, cfg: &AeStageConfig) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let fakes: Vec<ManifestEntry> = manifest.iter().filter(|e| e.is_fake()).cloned().collect();
    let (train, val) = (split_of(&fakes, Split::Train), split_of(&fakes, Split::Val));
    if cfg.train_crops == 0 {
        return Ok((load_clips(corpus_dir, &train)?, load_clips(corpus_dir, &val)?));
    }
    let seed = cfg.train.seed;
    let train = load_clips(corpus_dir, &spread(&train, cfg.train_crops))?;
    let val = load_clips(corpus_dir, &spread(&val, cfg.val_crops))?;
    Ok((
        random_crops(&train, cfg.crop_len, seed),
        random_crops(&val, cfg.crop_len, seed ^ 0x5eed),
    ))
}

struct Clock {
    start: Instant,
    stages: Vec<(String, f64)>,
}

impl Clock {
    fn run<T>(&mut self, stage: &'static str, log: &mut dyn FnMut(&str), f: impl FnOnce(&mut dyn FnMut(&str)) -> Result<T>) -> Result<T> {
        log(&format!("stage {stage}"));
        let t = Instant::now();
        let out = f(log).map_err(|e| e.in_stage(stage))?;
        self.stages.push((stage.to_owned(), t.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// Runs every stage and writes the report bundle under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<Summary> {
    cfg.validate()?;
    let started = SystemTime::now();
    let mut clock = Clock {
        start: Instant::now(),
        stages: Vec::new(),
    };
    let corpus_dir = out.join(CORPUS_DIR);
    let models_dir = out.join(MODELS_DIR);
    let reports_dir = out.join(REPORTS_DIR);
    let features_dir = out.join("features");
    let mut files: Vec<String> = Vec::new();

    let corpus = clock.run("synth-corpus", log, |_| {
        let c = &cfg.corpus;
        synth_corpus(&SynthSpec::balanced(c.seed, c.per_technology, c.real_test, c.unseen_test), &corpus_dir)
    })?;
    let manifest = &corpus.manifest;

    let encoder = clock.run("train-ae", log, |log| {
        let (train, val) = ae_clips(&corpus_dir, manifest, &cfg.autoencoder)?;
        let loss = LossConfig {
            beta: cfg.autoencoder.beta,
        };
        let outcome = train_autoencoder_on(&train, &val, &cfg.autoencoder.train, &loss, |r| {
            log(&format!(
                "autoencoder epoch {}: train {:.6}, val {:.6}",
                r.epoch, r.train_loss, r.val_loss
            ))
        })?;
        autoencoder_checkpoint(&outcome, &cfg.autoencoder).save(&models_dir.join(AE_CKPT))?;
        write_history(&outcome.history, &reports_dir.join("history_autoencoder.jsonl"))?;
        let mut enc = outcome.store.subset(&format!("{ENCODER_NAME}."));
        enc.freeze_all();
        Ok(enc)
    })?;
    files.extend([format!("{MODELS_DIR}/{AE_CKPT}"), format!("{REPORTS_DIR}/history_autoencoder.jsonl")]);

    let cache = clock.run("features", log, |_| {
        let all: Vec<ManifestEntry> = manifest.iter().chain(&corpus.unseen).cloned().collect();
        FeatureCache::build(&encoder, &corpus_dir, &all, &features_dir)
    })?;

    let mut variants = vec![cfg.heads.attention];
    if cfg.heads.ablation {
        variants.push(!cfg.heads.attention);
    }
    let mut trained: BTreeMap<(Level, bool), TrainedHead> = BTreeMap::new();
    for &attention in &variants {
        for level in [Level::Ada, Level::Admr] {
            let stage = match level {
                Level::Ada => "train-head-ada",
                Level::Admr => "train-head-admr",
            };
            let tcfg = match level {
                Level::Ada => &cfg.heads.ada,
                Level::Admr => &cfg.heads.admr,
            };
            let head = clock.run(stage, log, |log| {
                let h = fit_head(HeadSpec::new(level, attention), &encoder, &cache, manifest, tcfg, cfg.target_acc, log)?;
                head_checkpoint(&h.model, Some(&h.threshold), tcfg.seed)?.save(&models_dir.join(head_file(level, attention)))?;
                let hist = format!("history_{}.jsonl", head_file(level, attention).trim_end_matches(".lava"));
                write_history(&h.history, &reports_dir.join(hist))?;
                Ok(h)
            })?;
            let stem = head_file(level, attention);
            files.push(format!("{MODELS_DIR}/{stem}"));
            files.push(format!("{REPORTS_DIR}/history_{}.jsonl", stem.trim_end_matches(".lava")));
            trained.insert((level, attention), head);
        }
    }

    let summary = clock.run("evaluate", log, |log| {
        let test = split_of(manifest, Split::Test);
        let batch = cfg.eval_batch;
        let mut f1 = BTreeMap::new();
        for &attention in &variants {
            for level in [Level::Ada, Level::Admr] {
                let h = &trained[&(level, attention)];
                let entries = level.select(&test);
                let probs = head_probs(&h.model, &encoder, &cache.bank(&entries)?, batch)?;
                let (off, as_error) = level_metrics(level, &probs, &level.labels(&entries)?, h.threshold.tau)?;
                log(&format!(
                    "{} {}: macro F1 {:.4}, accuracy {:.4}",
                    level.as_str(),
                    if attention { "attention" } else { "no attention" },
                    off.macro_avg.f1,
                    off.accuracy
                ));
                let name = metrics_file(level, attention);
                write_json(
                    &LevelMetrics {
                        level,
                        attention,
                        rejection_off: &off,
                        rejection_as_error: &as_error,
                    },
                    &reports_dir.join(&name),
                )?;
                files.push(format!("{REPORTS_DIR}/{name}"));
                f1.insert((level, attention), off.macro_avg.f1);
            }
        }
        let main = cfg.heads.attention;
        let (ada, admr) = (&trained[&(Level::Ada, main)], &trained[&(Level::Admr, main)]);
        let th = Thresholds {
            ada: ada.threshold.tau,
            admr: admr.threshold.tau,
        };
        write_json(
            &ThresholdReport {
                ada: &ada.threshold,
                admr: &admr.threshold,
            },
            &reports_dir.join("thresholds.json"),
        )?;
        let models = Models {
            encoder: encoder.clone(),
            ada: ada.model.clone(),
            admr: Some(admr.model.clone()),
        };
        let mixed: Vec<ManifestEntry> = test.iter().filter(|e| e.is_fake()).chain(test.iter().filter(|e| !e.is_fake())).cloned().collect();
        let scored = ScoredBatch::score(&models, &cache.bank(&mixed)?, th.ada, batch)?;
        let prop: ErrorPropagationReport = error_propagation_eval(&mixed, &scored, th)?;
        write_json(&prop, &reports_dir.join("error_propagation.json"))?;
        let expect = (!cfg.generalization_expect.is_empty()).then(|| Expectation {
            allowed: cfg.generalization_expect.clone(),
        });
        let unseen = ScoredBatch::score(&models, &cache.bank(&corpus.unseen)?, th.ada, batch)?;
        let gen: GeneralizationReport = if unseen.is_empty() {
            return Err(Error::Config("generalization needs unseen_test > 0".into()));
        } else {
            generalization_eval(unseen.len(), &unseen as &dyn Scorer, th, expect.as_ref())?
        };
        write_json(&gen, &reports_dir.join("generalization.json"))?;
        files.extend(["thresholds.json", "error_propagation.json", "generalization.json"].map(|f| format!("{REPORTS_DIR}/{f}")));
        let alt = !main;
        let summary = Summary {
            ada_macro_f1: f1[&(Level::Ada, main)],
            admr_macro_f1: f1[&(Level::Admr, main)],
            ada_macro_f1_no_attention: f1.get(&(Level::Ada, alt)).copied().filter(|_| main),
            admr_macro_f1_no_attention: f1.get(&(Level::Admr, alt)).copied().filter(|_| main),
            tau_ada: th.ada,
            tau_admr: th.admr,
            ada_error_rate: prop.ada_error_rate,
            admr_misclassification_rate: prop.admr_misclassification_rate,
            unseen_ada_rejection_rate: gen.ada_rejection_rate,
            unseen_conformance: gen.conformance,
        };
        write_json(&summary, &reports_dir.join("summary.json"))?;
        files.push(format!("{REPORTS_DIR}/summary.json"));
        Ok(summary)
    })?;

    if !cfg.keep_features {
        fs::remove_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
    }
    files.sort();
    let c = cfg;
    let manifest_doc = RunManifest {
        config: cfg,
        seeds: BTreeMap::from([
            ("corpus", c.corpus.seed),
            ("autoencoder", c.autoencoder.train.seed),
            ("head_ada", c.heads.ada.seed),
            ("head_admr", c.heads.admr.seed),
        ]),
        versions: BTreeMap::from([
            ("lava", env!("CARGO_PKG_VERSION").to_owned()),
            ("checkpoint_format", crate::checkpoint::VERSION.to_string()),
        ]),
        decisions: decisions(),
        files,
    };
    write_json(&manifest_doc, &out.join(RUN_MANIFEST))?;
    let epoch_secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let timings = serde_json::json!({
        "started_unix": epoch_secs(started),
        "finished_unix": epoch_secs(SystemTime::now()),
        "total_seconds": clock.start.elapsed().as_secs_f64(),
        "stages": clock.stages.iter().map(|(s, t)| serde_json::json!({"stage": s, "seconds": t})).collect::<Vec<_>>(),
    });
    write_json(&timings, &out.join(TIMINGS))?;
    Ok(summary)
}

/// Names of every deterministic file under a finished run, relative to it.
pub fn bundle_files(out: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, acc)?;
            } else if p.file_name().is_some_and(|n| n != TIMINGS) {
                acc.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    walk(out, out, &mut acc)?;
    Ok(acc)
}
