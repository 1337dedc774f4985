//! Deterministic synthetic corpus with the ASV / FoR / Codec(F01..F06)
//! label structure, plus real-audio hard negatives and an unseen codec.
//!
//! Every sample starts as a harmonic source with vibrato and a syllable
//! envelope plus broadband breath noise, so the band limit leaves a clear
//! spectral edge. It then runs through its class recipe: low-pass band limit,
//! comb resonance, peak scaling to 0.9, additive white noise floor, and
//! finally a midrise quantizer with the class's level count. The
//! quantizer runs last so a class with `L` levels never produces more
//! than `L` distinct amplitudes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::manifest::{write_manifest, CodecModel, Manifest, ManifestEntry, Split, Technology};
use super::resample::SincKernel;
use super::wav::write_wav_pcm16;
use super::{CLIP_SAMPLES, TARGET_RATE};

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Zero crossings per side of the band-limit FIR.
const BAND_LIMIT_CROSSINGS: f64 = 16.0;
const COMB_FEEDBACK: f64 = 0.85;
const PRE_NOISE_PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthClass {
    Asv,
    FoR,
    Codec(CodecModel),
    Real,
    /// Codec-like source absent from every training manifest.
    UnseenCodec,
}

impl SynthClass {
    /// File-name stem and stream id.
    pub fn tag(self) -> &'static str {
        match self {
            SynthClass::Asv => "ASV",
            SynthClass::FoR => "FoR",
            SynthClass::Codec(m) => m.as_str(),
            SynthClass::Real => "real",
            SynthClass::UnseenCodec => "unseen",
        }
    }

    fn stream(self) -> u64 {
        match self {
            SynthClass::Asv => 0,
            SynthClass::FoR => 1,
            SynthClass::Codec(m) => 2 + m.index() as u64,
            SynthClass::Real => 8,
            SynthClass::UnseenCodec => 9,
        }
    }

    fn entry(self, path: PathBuf, split: Split) -> ManifestEntry {
        match self {
            SynthClass::Asv => ManifestEntry::fake(path, Technology::Asv, None, split),
            SynthClass::FoR => ManifestEntry::fake(path, Technology::FoR, None, split),
            SynthClass::Codec(m) => ManifestEntry::fake(path, Technology::Codec, Some(m), split),
            SynthClass::Real => ManifestEntry::real(path, split),
            SynthClass::UnseenCodec => ManifestEntry::fake(path, Technology::Codec, None, split),
        }
    }
}

/// Artifact parameters of one class. `None` disables a stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub cutoff_hz: Option<f64>,
    pub levels: Option<u32>,
    pub comb_hz: Option<f64>,
    pub noise: f64,
}

impl ClassRecipe {
    pub fn for_class(class: SynthClass) -> Self {
        const LEVELS: [u32; 6] = [256, 64, 32, 16, 12, 8];
        const COMB: [f64; 6] = [500.0, 750.0, 1000.0, 1250.0, 1500.0, 1750.0];
        const NOISE: [f64; 6] = [0.0015, 0.002, 0.0025, 0.003, 0.0035, 0.004];
        match class {
            SynthClass::Asv => Self {
                cutoff_hz: Some(7000.0),
                levels: None,
                comb_hz: Some(2250.0),
                noise: 0.004,
            },
            SynthClass::FoR => Self {
                cutoff_hz: Some(5000.0),
                levels: None,
                comb_hz: Some(350.0),
                noise: 0.008,
            },
            SynthClass::Codec(m) => Self {
                cutoff_hz: Some(3000.0),
                levels: Some(LEVELS[m.index()]),
                comb_hz: Some(COMB[m.index()]),
                noise: NOISE[m.index()],
            },
            SynthClass::Real => Self {
                cutoff_hz: None,
                levels: None,
                comb_hz: None,
                noise: 0.001,
            },
            SynthClass::UnseenCodec => Self {
                cutoff_hz: Some(2500.0),
                levels: Some(24),
                comb_hz: Some(450.0),
                noise: 0.005,
            },
        }
    }

    fn key(&self) -> (Option<u64>, Option<u32>, Option<u64>, u64) {
        (
            self.cutoff_hz.map(f64::to_bits),
            self.levels,
            self.comb_hz.map(f64::to_bits),
            self.noise.to_bits(),
        )
    }

    fn validate(&self, tag: &str) -> Result<()> {
        let nyquist = TARGET_RATE as f64 / 2.0;
        if let Some(c) = self.cutoff_hz {
            if !(c > 0.0 && c < nyquist) {
                return Err(Error::Config(format!("{tag}: cutoff {c} Hz outside (0, {nyquist})")));
            }
        }
        if let Some(l) = self.levels {
            if l < 2 {
                return Err(Error::Config(format!("{tag}: quantizer needs at least 2 levels")));
            }
        }
        if let Some(f) = self.comb_hz {
            if !(f > 0.0 && f < nyquist) {
                return Err(Error::Config(format!("{tag}: comb fundamental {f} Hz out of range")));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("{tag}: noise floor must be finite and >= 0")));
        }
        Ok(())
    }
}

/// One class with its recipe and per-split counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPlan {
    pub class: SynthClass,
    pub recipe: ClassRecipe,
    /// Train, val, test.
    pub counts: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: Vec<ClassPlan>,
}

/// Splits `total` over the six codec models round-robin, F01 first.
fn codec_share(total: usize, model: CodecModel) -> usize {
    total / 6 + usize::from(model.index() < total % 6)
}

impl SynthSpec {
    /// `per_tech` samples per technology and split (Codec divided over
    /// F01..F06), `real_test` real test clips, `unseen_test` unseen-codec
    /// test clips.
    pub fn balanced(seed: u64, per_tech: [usize; 3], real_test: usize, unseen_test: usize) -> Self {
        let plan = |class, counts| ClassPlan {
            class,
            recipe: ClassRecipe::for_class(class),
            counts,
        };
        let mut classes = vec![plan(SynthClass::Asv, per_tech), plan(SynthClass::FoR, per_tech)];
        for m in CodecModel::ALL {
            classes.push(plan(SynthClass::Codec(m), per_tech.map(|n| codec_share(n, m))));
        }
        classes.push(plan(SynthClass::Real, [0, 0, real_test]));
        classes.push(plan(SynthClass::UnseenCodec, [0, 0, unseen_test]));
        Self { seed, classes }
    }

    /// 300 / 100 / 100 per technology, 100 real and 100 unseen test clips.
    pub fn desk(seed: u64) -> Self {
        Self::balanced(seed, [300, 100, 100], 100, 100)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.classes.iter().enumerate() {
            a.recipe.validate(a.class.tag())?;
            for b in &self.classes[..i] {
                if a.class == b.class {
                    return Err(Error::Config(format!("class {} listed twice", a.class.tag())));
                }
                if a.recipe.key() == b.recipe.key() {
                    return Err(Error::Config(format!(
                        "classes {} and {} share a recipe",
                        b.class.tag(),
                        a.class.tag()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn sample_rng(seed: u64, class: SynthClass, split: Split, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_id = SPLITS.iter().position(|&s| s == split).unwrap_or(0) as u64;
    rng.set_stream((class.stream() << 48) | (split_id << 40) | idx as u64);
    rng
}

fn harmonic_source(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let fs = TARGET_RATE as f64;
    let f0 = rng.gen_range(90.0..320.0);
    let tilt: f64 = rng.gen_range(0.4..0.9);
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_depth = rng.gen_range(0.01..0.04);
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let env_rate = rng.gen_range(2.0..5.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let n_harm = ((7900.0 / (f0 * (1.0 + vib_depth))) as usize).max(1);
    // Per-harmonic complex amplitude a_k e^{i theta_k}.
    let coeffs: Vec<(f64, f64)> = (1..=n_harm)
        .map(|k| {
            let a = (k as f64).powf(-tilt);
            let th = rng.gen_range(0.0..2.0 * PI);
            (a * th.cos(), a * th.sin())
        })
        .collect();
    let breath = rng.gen_range(0.5..0.9) * norm(&coeffs) / 2f64.sqrt();
    let mut phase = 0.0f64;
    (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin());
            phase = (phase + 2.0 * PI * f / fs) % (2.0 * PI);
            let (ws, wc) = phase.sin_cos();
            let (mut pr, mut pi) = (1.0, 0.0);
            let mut acc = 0.0;
            for &(cr, ci) in &coeffs {
                let r = pr * wc - pi * ws;
                pi = pr * ws + pi * wc;
                pr = r;
                acc += cr * pi + ci * pr;
            }
            let env = 0.8 + 0.2 * (2.0 * PI * env_rate * t + env_phase).sin();
            (acc + breath * gaussian(rng)) * env
        })
        .collect()
}

fn norm(coeffs: &[(f64, f64)]) -> f64 {
    coeffs.iter().map(|(a, b)| a * a + b * b).sum::<f64>().sqrt()
}

/// Box-Muller from two uniforms keeps the stream layout fixed.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn band_limit(x: &[f64], cutoff_hz: f64) -> Vec<f64> {
    let kernel = SincKernel::new(cutoff_hz / TARGET_RATE as f64, BAND_LIMIT_CROSSINGS);
    let half = kernel.half_width().floor() as isize;
    let taps: Vec<f64> = (-half..=half).map(|u| kernel.at(u as f64)).collect();
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &h) in taps.iter().enumerate() {
                let k = i + j as isize - half;
                if (0..n).contains(&k) {
                    acc += h * x[k as usize];
                }
            }
            acc
        })
        .collect()
}

fn comb(x: &mut [f64], fundamental_hz: f64) {
    let d = ((TARGET_RATE as f64 / fundamental_hz).round() as usize).max(1);
    for i in d..x.len() {
        x[i] += COMB_FEEDBACK * x[i - d];
    }
}

/// Midrise quantizer on [-1, 1] with `levels` output values.
pub(crate) fn quantize(v: f64, levels: u32) -> f64 {
    let step = 2.0 / levels as f64;
    let idx = ((v + 1.0) / step).floor().clamp(0.0, levels as f64 - 1.0);
    -1.0 + (idx + 0.5) * step
}

/// One 3 s clip at 16 kHz for `class` using `recipe`.
pub fn synthesize_sample(seed: u64, class: SynthClass, recipe: &ClassRecipe, split: Split, idx: usize) -> Vec<f32> {
    let mut rng = sample_rng(seed, class, split, idx);
    let mut x = harmonic_source(&mut rng, CLIP_SAMPLES);
    if let Some(c) = recipe.cutoff_hz {
        x = band_limit(&x, c);
    }
    if let Some(f) = recipe.comb_hz {
        comb(&mut x, f);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PRE_NOISE_PEAK / peak } else { 0.0 };
    x.iter()
        .map(|&v| {
            let y = (v * scale + recipe.noise * gaussian(&mut rng)).clamp(-1.0, 1.0);
            match recipe.levels {
                Some(l) => quantize(y, l) as f32,
                None => y as f32,
            }
        })
        .collect()
}

/// Output of [`synth_corpus`]: the labeled corpus and the held-out
/// unseen-source manifest. Paths are relative to the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub unseen: Manifest,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const UNSEEN_MANIFEST_FILE: &str = "unseen.jsonl";

/// Writes every clip as 16-bit WAV under `out_dir/{split}/` and the two
/// manifests at the top level.
pub fn synth_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    for split in SPLITS {
        let d = out_dir.join(split.as_str());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut jobs = Vec::new();
    for plan in &spec.classes {
        for (split, &count) in SPLITS.iter().zip(&plan.counts) {
            for idx in 0..count {
                jobs.push((plan, *split, idx));
            }
        }
    }
    let entries = jobs
        .par_iter()
        .map(|&(plan, split, idx)| {
            let rel = PathBuf::from(split.as_str()).join(format!("{}_{idx:05}.wav", plan.class.tag()));
            let samples = synthesize_sample(spec.seed, plan.class, &plan.recipe, split, idx);
            write_wav_pcm16(out_dir.join(&rel), &samples, TARGET_RATE)?;
            Ok((plan.class, plan.class.entry(rel, split)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (unseen, manifest): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|(class, _)| *class == SynthClass::UnseenCodec);
    let corpus = SynthCorpus {
        manifest: manifest.into_iter().map(|(_, e)| e).collect(),
        unseen: unseen.into_iter().map(|(_, e)| e).collect(),
    };
    write_manifest(&corpus.manifest, out_dir.join(MANIFEST_FILE))?;
    write_manifest(&corpus.unseen, out_dir.join(UNSEEN_MANIFEST_FILE))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn distinct(samples: &[f32]) -> usize {
        samples.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len()
    }

    #[test]
    fn quantizer_levels() {
        let vals: BTreeSet<u64> = (0..2001)
            .map(|i| quantize(-1.0 + i as f64 / 1000.0, 8).to_bits())
            .collect();
        assert_eq!(vals.len(), 8);
        assert_eq!(quantize(0.0, 8), 0.125);
        assert_eq!(quantize(1.0, 8), 0.875);
        assert_eq!(quantize(-1.0, 8), -0.875);
    }

    #[test]
    fn codec_split_counts() {
        let spec = SynthSpec::desk(0);
        let codec_total: usize = spec
            .classes
            .iter()
            .filter(|p| matches!(p.class, SynthClass::Codec(_)))
            .map(|p| p.counts[1])
            .sum();
        assert_eq!(codec_total, 100);
        assert_eq!(codec_share(100, CodecModel::F01), 17);
        assert_eq!(codec_share(100, CodecModel::F06), 16);
        spec.validate().unwrap();
    }

    #[test]
    fn duplicate_recipe_rejected() {
        let mut spec = SynthSpec::balanced(0, [1, 1, 1], 0, 0);
        spec.classes[1].recipe = spec.classes[0].recipe;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn codec_models_differ_in_distinct_amplitudes() {
        for m in [CodecModel::F01, CodecModel::F02, CodecModel::F06] {
            let class = SynthClass::Codec(m);
            let r = ClassRecipe::for_class(class);
            let s = synthesize_sample(1, class, &r, Split::Train, 0);
            let l = r.levels.unwrap() as usize;
            assert!(distinct(&s) <= l, "{m}: {} > {l}", distinct(&s));
        }
        let f1 = synthesize_sample(1, SynthClass::Codec(CodecModel::F01), &ClassRecipe::for_class(SynthClass::Codec(CodecModel::F01)), Split::Train, 0);
        let f2 = synthesize_sample(1, SynthClass::Codec(CodecModel::F02), &ClassRecipe::for_class(SynthClass::Codec(CodecModel::F02)), Split::Train, 0);
        assert!(distinct(&f1) > distinct(&f2));
    }

    #[test]
    fn samples_are_bounded_and_seeded() {
        let r = ClassRecipe::for_class(SynthClass::Asv);
        let a = synthesize_sample(3, SynthClass::Asv, &r, Split::Val, 7);
        let b = synthesize_sample(3, SynthClass::Asv, &r, Split::Val, 7);
        let c = synthesize_sample(3, SynthClass::Asv, &r, Split::Val, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), CLIP_SAMPLES);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn corpus_is_byte_reproducible_and_balanced() {
        let spec = SynthSpec::balanced(11, [10, 2, 2], 2, 3);
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let c1 = synth_corpus(&spec, d1.path()).unwrap();
        let c2 = synth_corpus(&spec, d2.path()).unwrap();
        assert_eq!(c1, c2);
        let train: Vec<_> = c1.manifest.iter().filter(|e| e.split == Split::Train).collect();
        assert_eq!(train.len(), 30);
        for t in Technology::ALL {
            assert_eq!(train.iter().filter(|e| e.technology == Some(t)).count(), 10);
        }
        assert_eq!(c1.unseen.len(), 3);
        for e in c1.manifest.iter().chain(&c1.unseen) {
            let a = fs::read(d1.path().join(&e.path)).unwrap();
            let b = fs::read(d2.path().join(&e.path)).unwrap();
            assert_eq!(a, b, "{}", e.path.display());
        }
        let m1 = fs::read(d1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m1, fs::read(d2.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = synth_corpus(&SynthSpec::balanced(0, [1, 0, 0], 0, 0), blocker.join("sub")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
