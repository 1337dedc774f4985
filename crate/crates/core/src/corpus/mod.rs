//! Audio ingest and preprocessing, the JSON-Lines manifest, and the
//! deterministic synthetic corpus.

mod manifest;
mod resample;
mod synth;
mod wav;

use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use manifest::{
    parse_manifest, read_manifest, write_manifest, Authenticity, CodecModel, Manifest, ManifestEntry, Split,
    Technology,
};
pub use resample::resample;
pub use synth::{
    synth_corpus, synthesize_sample, ClassPlan, ClassRecipe, SynthClass, SynthCorpus, SynthSpec, MANIFEST_FILE,
    UNSEEN_MANIFEST_FILE,
};
pub use wav::{decode_wav, encode_wav_f32, encode_wav_pcm16, load_wav, write_wav_f32, write_wav_pcm16};

use crate::error::Result;

/// Sample rate every model input is converted to.
pub const TARGET_RATE: u32 = 16_000;
/// Fixed clip length: 3 s at 16 kHz.
pub const CLIP_SAMPLES: usize = 48_000;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub rate: u32,
    /// Set by [`normalize_peak`] when the signal is all zeros.
    pub silent: bool,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, rate: u32) -> Self {
        Self {
            samples,
            rate,
            silent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Whether the waveform already satisfies the model-input contract.
    pub fn is_conformant(&self) -> bool {
        self.rate == TARGET_RATE && self.len() == CLIP_SAMPLES && self.peak() <= 1.0
    }
}

/// Divides by the peak magnitude. All-zero input is returned unchanged
/// with the silence flag set.
pub fn normalize_peak(mut w: Waveform) -> Waveform {
    let peak = w.peak();
    if peak > 0.0 {
        for s in &mut w.samples {
            *s /= peak;
        }
        w.silent = false;
    } else {
        w.silent = true;
    }
    w
}

/// Keeps the first `n` samples or zero-pads to `n`.
pub fn fit_length(mut w: Waveform, n: usize) -> Waveform {
    w.samples.resize(n, 0.0);
    w
}

/// Resample to 16 kHz, peak-normalize, then trim/pad to 48,000 samples.
pub fn preprocess_waveform(w: Waveform) -> Result<Waveform> {
    let w = resample(&w, TARGET_RATE)?;
    Ok(fit_length(normalize_peak(w), CLIP_SAMPLES))
}

/// `load_wav -> resample -> normalize_peak -> fit_length`.
pub fn preprocess(path: impl AsRef<Path>) -> Result<Waveform> {
    preprocess_waveform(load_wav(path)?)
}

/// Joins a manifest path onto `root` unless it is already absolute.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

/// Preprocesses every entry, in manifest order.
pub fn load_clips(root: &Path, entries: &[ManifestEntry]) -> Result<Vec<Vec<f32>>> {
    entries
        .par_iter()
        .map(|e| preprocess(resolve(root, &e.path)).map(|w| w.samples))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn preprocessing_is_idempotent(
            samples in prop::collection::vec(-2.0f32..2.0, 0..3000),
            rate in prop::sample::select(vec![8_000u32, 16_000, 22_050, 44_100]),
        ) {
            let once = preprocess_waveform(Waveform::new(samples, rate)).unwrap();
            prop_assert!(once.is_conformant());
            let twice = preprocess_waveform(once.clone()).unwrap();
            let bits = |w: &Waveform| w.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&once), bits(&twice));
            prop_assert_eq!(once.silent, twice.silent);
        }
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_peak(Waveform::new(vec![0.2, -0.5], 16000));
        assert_eq!(w.samples, vec![0.4, -1.0]);
        let z = normalize_peak(Waveform::new(vec![0.0; 4], 16000));
        assert!(z.silent);
        assert_eq!(z.samples, vec![0.0; 4]);
        let p = normalize_peak(Waveform::new(vec![1.0, -0.3, 0.7], 16000));
        assert_eq!(p.samples, vec![1.0, -0.3, 0.7]);
    }

    #[test]
    fn fit_length_examples() {
        let long: Vec<f32> = (0..80_000).map(|i| i as f32).collect();
        let w = fit_length(Waveform::new(long.clone(), 16000), CLIP_SAMPLES);
        assert_eq!(w.samples, long[..48_000].to_vec());
        let short = vec![0.5f32; 10_000];
        let w = fit_length(Waveform::new(short, 16000), CLIP_SAMPLES);
        assert_eq!(w.len(), 48_000);
        assert!(w.samples[..10_000].iter().all(|&v| v == 0.5));
        assert!(w.samples[10_000..].iter().all(|&v| v == 0.0));
        let exact = Waveform::new(vec![0.25; 48_000], 16000);
        assert_eq!(fit_length(exact.clone(), CLIP_SAMPLES), exact);
    }

    #[test]
    fn preprocess_missing_file_is_io_error() {
        let err = preprocess("/nonexistent/definitely/missing.wav").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn silent_input_survives_preprocessing() {
        let w = preprocess_waveform(Waveform::new(vec![0.0; 1000], 8000)).unwrap();
        assert!(w.silent);
        assert_eq!(w.len(), CLIP_SAMPLES);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }
}
