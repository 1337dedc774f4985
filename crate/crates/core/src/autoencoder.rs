//! Fake-only convolutional autoencoder: the four-block encoder, its
//! mirrored transposed-conv decoder, the smoothed-L1 reconstruction loss
//! and the early-stopped training loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_clips, Authenticity, Manifest, Split, CLIP_SAMPLES};
use crate::error::{Error, Result};
use crate::kernel::{
    conv_output_len, Activation, AdamState, ConvGeometry, LayerSpec, Mode, ParamStore, Scalar, Sequential, Tensor,
};
use crate::training::{clip_batch, epoch_order, EarlyStopping, TrainConfig};

pub const LATENT_CHANNELS: usize = 256;
pub const ENCODER_NAME: &str = "enc";
pub const DECODER_NAME: &str = "dec";
/// Zero-based index of the encoder's final convolution (layer 10).
pub const FINAL_CONV: usize = 9;

const CHANNELS: [usize; 5] = [1, 32, 64, 128, 256];
const KERNEL: usize = 9;
const STRIDE: usize = 2;
const PADDING: usize = 4;

/// Conv1D(K=9, S=2, P=4) + BatchNorm1D + ReLU, four times: 1→32→64→128→256.
pub fn encoder_spec() -> Sequential {
    let mut layers = Vec::new();
    for w in CHANNELS.windows(2) {
        layers.push(LayerSpec::Conv1d {
            in_channels: w[0],
            out_channels: w[1],
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
        });
        layers.push(LayerSpec::BatchNorm1d { features: w[1] });
        layers.push(LayerSpec::Activation(Activation::ReLU));
    }
    Sequential::new(ENCODER_NAME, layers)
}

/// Mirror of the encoder with transposed convolutions (output padding 1),
/// BatchNorm1D + ReLU after the first three blocks and Tanh at the end.
pub fn decoder_spec() -> Sequential {
    let mut layers = Vec::new();
    let rev: Vec<usize> = CHANNELS.iter().rev().copied().collect();
    for (i, w) in rev.windows(2).enumerate() {
        layers.push(LayerSpec::ConvTranspose1d {
            in_channels: w[0],
            out_channels: w[1],
            kernel: KERNEL,
            stride: STRIDE,
            padding: PADDING,
            output_padding: 1,
        });
        if i + 2 < rev.len() {
            layers.push(LayerSpec::BatchNorm1d { features: w[1] });
            layers.push(LayerSpec::Activation(Activation::ReLU));
        } else {
            layers.push(LayerSpec::Activation(Activation::Tanh));
        }
    }
    Sequential::new(DECODER_NAME, layers)
}

/// Latent time length for an `len`-sample input.
pub fn latent_len(len: usize) -> Result<usize> {
    let geom = ConvGeometry::new(STRIDE, PADDING);
    (0..4).try_fold(len, |l, _| conv_output_len(l, KERNEL, geom))
}

/// Fresh encoder + decoder parameters.
pub fn init_autoencoder<T: Scalar>(seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    encoder_spec().init_into(&mut store, &mut rng);
    decoder_spec().init_into(&mut store, &mut rng);
    store
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { beta: 1e-4 }
    }
}

/// Per-element smoothed L1 of a residual `d`.
#[inline]
pub fn smoothed_l1_elem(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smoothed_l1_elem`]; `|d| == beta` takes the linear branch.
#[inline]
pub fn smoothed_l1_elem_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Mean smoothed-L1 between target `x` and reconstruction `x_hat`, with
/// the gradient with respect to `x_hat`.
pub fn smoothed_l1<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>, beta: f64) -> Result<(f64, Tensor<T>)> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!(
            "loss operands differ: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Argument("beta must be positive".into()));
    }
    let n = x.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<T> = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = b.as_f64() - a.as_f64();
            sum += smoothed_l1_elem(d, beta);
            T::lit(smoothed_l1_elem_grad(d, beta) / n)
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(x.shape(), grad)?))
}

fn check_clip(samples: &[f32]) -> Result<()> {
    if samples.len() != CLIP_SAMPLES {
        return Err(Error::shape(format!(
            "expected a preprocessed {CLIP_SAMPLES}-sample clip, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// Eval-mode latent `[256, 3000]` of a preprocessed clip.
pub fn encode(samples: &[f32], store: &ParamStore<f32>) -> Result<Tensor<f32>> {
    check_clip(samples)?;
    let z = encoder_spec().infer(store, clip_batch(&[samples])?)?;
    let t = z.shape()[2];
    z.reshape(&[LATENT_CHANNELS, t])
}

/// Eval-mode decoder output for a preprocessed clip.
pub fn reconstruct(samples: &[f32], store: &ParamStore<f32>) -> Result<Vec<f32>> {
    check_clip(samples)?;
    reconstruct_any(samples, store)
}

fn reconstruct_any(samples: &[f32], store: &ParamStore<f32>) -> Result<Vec<f32>> {
    decoder_spec().validate_store(store)?;
    let z = encoder_spec().infer(store, clip_batch(&[samples])?)?;
    Ok(decoder_spec().infer(store, z)?.into_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct AeOutcome {
    /// Parameters from the best validation epoch.
    pub store: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Per-step training losses, in order.
    pub step_losses: Vec<f64>,
}

pub fn write_history<R: Serialize>(records: &[R], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn train_step(
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    enc: &Sequential,
    dec: &Sequential,
    batch: Tensor<f32>,
    beta: f64,
) -> Result<f64> {
    store.zero_grads();
    let (z, enc_tape) = enc.forward(store, batch.clone(), Mode::Train)?;
    let (x_hat, dec_tape) = dec.forward(store, z, Mode::Train)?;
    let (loss, grad) = smoothed_l1(&batch, &x_hat, beta)?;
    let gz = dec
        .backward(store, &dec_tape, grad, true)?
        .ok_or_else(|| Error::Invariant("decoder returned no input gradient".into()))?;
    enc.backward(store, &enc_tape, gz, false)?;
    adam.step(store);
    enc_tape.commit_running_stats(enc, store)?;
    dec_tape.commit_running_stats(dec, store)?;
    Ok(loss)
}

/// Mean per-element validation loss, eval-mode.
pub fn evaluate_reconstruction(store: &ParamStore<f32>, clips: &[Vec<f32>], batch: usize, beta: f64) -> Result<f64> {
    let (enc, dec) = (encoder_spec(), decoder_spec());
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in clips.chunks(batch.max(1)) {
        let refs: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let x = clip_batch::<f32>(&refs)?;
        let x_hat = dec.infer(store, enc.infer(store, x.clone())?)?;
        let (loss, _) = smoothed_l1(&x, &x_hat, beta)?;
        total += loss * x.len() as f64;
        count += x.len();
    }
    Ok(total / count as f64)
}

/// Trains on in-memory clips of any common length.
pub fn train_autoencoder_on(
    train: &[Vec<f32>],
    val: &[Vec<f32>],
    cfg: &TrainConfig,
    loss: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<AeOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("autoencoder training needs non-empty train and val splits".into()));
    }
    let (enc, dec) = (encoder_spec(), decoder_spec());
    let mut store = init_autoencoder::<f32>(cfg.seed);
    let mut adam = AdamState::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, train.len(), cfg.shuffle);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let refs: Vec<&[f32]> = idx.iter().map(|&i| train[i].as_slice()).collect();
            let l = train_step(&mut store, &mut adam, &enc, &dec, clip_batch(&refs)?, loss.beta)?;
            step_losses.push(l);
            sum += l * idx.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = evaluate_reconstruction(&store, val, cfg.batch, loss.beta)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at epoch {epoch}")));
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = store.clone();
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_so_far: stopper.best_loss().unwrap_or(val_loss),
        };
        on_epoch(&rec);
        history.push(rec);
        if decision.stop {
            break;
        }
    }
    Ok(AeOutcome {
        store: best,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        step_losses,
    })
}

/// Loads the train/val splits of a fake-only manifest and trains.
pub fn train_autoencoder(
    manifest: &Manifest,
    root: &Path,
    cfg: &TrainConfig,
    loss: &LossConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<AeOutcome> {
    if let Some(e) = manifest.iter().find(|e| e.authenticity == Authenticity::Real) {
        return Err(Error::Validation(format!(
            "autoencoder training is fake-only, found real entry {}",
            e.path.display()
        )));
    }
    let pick = |s: Split| manifest.iter().filter(|e| e.split == s).cloned().collect::<Vec<_>>();
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("manifest needs train and val entries".into()));
    }
    let train = load_clips(root, &train)?;
    let val = load_clips(root, &val)?;
    train_autoencoder_on(&train, &val, cfg, loss, on_epoch)
}

/// Mean absolute reconstruction error of one clip (any length).
pub fn reconstruction_mae(samples: &[f32], store: &ParamStore<f32>) -> Result<f64> {
    let y = reconstruct_any(samples, store)?;
    Ok(samples
        .iter()
        .zip(&y)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::conv_transpose_output_len;
    use proptest::prelude::*;

    #[test]
    fn latent_shape_for_clip() {
        assert_eq!(latent_len(48_000).unwrap(), 3000);
        let store = init_autoencoder::<f32>(0);
        let x: Vec<f32> = (0..CLIP_SAMPLES).map(|i| ((i as f32) * 0.01).sin()).collect();
        let z = encode(&x, &store).unwrap();
        assert_eq!(z.shape(), &[256, 3000]);
        assert!(z.data().iter().all(|v| v.is_finite()));
        assert_eq!(encode(&x, &store).unwrap(), z);
    }

    #[test]
    fn encode_rejects_raw_length() {
        let store = init_autoencoder::<f32>(0);
        assert!(matches!(encode(&[0.0; 1000], &store), Err(Error::Shape(_))));
    }

    #[test]
    fn decoder_restores_length() {
        let geom = ConvGeometry::new(STRIDE, PADDING).with_output_padding(1);
        let l = (0..4).fold(3000, |l, _| conv_transpose_output_len(l, KERNEL, geom).unwrap());
        assert_eq!(l, 48_000);
        let spec = encoder_spec();
        assert_eq!(spec.layers.len(), 12);
        assert!(matches!(spec.layers[FINAL_CONV], LayerSpec::Conv1d { in_channels: 128, out_channels: 256, .. }));
    }

    #[test]
    fn zero_input_zero_final_conv_is_finite() {
        let mut store = init_autoencoder::<f32>(1);
        let enc = encoder_spec();
        store.get_mut(&enc.param_name(FINAL_CONV, "weight")).unwrap().fill(0.0);
        let z = encode(&vec![0.0; CLIP_SAMPLES], &store).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reconstruct_is_in_open_interval() {
        let store = init_autoencoder::<f32>(2);
        let x: Vec<f32> = (0..CLIP_SAMPLES).map(|i| ((i as f32) * 0.003).sin()).collect();
        let y = reconstruct(&x, &store).unwrap();
        assert_eq!(y.len(), CLIP_SAMPLES);
        assert!(y.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn reconstruct_needs_decoder() {
        let store = init_autoencoder::<f32>(2).subset("enc.");
        assert!(matches!(reconstruct(&vec![0.0; CLIP_SAMPLES], &store), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn loss_scalar_examples() {
        let t = |v: f64| Tensor::<f64>::from_vec(&[1], vec![v]).unwrap();
        assert_eq!(smoothed_l1(&t(0.3), &t(0.3), 1e-4).unwrap().0, 0.0);
        assert!((smoothed_l1(&t(0.0), &t(0.5), 1e-4).unwrap().0 - 0.49995).abs() < 1e-15);
        assert!((smoothed_l1(&t(0.0), &t(5e-5), 1e-4).unwrap().0 - 1.25e-5).abs() < 1e-18);
        assert!(matches!(smoothed_l1(&t(0.0), &Tensor::zeros(&[2]), 1e-4), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_is_continuous_at_breakpoint() {
        let beta = 1e-4;
        assert!((smoothed_l1_elem(beta, beta) - 0.5 * beta).abs() < 1e-20);
        assert!((smoothed_l1_elem(beta * (1.0 - 1e-12), beta) - 0.5 * beta).abs() < 1e-15);
        assert_eq!(smoothed_l1_elem_grad(beta, beta), 1.0);
        assert_eq!(smoothed_l1_elem_grad(-beta, beta), -1.0);
    }

    proptest! {
        #[test]
        fn loss_gradient_matches_differences(d in -20.0f64..20.0, beta in 0.01f64..1.0) {
            let d = d * beta;
            // Skip the kink itself where the derivative is one-sided.
            prop_assume!(((d.abs() - beta) / beta).abs() > 1e-3);
            let h = 1e-7 * beta;
            let num = (smoothed_l1_elem(d + h, beta) - smoothed_l1_elem(d - h, beta)) / (2.0 * h);
            let ana = smoothed_l1_elem_grad(d, beta);
            prop_assert!((num - ana).abs() <= 1e-4 * ana.abs().max(1e-8), "{} vs {}", num, ana);
        }

        #[test]
        fn loss_nonnegative_zero_iff_equal(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let v = smoothed_l1_elem(b - a, 1e-4);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, a == b);
        }
    }

    #[test]
    fn manifest_with_real_entry_rejected() {
        use crate::corpus::ManifestEntry;
        let m = vec![ManifestEntry::real("a.wav", Split::Train)];
        let err = train_autoencoder(&m, Path::new("."), &TrainConfig::default(), &LossConfig::default(), |_| {})
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn empty_split_is_config_error() {
        let err = train_autoencoder_on(&[vec![0.0; 64]], &[], &TrainConfig::default(), &LossConfig::default(), |_| {})
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn short_run_is_deterministic() {
        let clips: Vec<Vec<f32>> = (0..6)
            .map(|k| (0..256).map(|i| ((i * (k + 1)) as f32 * 0.05).sin() * 0.8).collect())
            .collect();
        let cfg = TrainConfig {
            max_epochs: 3,
            batch: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let a = train_autoencoder_on(&clips[..4], &clips[4..], &cfg, &LossConfig::default(), |_| {}).unwrap();
        let b = train_autoencoder_on(&clips[..4], &clips[4..], &cfg, &LossConfig::default(), |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert!(a.store.values_bit_identical(&b.store));
        let best = a.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch - 1].val_loss, best);
    }
}
