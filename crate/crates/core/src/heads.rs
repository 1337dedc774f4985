//! Attention-gated classification heads on top of the frozen encoder.
//!
//! A head owns a private copy of the encoder's final convolution, its
//! attention gate (absent when ablated) and a two-layer classifier. The
//! encoder's first nine layers are shared and frozen, so their output
//! (the "prefix features", `[128, 6000]` per clip) can be computed once
//! and replayed from a [`FeatureBank`].

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{encoder_spec, FINAL_CONV, LATENT_CHANNELS};
use crate::corpus::{load_clips, CodecModel, ManifestEntry, Technology};
use crate::error::{Error, Result};
use crate::kernel::batchnorm::{batchnorm1d_eval_inplace, running_inv_std, BatchNormParams};
use crate::kernel::conv::{conv1d_backward, conv1d_forward};
use crate::kernel::network::fill_uniform;
use crate::kernel::ops::{adaptive_avg_pool1, adaptive_avg_pool1_backward, cross_entropy, linear_backward, linear_forward, sigmoid};
use crate::kernel::{kaiming_bound, AdamState, ConvGeometry, ParamKind, ParamStore, Scalar, Tensor};
use crate::training::{clip_batch, epoch_order, EarlyStopping, TrainConfig};

pub const FINAL_CONV_WEIGHT: &str = "head.final_conv.weight";
pub const FINAL_CONV_BIAS: &str = "head.final_conv.bias";
pub const ATTN_WEIGHT: &str = "head.attn.weight";
pub const ATTN_BIAS: &str = "head.attn.bias";
pub const FC1_WEIGHT: &str = "head.fc1.weight";
pub const FC1_BIAS: &str = "head.fc1.bias";
pub const FC2_WEIGHT: &str = "head.fc2.weight";
pub const FC2_BIAS: &str = "head.fc2.bias";

const HIDDEN: usize = 128;
const PREFIX_CHANNELS: usize = 128;
const FINAL_GEOM: ConvGeometry = ConvGeometry::new(2, 4);
const POINTWISE: ConvGeometry = ConvGeometry::new(1, 0);

pub const ADA_VOCAB: [&str; 3] = ["ASV", "FoR", "Codec"];
pub const ADMR_VOCAB: [&str; 6] = ["F01", "F02", "F03", "F04", "F05", "F06"];

/// Attribution level: technology (ADA) or codec model (ADMR).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Ada,
    Admr,
}

impl Level {
    pub fn vocab(self) -> &'static [&'static str] {
        match self {
            Level::Ada => &ADA_VOCAB,
            Level::Admr => &ADMR_VOCAB,
        }
    }

    pub fn n_classes(self) -> usize {
        self.vocab().len()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Ada => "ada",
            Level::Admr => "admr",
        }
    }

    /// Class index of an entry, if it carries this level's label.
    pub fn label_of(self, e: &ManifestEntry) -> Option<usize> {
        match self {
            Level::Ada => e.technology.map(Technology::index),
            Level::Admr => e.model.map(CodecModel::index),
        }
    }

    /// Entries this level trains on: fakes for ADA, Codec fakes for ADMR.
    pub fn select(self, entries: &[ManifestEntry]) -> Vec<ManifestEntry> {
        entries
            .iter()
            .filter(|e| match self {
                Level::Ada => e.is_fake(),
                Level::Admr => e.technology == Some(Technology::Codec),
            })
            .cloned()
            .collect()
    }

    pub fn labels(self, entries: &[ManifestEntry]) -> Result<Vec<usize>> {
        entries
            .iter()
            .map(|e| {
                self.label_of(e).ok_or_else(|| {
                    Error::Validation(format!(
                        "{} has no {} label",
                        e.path.display(),
                        self.as_str().to_uppercase()
                    ))
                })
            })
            .collect()
    }
}

impl std::str::FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ada" => Ok(Level::Ada),
            "admr" => Ok(Level::Admr),
            _ => Err(Error::Argument(format!("unknown level `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub level: Level,
    pub attention: bool,
}

impl HeadSpec {
    pub fn new(level: Level, attention: bool) -> Self {
        Self { level, attention }
    }

    /// Tensor names and shapes this head owns.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = LATENT_CHANNELS;
        let mut v = vec![
            (FINAL_CONV_WEIGHT, vec![c, PREFIX_CHANNELS, 9]),
            (FINAL_CONV_BIAS, vec![c]),
        ];
        if self.attention {
            v.push((ATTN_WEIGHT, vec![c, c, 1]));
            v.push((ATTN_BIAS, vec![c]));
        }
        v.extend([
            (FC1_WEIGHT, vec![HIDDEN, c]),
            (FC1_BIAS, vec![HIDDEN]),
            (FC2_WEIGHT, vec![self.level.n_classes(), HIDDEN]),
            (FC2_BIAS, vec![self.level.n_classes()]),
        ]);
        v
    }

    pub fn validate_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        for (name, shape) in self.tensors() {
            let t = store
                .get(name)
                .map_err(|_| Error::checkpoint(name, "required tensor missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::checkpoint(name, format!("shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

fn bn_name(suffix: &str) -> String {
    encoder_spec().param_name(FINAL_CONV + 1, suffix)
}

/// New head parameters: the final conv copied from `encoder`, the rest
/// Kaiming-uniform from `seed` with zero biases. Every tensor is trainable.
pub fn init_head<T: Scalar>(spec: HeadSpec, encoder: &ParamStore<T>, seed: u64) -> Result<ParamStore<T>> {
    let enc = encoder_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in spec.tensors() {
        let value = match name {
            FINAL_CONV_WEIGHT => encoder.get(&enc.param_name(FINAL_CONV, "weight"))?.clone(),
            FINAL_CONV_BIAS => encoder.get(&enc.param_name(FINAL_CONV, "bias"))?.clone(),
            _ if name.ends_with(".bias") => Tensor::zeros(&shape),
            _ => {
                let mut t = Tensor::zeros(&shape);
                let fan_in: usize = shape[1..].iter().product();
                fill_uniform(&mut t, kaiming_bound(fan_in), &mut rng);
                t
            }
        };
        value.expect_shape(&shape)?;
        store.insert(name, value, ParamKind::Weight, true);
    }
    Ok(store)
}

/// `z * sigmoid(conv1x1(z))`; returns the gated latent and the gate.
pub fn attention_apply<T: Scalar>(z: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut gate = conv1d_forward(z, w, Some(b), POINTWISE)?;
    for g in gate.data_mut() {
        *g = sigmoid(*g);
    }
    let mut out = z.clone();
    for (o, &g) in out.data_mut().iter_mut().zip(gate.data()) {
        *o = *o * g;
    }
    Ok((out, gate))
}

/// Frozen encoder layers 1..9 in eval mode: `[B, 1, L] -> [B, 128, L/8]`.
pub fn prefix_features<T: Scalar>(encoder: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
    encoder_spec().infer_range(encoder, x, 0..FINAL_CONV)
}

/// Forward record of [`head_forward`].
pub struct HeadTape<T> {
    prefix: Tensor<T>,
    z: Tensor<T>,
    gate: Option<Tensor<T>>,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
}

/// Logits `[B, n]` from prefix features `[B, 128, T]`.
pub fn head_forward<T: Scalar>(
    spec: HeadSpec,
    head: &ParamStore<T>,
    encoder: &ParamStore<T>,
    prefix: Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, Option<HeadTape<T>>)> {
    let mut z = conv1d_forward(&prefix, head.get(FINAL_CONV_WEIGHT)?, Some(head.get(FINAL_CONV_BIAS)?), FINAL_GEOM)?;
    let bn = BatchNormParams {
        gain: encoder.get(&bn_name("gain"))?,
        shift: encoder.get(&bn_name("shift"))?,
        running_mean: encoder.get(&bn_name("running_mean"))?,
        running_var: encoder.get(&bn_name("running_var"))?,
    };
    batchnorm1d_eval_inplace(&mut z, bn)?;
    for v in z.data_mut() {
        *v = v.max(T::zero());
    }
    let (gated, gate) = if spec.attention {
        let (g, gate) = attention_apply(&z, head.get(ATTN_WEIGHT)?, head.get(ATTN_BIAS)?)?;
        (g, Some(gate))
    } else {
        (z.clone(), None)
    };
    let (b, c, _) = gated.dims3()?;
    let pooled = adaptive_avg_pool1(&gated)?.reshape(&[b, c])?;
    drop(gated);
    let mut hidden = linear_forward(&pooled, head.get(FC1_WEIGHT)?, head.get(FC1_BIAS)?)?;
    for v in hidden.data_mut() {
        *v = v.max(T::zero());
    }
    let logits = linear_forward(&hidden, head.get(FC2_WEIGHT)?, head.get(FC2_BIAS)?)?;
    let tape = record.then_some(HeadTape {
        prefix,
        z,
        gate,
        pooled,
        hidden,
    });
    Ok((logits, tape))
}

/// Accumulates parameter gradients into the trainable slots of `head`.
/// Returns the prefix-feature gradient when requested.
pub fn head_backward<T: Scalar>(
    spec: HeadSpec,
    head: &mut ParamStore<T>,
    encoder: &ParamStore<T>,
    tape: &HeadTape<T>,
    grad_logits: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let g2 = linear_backward(&tape.hidden, head.get(FC2_WEIGHT)?, grad_logits)?;
    head.accumulate_grad(FC2_WEIGHT, &g2.weight)?;
    head.accumulate_grad(FC2_BIAS, &g2.bias)?;
    let mut dh = g2.input;
    for (d, &h) in dh.data_mut().iter_mut().zip(tape.hidden.data()) {
        if h <= T::zero() {
            *d = T::zero();
        }
    }
    let g1 = linear_backward(&tape.pooled, head.get(FC1_WEIGHT)?, &dh)?;
    head.accumulate_grad(FC1_WEIGHT, &g1.weight)?;
    head.accumulate_grad(FC1_BIAS, &g1.bias)?;
    let (b, c, t) = tape.z.dims3()?;
    let d_gated = adaptive_avg_pool1_backward(&g1.input.reshape(&[b, c, 1])?, t)?;
    let mut dz = match (&tape.gate, spec.attention) {
        (Some(gate), true) => {
            let mut ds = d_gated.clone();
            for ((d, &g), &z) in ds.data_mut().iter_mut().zip(gate.data()).zip(tape.z.data()) {
                *d = *d * z * g * (T::one() - g);
            }
            let ga = conv1d_backward(&tape.z, head.get(ATTN_WEIGHT)?, &ds, POINTWISE, true)?;
            head.accumulate_grad(ATTN_WEIGHT, &ga.weight)?;
            head.accumulate_grad(ATTN_BIAS, &ga.bias)?;
            let mut dz = ga.input.ok_or_else(|| Error::Invariant("missing gate input gradient".into()))?;
            for ((d, &dg), &g) in dz.data_mut().iter_mut().zip(d_gated.data()).zip(gate.data()) {
                *d += dg * g;
            }
            dz
        }
        _ => d_gated,
    };
    let bn = BatchNormParams {
        gain: encoder.get(&bn_name("gain"))?,
        shift: encoder.get(&bn_name("shift"))?,
        running_mean: encoder.get(&bn_name("running_mean"))?,
        running_var: encoder.get(&bn_name("running_var"))?,
    };
    let scale: Vec<T> = running_inv_std(&bn)
        .iter()
        .zip(bn.gain.data())
        .map(|(&s, &g)| T::lit(s * g.as_f64()))
        .collect();
    for (row_idx, (row, zrow)) in dz.data_mut().chunks_mut(t).zip(tape.z.data().chunks(t)).enumerate() {
        let k = scale[row_idx % c];
        for (d, &z) in row.iter_mut().zip(zrow) {
            *d = if z > T::zero() { *d * k } else { T::zero() };
        }
    }
    let gc = conv1d_backward(&tape.prefix, head.get(FINAL_CONV_WEIGHT)?, &dz, FINAL_GEOM, need_input_grad)?;
    head.accumulate_grad(FINAL_CONV_WEIGHT, &gc.weight)?;
    head.accumulate_grad(FINAL_CONV_BIAS, &gc.bias)?;
    Ok(gc.input)
}

/// A trained or freshly initialized head.
#[derive(Clone, Debug)]
pub struct HeadModel {
    pub spec: HeadSpec,
    pub params: ParamStore<f32>,
}

impl HeadModel {
    pub fn logits_from_prefix(&self, encoder: &ParamStore<f32>, prefix: Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(head_forward(self.spec, &self.params, encoder, prefix, false)?.0)
    }

    /// Softmax probabilities (computed in f64) per row.
    pub fn probs_from_prefix(&self, encoder: &ParamStore<f32>, prefix: Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits_from_prefix(encoder, prefix)?;
        let n = self.spec.level.n_classes();
        Ok(logits
            .data()
            .chunks(n)
            .map(|row| {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                crate::kernel::softmax(&row)
            })
            .collect())
    }

    /// Full path from preprocessed clips.
    pub fn probs(&self, encoder: &ParamStore<f32>, clips: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let prefix = prefix_features(encoder, clip_batch(clips)?)?;
        self.probs_from_prefix(encoder, prefix)
    }
}

/// Source of prefix features for a fixed list of clips.
pub trait FeatureBank: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// `[idx.len(), 128, T]` features, rows in `idx` order.
    fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>>;
}

/// Computes features on demand from in-memory clips.
pub struct ClipBank<'a> {
    pub clips: &'a [Vec<f32>],
    pub encoder: &'a ParamStore<f32>,
}

impl FeatureBank for ClipBank<'_> {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let refs: Vec<&[f32]> = idx.iter().map(|&i| self.clips[i].as_slice()).collect();
        prefix_features(self.encoder, clip_batch(&refs)?)
    }
}

/// Prefix features stored one file per clip (little-endian f32).
#[derive(Clone, Debug)]
pub struct DiskBank {
    files: Vec<PathBuf>,
    shape: [usize; 2],
}

impl FeatureBank for DiskBank {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let per = self.shape[0] * self.shape[1];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            let path = &self.files[i];
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() != per * 4 {
                return Err(Error::Invariant(format!("feature file {} has wrong size", path.display())));
            }
            data.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        Tensor::from_vec(&[idx.len(), self.shape[0], self.shape[1]], data)
    }
}

/// Prefix features for a set of manifest entries, keyed by path.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    keys: std::collections::BTreeMap<PathBuf, PathBuf>,
    shape: [usize; 2],
}

impl FeatureCache {
    /// Preprocesses every distinct entry under `root` and writes its
    /// prefix features into `dir`.
    pub fn build(encoder: &ParamStore<f32>, root: &Path, entries: &[ManifestEntry], dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut unique: Vec<ManifestEntry> = Vec::new();
        let mut keys = std::collections::BTreeMap::new();
        for e in entries {
            if !keys.contains_key(&e.path) {
                keys.insert(e.path.clone(), dir.join(format!("{:06}.f32", unique.len())));
                unique.push(e.clone());
            }
        }
        let mut shape = [PREFIX_CHANNELS, 0];
        for chunk in unique.chunks(16) {
            let clips = load_clips(root, chunk)?;
            let refs: Vec<&[f32]> = clips.iter().map(Vec::as_slice).collect();
            let feats = prefix_features(encoder, clip_batch(&refs)?)?;
            let (_, c, t) = feats.dims3()?;
            shape = [c, t];
            for (i, e) in chunk.iter().enumerate() {
                let bytes: Vec<u8> = feats.item(i).iter().flat_map(|v| v.to_le_bytes()).collect();
                let path = &keys[&e.path];
                fs::write(path, bytes).map_err(|err| Error::io(path, err))?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            keys,
            shape,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn bank(&self, entries: &[ManifestEntry]) -> Result<DiskBank> {
        let files = entries
            .iter()
            .map(|e| {
                self.keys
                    .get(&e.path)
                    .cloned()
                    .ok_or_else(|| Error::Invariant(format!("{} missing from feature cache", e.path.display())))
            })
            .collect::<Result<_>>()?;
        Ok(DiskBank {
            files,
            shape: self.shape,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct HeadOutcome {
    pub model: HeadModel,
    pub history: Vec<HeadEpochRecord>,
    pub best_epoch: usize,
}

/// Mean cross-entropy and accuracy of `model` on a labeled bank.
pub fn evaluate_head(
    model: &HeadModel,
    encoder: &ParamStore<f32>,
    bank: &dyn FeatureBank,
    labels: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..bank.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let logits = model.logits_from_prefix(encoder, bank.batch(chunk)?)?;
        let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (l, _) = cross_entropy(&logits, &targets)?;
        loss += l * chunk.len() as f64;
        let n = model.spec.level.n_classes();
        correct += logits
            .data()
            .chunks(n)
            .zip(&targets)
            .filter(|(row, &y)| crate::kernel::argmax(row) == y)
            .count();
    }
    let n = bank.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// A random window of `len` frames shared by the whole batch; the input
/// itself when `len` is 0 or covers the time axis.
fn time_window(x: Tensor<f32>, len: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let (b, c, t) = x.dims3()?;
    if len == 0 || len >= t {
        return Ok(x);
    }
    let start = rng.gen_range(0..=t - len);
    let mut data = Vec::with_capacity(b * c * len);
    for row in x.data().chunks(t) {
        data.extend_from_slice(&row[start..start + len]);
    }
    Tensor::from_vec(&[b, c, len], data)
}

/// Trains a head on frozen encoder features. Only head tensors change.
#[allow(clippy::too_many_arguments)]
pub fn train_head_on(
    spec: HeadSpec,
    encoder: &ParamStore<f32>,
    train: &dyn FeatureBank,
    train_labels: &[usize],
    val: &dyn FeatureBank,
    val_labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HeadEpochRecord),
) -> Result<HeadOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("head training needs non-empty train and val splits".into()));
    }
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Invariant("feature and label counts differ".into()));
    }
    let n = spec.level.n_classes();
    if let Some(&y) = train_labels.iter().chain(val_labels).find(|&&y| y >= n) {
        return Err(Error::Validation(format!("label {y} outside the {n}-class vocabulary")));
    }
    let mut model = HeadModel {
        spec,
        params: init_head(spec, encoder, cfg.seed)?,
    };
    let mut adam = AdamState::new(cfg.adam());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, train.len(), cfg.shuffle);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for idx in order.chunks(cfg.batch) {
            let targets: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
            let feats = time_window(train.batch(idx)?, cfg.window, &mut crop_rng)?;
            let (logits, tape) = head_forward(spec, &model.params, encoder, feats, true)?;
            let (loss, grad) = cross_entropy(&logits, &targets)?;
            correct += logits
                .data()
                .chunks(n)
                .zip(&targets)
                .filter(|(row, &y)| crate::kernel::argmax(row) == y)
                .count();
            model.params.zero_grads();
            let tape = tape.ok_or_else(|| Error::Invariant("forward did not record".into()))?;
            head_backward(spec, &mut model.params, encoder, &tape, &grad, false)?;
            adam.step(&mut model.params);
            loss_sum += loss * idx.len() as f64;
        }
        let (val_loss, val_acc) = evaluate_head(&model, encoder, val, val_labels, cfg.batch)?;
        if !loss_sum.is_finite() || !val_loss.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at epoch {epoch}")));
        }
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = model.params.clone();
        }
        let rec = HeadEpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            best_so_far: stopper.best_loss().unwrap_or(val_loss),
        };
        on_epoch(&rec);
        history.push(rec);
        if decision.stop {
            break;
        }
    }
    model.params = best;
    Ok(HeadOutcome {
        model,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::init_autoencoder;
    use crate::kernel::{grad_check, GradCheckOptions};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn time_window_slices_every_row_alike() {
        let x = Tensor::from_vec(&[2, 2, 5], (0..20).map(|v| v as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = time_window(x.clone(), 3, &mut rng).unwrap();
        assert_eq!(w.shape(), &[2, 2, 3]);
        let s = w.data()[0] as usize;
        for (r, row) in w.data().chunks(3).enumerate() {
            let want: Vec<f32> = (r * 5 + s..r * 5 + s + 3).map(|v| v as f32).collect();
            assert_eq!(row, want.as_slice());
        }
        assert_eq!(time_window(x.clone(), 0, &mut rng).unwrap(), x);
        assert_eq!(time_window(x.clone(), 9, &mut rng).unwrap(), x);
    }

    #[test]
    fn zero_attention_halves_latent() {
        let z = random(&[2, 4, 5], 1);
        let (out, gate) = attention_apply(&z, &Tensor::zeros(&[4, 4, 1]), &Tensor::zeros(&[4])).unwrap();
        assert!(gate.data().iter().all(|&g| g == 0.5));
        for (o, v) in out.data().iter().zip(z.data()) {
            assert_eq!(*o, 0.5 * v);
        }
    }

    #[test]
    fn gate_matches_hand_evaluation() {
        // C=2, T=3
        let z = Tensor::from_vec(&[1, 2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.1, -0.3]).unwrap();
        let (out, _) = attention_apply(&z, &w, &b).unwrap();
        let zd = z.data();
        for c in 0..2 {
            for t in 0..3 {
                let s = w.data()[c * 2] * zd[t] + w.data()[c * 2 + 1] * zd[3 + t] + b.data()[c];
                let expect = zd[c * 3 + t] / (1.0 + (-s as f64).exp());
                assert!((out.data()[c * 3 + t] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_depends_on_attention() {
        let enc = init_autoencoder::<f32>(0);
        let on = init_head(HeadSpec::new(Level::Admr, true), &enc, 1).unwrap();
        let off = init_head(HeadSpec::new(Level::Admr, false), &enc, 1).unwrap();
        assert_eq!(on.num_weights() - off.num_weights(), 256 * 256 + 256);
        assert!(!off.contains(ATTN_WEIGHT));
    }

    fn small_prefix(seed: u64) -> Tensor<f64> {
        random(&[2, PREFIX_CHANNELS, 16], seed).map(|v| v.max(0.0))
    }

    #[test]
    fn output_sizes_and_zero_output_layer() {
        let enc = init_autoencoder::<f64>(3);
        for (level, n) in [(Level::Ada, 3), (Level::Admr, 6)] {
            let spec = HeadSpec::new(level, true);
            let mut head = init_head(spec, &enc, 4).unwrap();
            let (logits, _) = head_forward(spec, &head, &enc, small_prefix(5), false).unwrap();
            assert_eq!(logits.shape(), &[2, n]);
            head.get_mut(FC2_WEIGHT).unwrap().fill(0.0);
            let (logits, _) = head_forward(spec, &head, &enc, small_prefix(5), false).unwrap();
            assert!(logits.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ablation_equals_unit_gate() {
        let enc = init_autoencoder::<f64>(3);
        let off = HeadSpec::new(Level::Ada, false);
        let head = init_head(off, &enc, 4).unwrap();
        let (a, _) = head_forward(off, &head, &enc, small_prefix(6), false).unwrap();
        // A huge gate bias drives sigmoid to exactly 1 in f64.
        let on = HeadSpec::new(Level::Ada, true);
        let mut gated = head.clone();
        gated.insert(ATTN_WEIGHT, Tensor::zeros(&[256, 256, 1]), ParamKind::Weight, true);
        gated.insert(ATTN_BIAS, Tensor::full(&[256], 1e3), ParamKind::Weight, true);
        let (b, _) = head_forward(on, &gated, &enc, small_prefix(6), false).unwrap();
        assert_eq!(a, b);
    }

    fn head_gradcheck(attention: bool) -> f64 {
        let mut enc = init_autoencoder::<f64>(7);
        let rm = random(&[256], 8).map(|v| 0.1 * v);
        let rv = random(&[256], 9).map(|v| 1.0 + 0.5 * v);
        *enc.get_mut(&bn_name("running_mean")).unwrap() = rm;
        *enc.get_mut(&bn_name("running_var")).unwrap() = rv;
        let spec = HeadSpec::new(Level::Ada, attention);
        let head = init_head(spec, &enc, 10).unwrap();
        let x = small_prefix(11);
        let targets = [0usize, 2];
        let objective = |s: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
            let (logits, _) = head_forward(spec, s, &enc, x.clone(), false)?;
            Ok(cross_entropy(&logits, &targets)?.0)
        };
        let gradient = |s: &mut ParamStore<f64>, x: &Tensor<f64>| -> Result<Tensor<f64>> {
            s.zero_grads();
            let (logits, tape) = head_forward(spec, s, &enc, x.clone(), true)?;
            let (_, g) = cross_entropy(&logits, &targets)?;
            Ok(head_backward(spec, s, &enc, &tape.unwrap(), &g, true)?.unwrap())
        };
        let opts = GradCheckOptions {
            max_entries: Some(40),
            floor: 1e-6,
            ..GradCheckOptions::default()
        };
        let report = grad_check(&head, &x, objective, gradient, opts).unwrap();
        report.max_rel_error()
    }

    #[test]
    fn head_gradients_match_differences() {
        assert!(head_gradcheck(true) < 1e-4);
        assert!(head_gradcheck(false) < 1e-4);
    }

    #[test]
    fn training_touches_only_head_tensors() {
        let enc = init_autoencoder::<f32>(12);
        let before = enc.clone();
        let clips: Vec<Vec<f32>> = (0..6)
            .map(|k| (0..512).map(|i| ((i * (k % 3 + 1)) as f32 * 0.07).sin()).collect())
            .collect();
        let labels: Vec<usize> = (0..6).map(|k| k % 3).collect();
        let bank = ClipBank {
            clips: &clips,
            encoder: &enc,
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            batch: 3,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let spec = HeadSpec::new(Level::Ada, true);
        let a = train_head_on(spec, &enc, &bank, &labels, &bank, &labels, &cfg, |_| {}).unwrap();
        let b = train_head_on(spec, &enc, &bank, &labels, &bank, &labels, &cfg, |_| {}).unwrap();
        assert!(enc.values_bit_identical(&before));
        assert_eq!(a.history, b.history);
        assert!(a.model.params.values_bit_identical(&b.model.params));
        let fresh = init_head(spec, &enc, cfg.seed).unwrap();
        assert!(!fresh.values_bit_identical(&a.model.params));
    }

    #[test]
    fn out_of_vocabulary_label_rejected() {
        let enc = init_autoencoder::<f32>(0);
        let clips = vec![vec![0.1f32; 256]; 2];
        let bank = ClipBank {
            clips: &clips,
            encoder: &enc,
        };
        let err = train_head_on(
            HeadSpec::new(Level::Ada, true),
            &enc,
            &bank,
            &[0, 5],
            &bank,
            &[0, 1],
            &TrainConfig::default(),
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn disk_bank_replays_computed_features() {
        use crate::corpus::{write_wav_pcm16, Split};
        let dir = tempfile::tempdir().unwrap();
        let enc = init_autoencoder::<f32>(2);
        let mut entries = Vec::new();
        for k in 0..3 {
            let s: Vec<f32> = (0..48_000).map(|i| ((i * (k + 1)) as f32 * 0.01).sin() * 0.5).collect();
            let name = format!("c{k}.wav");
            write_wav_pcm16(dir.path().join(&name), &s, 16_000).unwrap();
            entries.push(ManifestEntry::fake(name, Technology::Asv, None, Split::Train));
        }
        let cache = FeatureCache::build(&enc, dir.path(), &entries, &dir.path().join("feat")).unwrap();
        let bank = cache.bank(&entries[1..]).unwrap();
        let clips = load_clips(dir.path(), &entries[1..]).unwrap();
        let live = ClipBank {
            clips: &clips,
            encoder: &enc,
        };
        assert_eq!(bank.batch(&[1, 0]).unwrap(), live.batch(&[1, 0]).unwrap());
    }
}
