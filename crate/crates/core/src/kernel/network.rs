//! Fixed-topology layer sequences with a recorded forward pass.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::batchnorm::{self, BatchNormCache, BatchNormParams, RunningUpdate};
use super::conv::{self, ConvGeometry};
use super::ops::{self, Activation};
use super::{ParamKind, ParamStore, Scalar, Tensor};

/// One layer of a sequence. Variants carry exactly the hyperparameters
/// their kind needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    BatchNorm1d {
        features: usize,
    },
    Activation(Activation),
    AdaptiveAvgPool1,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv1d { stride, padding, .. } => Some(ConvGeometry::new(stride, padding)),
            LayerSpec::ConvTranspose1d {
                stride,
                padding,
                output_padding,
                ..
            } => Some(ConvGeometry::new(stride, padding).with_output_padding(output_padding)),
            _ => None,
        }
    }

    /// `(name suffix, shape, kind)` of every tensor this layer owns.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, ParamKind)> {
        use ParamKind::*;
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![out_channels, in_channels, kernel], Weight),
                ("bias", vec![out_channels], Weight),
            ],
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("weight", vec![in_channels, out_channels, kernel], Weight),
                ("bias", vec![out_channels], Weight),
            ],
            LayerSpec::BatchNorm1d { features } => vec![
                ("gain", vec![features], Weight),
                ("shift", vec![features], Weight),
                ("running_mean", vec![features], Buffer),
                ("running_var", vec![features], Buffer),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features], Weight),
                ("bias", vec![out_features], Weight),
            ],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_channels, kernel, ..
            }
            | LayerSpec::ConvTranspose1d {
                in_channels, kernel, ..
            } => in_channels * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 1,
        }
    }
}

/// Batch norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-uniform weight on `(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn fill_uniform<T: Scalar>(t: &mut Tensor<T>, bound: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = T::lit(rng.gen_range(-bound..bound));
    }
}

/// Recorded state of one layer needed by the backward pass.
#[derive(Clone, Debug)]
enum Cache<T> {
    Input(Arc<Tensor<T>>),
    BatchNorm(BatchNormCache<T>),
    Output(Arc<Tensor<T>>),
    Pool { time: usize },
    Flatten { shape: Vec<usize> },
}

/// Forward record of a [`Sequential`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    running: Vec<(usize, RunningUpdate)>,
    first_layer: usize,
}

/// Named layer sequence; tensors of layer `i` (1-based) are stored as
/// `"{name}.{i}.{suffix}"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl Sequential {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    pub fn param_name(&self, layer: usize, suffix: &str) -> String {
        format!("{}.{}.{}", self.name, layer + 1, suffix)
    }

    /// Kaiming-uniform weights, zero biases, unit gain, zero shift, running
    /// mean 0 and running variance 1. Deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.init_into(&mut store, &mut rng);
        store
    }

    pub(crate) fn init_into<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, shape, kind) in layer.tensors() {
                let mut t = match suffix {
                    "gain" | "running_var" => Tensor::full(&shape, T::one()),
                    _ => Tensor::zeros(&shape),
                };
                if suffix == "weight" {
                    fill_uniform(&mut t, kaiming_bound(layer.fan_in()), rng);
                }
                store.insert(self.param_name(i, suffix), t, kind, kind == ParamKind::Weight);
            }
        }
    }

    /// Names every tensor the sequence requires.
    pub fn required_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.tensors()
                    .into_iter()
                    .map(move |(s, _, _)| (i, s))
            })
            .map(|(i, s)| self.param_name(i, s))
            .collect()
    }

    pub fn validate_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, shape, _) in layer.tensors() {
                let name = self.param_name(i, suffix);
                let t = store
                    .get(&name)
                    .map_err(|_| Error::checkpoint(&name, "required tensor missing"))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::checkpoint(
                        &name,
                        format!("shape {:?}, expected {shape:?}", t.shape()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn bn_params<'a, T: Scalar>(&self, store: &'a ParamStore<T>, i: usize) -> Result<BatchNormParams<'a, T>> {
        Ok(BatchNormParams {
            gain: store.get(&self.param_name(i, "gain"))?,
            shift: store.get(&self.param_name(i, "shift"))?,
            running_mean: store.get(&self.param_name(i, "running_mean"))?,
            running_var: store.get(&self.param_name(i, "running_var"))?,
        })
    }

    fn layer_forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        i: usize,
        x: Arc<Tensor<T>>,
        mode: Mode,
        record: bool,
    ) -> Result<(Arc<Tensor<T>>, Option<Cache<T>>, Option<RunningUpdate>)> {
        let layer = &self.layers[i];
        let w = || store.get(&self.param_name(i, "weight"));
        let b = || store.get(&self.param_name(i, "bias"));
        Ok(match *layer {
            LayerSpec::Conv1d { .. } => {
                let y = conv::conv1d_forward(&x, w()?, Some(b()?), layer.geometry().expect("conv"))?;
                (Arc::new(y), record.then_some(Cache::Input(x)), None)
            }
            LayerSpec::ConvTranspose1d { .. } => {
                let y = conv::conv_transpose1d_forward(&x, w()?, Some(b()?), layer.geometry().expect("conv"))?;
                (Arc::new(y), record.then_some(Cache::Input(x)), None)
            }
            LayerSpec::BatchNorm1d { .. } => {
                let p = self.bn_params(store, i)?;
                match mode {
                    Mode::Train => {
                        let (y, cache, upd) = batchnorm::batchnorm1d_train(&x, p)?;
                        (Arc::new(y), record.then_some(Cache::BatchNorm(cache)), Some(upd))
                    }
                    Mode::Eval if !record => {
                        let mut y = Arc::unwrap_or_clone(x);
                        batchnorm::batchnorm1d_eval_inplace(&mut y, p)?;
                        (Arc::new(y), None, None)
                    }
                    Mode::Eval => {
                        let (y, cache) = batchnorm::batchnorm1d_eval(&x, p)?;
                        (Arc::new(y), Some(Cache::BatchNorm(cache)), None)
                    }
                }
            }
            LayerSpec::Activation(kind) if !record => {
                let mut y = Arc::unwrap_or_clone(x);
                kind.forward_inplace(&mut y);
                (Arc::new(y), None, None)
            }
            LayerSpec::Activation(kind) => {
                let y = Arc::new(kind.forward(&x));
                let cache = record.then(|| Cache::Output(y.clone()));
                (y, cache, None)
            }
            LayerSpec::AdaptiveAvgPool1 => {
                let (_, _, t) = x.dims3()?;
                let y = ops::adaptive_avg_pool1(&x)?;
                (Arc::new(y), record.then_some(Cache::Pool { time: t }), None)
            }
            LayerSpec::Flatten => {
                let shape = x.shape().to_vec();
                let b = shape[0];
                let rest: usize = shape[1..].iter().product();
                let y = Arc::unwrap_or_clone(x).reshape(&[b, rest])?;
                (Arc::new(y), record.then_some(Cache::Flatten { shape }), None)
            }
            LayerSpec::Linear { .. } => {
                let y = ops::linear_forward(&x, w()?, b()?)?;
                (Arc::new(y), record.then_some(Cache::Input(x)), None)
            }
        })
    }

    /// Forward pass over all layers, recording what backward needs.
    /// Running statistics are only updated by [`Tape::commit_running_stats`].
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.forward_range(store, x, mode, 0..self.layers.len())
    }

    pub fn forward_range<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        mode: Mode,
        range: Range<usize>,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let mut tape = Tape {
            caches: Vec::with_capacity(range.len()),
            running: Vec::new(),
            first_layer: range.start,
        };
        let mut cur = Arc::new(x);
        for i in range {
            let (y, cache, upd) = self.layer_forward(store, i, cur, mode, true)?;
            tape.caches.push(cache.expect("recorded"));
            if let Some(u) = upd {
                tape.running.push((i, u));
            }
            cur = y;
        }
        Ok((Arc::unwrap_or_clone(cur), tape))
    }

    /// Eval-mode forward over `range` without recording.
    pub fn infer_range<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        let mut cur = Arc::new(x);
        for i in range {
            cur = self.layer_forward(store, i, cur, Mode::Eval, false)?.0;
        }
        Ok(Arc::unwrap_or_clone(cur))
    }

    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>) -> Result<Tensor<T>> {
        self.infer_range(store, x, 0..self.layers.len())
    }

    /// Back-propagates `grad_out` through the recorded layers, adding
    /// parameter gradients into the trainable slots of `store`.
    pub fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &Tape<T>,
        grad_out: Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut grad = grad_out;
        for (pos, cache) in tape.caches.iter().enumerate().rev() {
            let i = tape.first_layer + pos;
            let want_input = pos > 0 || need_input_grad;
            let layer = &self.layers[i];
            grad = match (layer, cache) {
                (LayerSpec::Conv1d { .. } | LayerSpec::ConvTranspose1d { .. }, Cache::Input(x)) => {
                    let wname = self.param_name(i, "weight");
                    let bname = self.param_name(i, "bias");
                    let geom = layer.geometry().expect("conv");
                    let w = store.get(&wname)?;
                    let g = if matches!(layer, LayerSpec::Conv1d { .. }) {
                        conv::conv1d_backward(x, w, &grad, geom, want_input)?
                    } else {
                        conv::conv_transpose1d_backward(x, w, &grad, geom, want_input)?
                    };
                    store.accumulate_grad(&wname, &g.weight)?;
                    store.accumulate_grad(&bname, &g.bias)?;
                    match g.input {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                (LayerSpec::BatchNorm1d { .. }, Cache::BatchNorm(c)) => {
                    let gname = self.param_name(i, "gain");
                    let g = batchnorm::batchnorm1d_backward(c, store.get(&gname)?, &grad)?;
                    store.accumulate_grad(&gname, &g.gain)?;
                    store.accumulate_grad(&self.param_name(i, "shift"), &g.shift)?;
                    g.input
                }
                (LayerSpec::Activation(kind), Cache::Output(y)) => kind.backward(y, &grad)?,
                (LayerSpec::AdaptiveAvgPool1, Cache::Pool { time }) => {
                    ops::adaptive_avg_pool1_backward(&grad, *time)?
                }
                (LayerSpec::Flatten, Cache::Flatten { shape }) => grad.reshape(shape)?,
                (LayerSpec::Linear { .. }, Cache::Input(x)) => {
                    let wname = self.param_name(i, "weight");
                    let g = ops::linear_backward(x, store.get(&wname)?, &grad)?;
                    store.accumulate_grad(&wname, &g.weight)?;
                    store.accumulate_grad(&self.param_name(i, "bias"), &g.bias)?;
                    g.input
                }
                _ => return Err(Error::Invariant(format!("tape does not match layer {}", i + 1))),
            };
            if pos == 0 && !need_input_grad {
                return Ok(None);
            }
        }
        Ok(need_input_grad.then_some(grad))
    }
}

impl<T: Scalar> Tape<T> {
    /// Folds the batch statistics of a training-mode pass into the running
    /// mean/variance buffers.
    pub fn commit_running_stats(&self, net: &Sequential, store: &mut ParamStore<T>) -> Result<()> {
        for (i, upd) in &self.running {
            let mname = net.param_name(*i, "running_mean");
            let vname = net.param_name(*i, "running_var");
            let mut m = store.get(&mname)?.clone();
            let mut v = store.get(&vname)?.clone();
            upd.apply(&mut m, &mut v);
            *store.get_mut(&mname)? = m;
            *store.get_mut(&vname)? = v;
        }
        Ok(())
    }
}
