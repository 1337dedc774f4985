//! Pieces shared by the autoencoder and head training loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{AdamConfig, Scalar, Tensor};

/// Optimizer and schedule settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Reshuffle training order every epoch.
    pub shuffle: bool,
    /// Head training only: each batch sees a random window of this many
    /// feature frames. 0 trains on the full time axis.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch: 16,
            lr: 1e-4,
            weight_decay: 1e-5,
            patience: 5,
            seed: 0,
            shuffle: true,
            window: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs, batch and patience must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Sample order for `epoch` (1-based), seeded by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Stacks equal-length clips into a `[B, 1, L]` tensor.
pub fn clip_batch<T: Scalar>(clips: &[&[f32]]) -> Result<Tensor<T>> {
    let len = clips.first().map_or(0, |c| c.len());
    if clips.iter().any(|c| c.len() != len) {
        return Err(Error::shape("clips in a batch must share one length"));
    }
    let data = clips
        .iter()
        .flat_map(|c| c.iter().map(|&v| T::lit(v as f64)))
        .collect();
    Tensor::from_vec(&[clips.len(), 1, len], data)
}

/// Outcome of [`EarlyStopping::observe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Tracks the best validation loss. An epoch improves only when its loss
/// is strictly lower than every earlier one; training stops once more
/// than `patience` consecutive epochs fail to improve.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => val_loss < b,
        };
        if improved {
            self.best = Some((epoch, val_loss));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale > self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patience_trace() {
        let vals = [0.5, 0.4, 0.45, 0.44, 0.46, 0.47, 0.3];
        let mut es = EarlyStopping::new(3);
        let mut stopped = None;
        for (i, &v) in vals.iter().enumerate() {
            if es.observe(i + 1, v).stop {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(6));
        assert_eq!(es.best_epoch(), Some(2));
    }

    #[test]
    fn ties_do_not_improve() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 1.0).improved);
        assert!(!es.observe(2, 1.0).improved);
        assert!(es.observe(3, 1.0).stop);
        assert_eq!(es.best_epoch(), Some(1));
    }

    proptest! {
        #[test]
        fn best_epoch_has_minimal_loss(vals in prop::collection::vec(0.0f64..1.0, 1..40), patience in 1usize..6) {
            let mut es = EarlyStopping::new(patience);
            let mut seen = Vec::new();
            for (i, &v) in vals.iter().enumerate() {
                seen.push(v);
                if es.observe(i + 1, v).stop {
                    break;
                }
            }
            let min = seen.iter().cloned().fold(f64::INFINITY, f64::min);
            let best = es.best_epoch().unwrap();
            prop_assert_eq!(seen[best - 1], min);
            prop_assert!(seen[..best - 1].iter().all(|&v| v > min));
        }
    }

    #[test]
    fn shuffle_is_seeded_per_epoch() {
        let a = epoch_order(7, 1, 50, true);
        assert_eq!(a, epoch_order(7, 1, 50, true));
        assert_ne!(a, epoch_order(7, 2, 50, true));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(epoch_order(7, 1, 5, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_rejects_zero_batch() {
        let cfg = TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
