//! Confidence-threshold calibration and the accept/reject decision.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::heads::{FeatureBank, HeadModel, Level};
use crate::kernel::ParamStore;
use crate::kernel::argmax;

/// Label given to rejected predictions.
pub const UNKNOWN: &str = "unknown";

/// Confidence of one prediction and whether it was right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
}

/// Cutoff on the winning softmax probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    Finite(f64),
    /// No cutoff met the accuracy target; every prediction is rejected.
    RejectAll,
}

impl Tau {
    pub fn accepts(self, confidence: f64) -> bool {
        match self {
            Tau::Finite(t) => confidence >= t,
            Tau::RejectAll => false,
        }
    }
}

const REJECT_ALL: &str = "reject-all";

impl fmt::Display for Tau {
    /// Shortest decimal that round-trips the value.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Finite(t) => write!(f, "{t}"),
            Tau::RejectAll => f.write_str(REJECT_ALL),
        }
    }
}

impl std::str::FromStr for Tau {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == REJECT_ALL {
            return Ok(Tau::RejectAll);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Validation(format!("threshold `{s}` is not a decimal number")))?;
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::Validation(format!("threshold {v} outside (0, 1]")));
        }
        Ok(Tau::Finite(v))
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub records: usize,
    pub accepted_fraction: f64,
    pub accepted_accuracy: f64,
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionThreshold {
    pub level: Level,
    pub tau: Tau,
    pub target_acc: f64,
    pub summary: CalibrationSummary,
}

impl RejectionThreshold {
    /// Accepts everything; used when rejection is disabled.
    pub fn accept_all(level: Level) -> Self {
        Self {
            level,
            tau: Tau::Finite(f64::MIN_POSITIVE),
            target_acc: 0.0,
            summary: CalibrationSummary {
                records: 0,
                accepted_fraction: 1.0,
                accepted_accuracy: 0.0,
                failed: false,
            },
        }
    }
}

fn meets(correct: usize, count: usize, target: f64) -> bool {
    count > 0 && correct as f64 / count as f64 >= target
}

/// Smallest distinct confidence `tau` whose accepted set
/// `{r : r.confidence >= tau}` has accuracy `>= target_acc`, or the
/// reject-all sentinel when none qualifies.
pub fn calibrate_threshold(records: &[CalibrationRecord], target_acc: f64, level: Level) -> Result<RejectionThreshold> {
    if records.is_empty() {
        return Err(Error::Argument("calibration needs at least one record".into()));
    }
    if !(target_acc > 0.0 && target_acc <= 1.0) {
        return Err(Error::Argument(format!("target accuracy {target_acc} outside (0, 1]")));
    }
    if let Some(r) = records.iter().find(|r| !(r.confidence > 0.0 && r.confidence <= 1.0)) {
        return Err(Error::Argument(format!("confidence {} outside (0, 1]", r.confidence)));
    }
    let mut sorted: Vec<CalibrationRecord> = records.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut correct, mut count) = (0usize, 0usize);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == c {
            correct += usize::from(sorted[i].correct);
            count += 1;
            i += 1;
        }
        if meets(correct, count, target_acc) {
            best = Some((c, correct, count));
        }
    }
    let n = records.len();
    Ok(match best {
        Some((tau, correct, count)) => RejectionThreshold {
            level,
            tau: Tau::Finite(tau),
            target_acc,
            summary: CalibrationSummary {
                records: n,
                accepted_fraction: count as f64 / n as f64,
                accepted_accuracy: correct as f64 / count as f64,
                failed: false,
            },
        },
        None => RejectionThreshold {
            level,
            tau: Tau::RejectAll,
            target_acc,
            summary: CalibrationSummary {
                records: n,
                accepted_fraction: 0.0,
                accepted_accuracy: 0.0,
                failed: true,
            },
        },
    })
}

/// One record per sample of a labeled split: the head's top softmax
/// probability and whether its argmax equals the label.
pub fn collect_confidences(
    model: &HeadModel,
    encoder: &ParamStore<f32>,
    bank: &dyn FeatureBank,
    labels: &[usize],
    batch: usize,
) -> Result<Vec<CalibrationRecord>> {
    if bank.is_empty() {
        return Err(Error::Argument("cannot collect confidences from an empty split".into()));
    }
    if bank.len() != labels.len() {
        return Err(Error::Invariant("feature and label counts differ".into()));
    }
    let idx: Vec<usize> = (0..bank.len()).collect();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch.max(1)) {
        for (p, &i) in model.probs_from_prefix(encoder, bank.batch(chunk)?)?.iter().zip(chunk) {
            let k = argmax(p);
            out.push(CalibrationRecord {
                confidence: p[k],
                correct: k == labels[i],
            });
        }
    }
    Ok(out)
}

/// Per-level decision on one probability vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Vocabulary term, or [`UNKNOWN`] when rejected.
    pub label: String,
    pub confidence: f64,
    pub raw_label: String,
    pub raw_index: usize,
    pub accepted: bool,
}

pub fn decide(probs: &[f64], vocab: &[&str], tau: Tau) -> Result<Prediction> {
    if probs.len() != vocab.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "{} probabilities for a vocabulary of {}",
            probs.len(),
            vocab.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Argument(format!("probabilities sum to {total}, expected 1")));
    }
    let raw_index = argmax(probs);
    let confidence = probs[raw_index];
    let accepted = tau.accepts(confidence);
    let raw_label = vocab[raw_index].to_owned();
    Ok(Prediction {
        label: if accepted { raw_label.clone() } else { UNKNOWN.to_owned() },
        confidence,
        raw_label,
        raw_index,
        accepted,
    })
}
