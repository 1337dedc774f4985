//! Two-level inference with rejection, evaluation harnesses and metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ManifestEntry, Technology};
use crate::error::{Error, Result};
use crate::heads::{FeatureBank, HeadModel, Level};
use crate::kernel::{ParamStore, Tensor};
use crate::rejection::{decide, Prediction, Tau, UNKNOWN};

/// Per-sample probability source for both levels.
///
/// `admr_probs` is only called for samples ADA accepted as Codec.
pub trait Scorer {
    fn ada_probs(&self, i: usize) -> Result<Vec<f64>>;
    fn admr_probs(&self, i: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub ada: Tau,
    pub admr: Tau,
}

/// Final attribution: technology (or "unknown") and, for Codec, the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub technology: String,
    pub model: Option<String>,
}

impl Attribution {
    /// `"unknown"`, `"ASV"`, `"Codec/F03"`, `"Codec/unknown"`.
    pub fn key(&self) -> String {
        match &self.model {
            Some(m) => format!("{}/{m}", self.technology),
            None => self.technology.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub ada: Prediction,
    pub admr: Option<Prediction>,
    pub attribution: Attribution,
}

impl PipelineResult {
    pub fn check(&self) -> Result<()> {
        let routed = self.ada.accepted && self.ada.label == Technology::Codec.as_str();
        let ok = routed == self.admr.is_some()
            && [Some(&self.ada), self.admr.as_ref()]
                .into_iter()
                .flatten()
                .all(|p| p.accepted || p.label == UNKNOWN);
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!("inconsistent pipeline result {self:?}")))
        }
    }
}

const CODEC: &str = "Codec";

/// Routes one sample through ADA and, when accepted as Codec, ADMR.
pub fn infer(scorer: &dyn Scorer, i: usize, th: Thresholds) -> Result<PipelineResult> {
    let ada = decide(&scorer.ada_probs(i)?, Level::Ada.vocab(), th.ada)?;
    let (admr, attribution) = if !ada.accepted {
        (None, Attribution {
            technology: UNKNOWN.into(),
            model: None,
        })
    } else if ada.label != CODEC {
        (None, Attribution {
            technology: ada.label.clone(),
            model: None,
        })
    } else {
        let p = decide(&scorer.admr_probs(i)?, Level::Admr.vocab(), th.admr)?;
        let model = Some(p.label.clone());
        (Some(p), Attribution {
            technology: CODEC.into(),
            model,
        })
    };
    Ok(PipelineResult { ada, admr, attribution })
}

pub fn infer_all(scorer: &dyn Scorer, n: usize, th: Thresholds) -> Result<Vec<PipelineResult>> {
    (0..n).map(|i| infer(scorer, i, th)).collect()
}

/// Encoder plus both heads.
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: ParamStore<f32>,
    pub ada: HeadModel,
    pub admr: Option<HeadModel>,
}

/// Probabilities computed up front for a bank of clips. ADMR is run only
/// on the rows ADA forwards under `th.ada`.
pub struct ScoredBatch {
    ada: Vec<Vec<f64>>,
    admr: Vec<Option<Vec<f64>>>,
}

impl ScoredBatch {
    pub fn score(models: &Models, bank: &dyn FeatureBank, ada_tau: Tau, batch: usize) -> Result<Self> {
        let (mut ada, mut admr) = (Vec::new(), Vec::new());
        let idx: Vec<usize> = (0..bank.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let prefix = bank.batch(chunk)?;
            let probs = models.ada.probs_from_prefix(&models.encoder, prefix.clone())?;
            let mut fwd = Vec::new();
            for (row, p) in probs.iter().enumerate() {
                let d = decide(p, Level::Ada.vocab(), ada_tau)?;
                if d.accepted && d.label == CODEC {
                    fwd.push(row);
                }
            }
            let mut rows: Vec<Option<Vec<f64>>> = vec![None; chunk.len()];
            if let (false, Some(head)) = (fwd.is_empty(), &models.admr) {
                let sub = select_rows(&prefix, &fwd)?;
                for (r, p) in fwd.iter().zip(head.probs_from_prefix(&models.encoder, sub)?) {
                    rows[*r] = Some(p);
                }
            }
            ada.extend(probs);
            admr.extend(rows);
        }
        Ok(Self { ada, admr })
    }

    pub fn len(&self) -> usize {
        self.ada.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ada.is_empty()
    }
}

impl Scorer for ScoredBatch {
    fn ada_probs(&self, i: usize) -> Result<Vec<f64>> {
        Ok(self.ada[i].clone())
    }

    fn admr_probs(&self, i: usize) -> Result<Vec<f64>> {
        self.admr[i]
            .clone()
            .ok_or_else(|| Error::Config("sample routed to ADMR but no ADMR model is loaded".into()))
    }
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let (_, c, l) = t.dims3()?;
    let data = rows.iter().flat_map(|&r| t.item(r).iter().copied()).collect();
    Tensor::from_vec(&[rows.len(), c, l], data)
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionMode {
    /// Raw argmax labels; thresholds ignored.
    Off,
    /// Rejected predictions count as wrong and form an "unknown" column.
    AsError,
}

impl std::str::FromStr for RejectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "as-error" => Ok(Self::AsError),
            _ => Err(Error::Argument(format!("unknown rejection mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when TP + FP == 0 and precision was reported as 0.
    pub precision_undefined: bool,
    /// Set when the class has no support and recall was reported as 0.
    pub recall_undefined: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rejection_mode: RejectionMode,
    pub total: u64,
    pub accuracy: f64,
    pub rejection_rate: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Average,
    pub weighted_avg: Average,
    /// Rows are true labels in vocabulary order.
    pub confusion_rows: Vec<String>,
    /// Vocabulary, plus "unknown" in as-error mode.
    pub confusion_columns: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(pairs: &[(&str, &Prediction)], vocab: &[&str], mode: RejectionMode) -> Result<Metrics> {
    let n = vocab.len();
    let cols = n + usize::from(mode == RejectionMode::AsError);
    let mut confusion = vec![vec![0u64; cols]; n];
    let mut rejected = 0u64;
    for (truth, pred) in pairs {
        let row = vocab
            .iter()
            .position(|v| v == truth)
            .ok_or_else(|| Error::Validation(format!("true label `{truth}` not in vocabulary")))?;
        if pred.raw_index >= n {
            return Err(Error::Validation(format!("predicted index {} outside vocabulary", pred.raw_index)));
        }
        rejected += u64::from(!pred.accepted);
        let col = match mode {
            RejectionMode::AsError if !pred.accepted => n,
            _ => pred.raw_index,
        };
        confusion[row][col] += 1;
    }
    let total = pairs.len() as u64;
    let correct: u64 = (0..n).map(|k| confusion[k][k]).sum();
    let mut per_class = Vec::with_capacity(n);
    for (k, label) in vocab.iter().enumerate() {
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
        let (precision, precision_undefined) = ratio(tp, predicted);
        let (recall, recall_undefined) = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            label: (*label).to_owned(),
            precision,
            recall,
            f1,
            support,
            precision_undefined,
            recall_undefined,
        });
    }
    let macro_avg = Average {
        precision: per_class.iter().map(|c| c.precision).sum::<f64>() / n as f64,
        recall: per_class.iter().map(|c| c.recall).sum::<f64>() / n as f64,
        f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64,
    };
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|c| f(c) * c.support as f64).sum::<f64>() / total as f64
        }
    };
    let weighted_avg = Average {
        precision: weighted(|c| c.precision),
        recall: weighted(|c| c.recall),
        f1: weighted(|c| c.f1),
    };
    let mut columns: Vec<String> = vocab.iter().map(|s| (*s).to_owned()).collect();
    let rows = columns.clone();
    if mode == RejectionMode::AsError {
        columns.push(UNKNOWN.into());
    }
    Ok(Metrics {
        rejection_mode: mode,
        total,
        accuracy: ratio(correct, total).0,
        rejection_rate: ratio(rejected, total).0,
        per_class,
        macro_avg,
        weighted_avg,
        confusion_rows: rows,
        confusion_columns: columns,
        confusion,
    })
}

// ------------------------------------------------------ error propagation

pub const ADA_ERROR_DEFINITION: &str = "a sample is an ADA error when it is real and ADA accepts any technology, \
or it is fake and ADA rejects it or accepts the wrong technology";
pub const ADMR_ERROR_DEFINITION: &str = "over samples ADA forwards as Codec: a Codec fake with a model label is an \
ADMR error unless ADMR accepts its model; any other forwarded sample is an ADMR error when ADMR accepts a model";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub total: u64,
    pub ada_errors: u64,
    pub forwarded: u64,
    pub admr_errors: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPropagationReport {
    pub ada_error_definition: String,
    pub admr_error_definition: String,
    pub total: u64,
    pub ada_errors: u64,
    pub ada_correct: u64,
    pub ada_error_rate: f64,
    pub forwarded: u64,
    pub admr_errors: u64,
    pub admr_misclassification_rate: f64,
    /// Keyed by true class: ASV, FoR, Codec/F01..F06, Codec (no model), real.
    pub per_class: BTreeMap<String, ClassBreakdown>,
    pub ada_confusion_rows: Vec<String>,
    pub ada_confusion_columns: Vec<String>,
    /// Rows by true class, columns ASV, FoR, Codec, unknown.
    pub ada_confusion: Vec<Vec<u64>>,
}

fn true_key(e: &ManifestEntry) -> String {
    match (e.technology, e.model) {
        (None, _) => "real".into(),
        (Some(t), Some(m)) => format!("{t}/{m}"),
        (Some(t), None) => t.to_string(),
    }
}

pub fn error_propagation_eval(
    entries: &[ManifestEntry],
    scorer: &dyn Scorer,
    th: Thresholds,
) -> Result<ErrorPropagationReport> {
    if entries.is_empty() {
        return Err(Error::Argument("error propagation needs a non-empty manifest".into()));
    }
    let rows = ["ASV", "FoR", "Codec", "real"];
    let mut confusion = vec![vec![0u64; 4]; 4];
    let mut per_class: BTreeMap<String, ClassBreakdown> = BTreeMap::new();
    let (mut ada_errors, mut forwarded, mut admr_errors) = (0u64, 0u64, 0u64);
    for (i, e) in entries.iter().enumerate() {
        let r = infer(scorer, i, th)?;
        r.check()?;
        let row = e.technology.map_or(3, Technology::index);
        let col = if r.ada.accepted { r.ada.raw_index } else { 3 };
        confusion[row][col] += 1;
        let ada_error = match e.technology {
            None => r.ada.accepted,
            Some(t) => !r.ada.accepted || r.ada.raw_index != t.index(),
        };
        let slot = per_class.entry(true_key(e)).or_default();
        slot.total += 1;
        slot.ada_errors += u64::from(ada_error);
        ada_errors += u64::from(ada_error);
        if let Some(admr) = &r.admr {
            forwarded += 1;
            slot.forwarded += 1;
            let err = match (e.technology, e.model) {
                (Some(Technology::Codec), Some(m)) => !admr.accepted || admr.raw_index != m.index(),
                _ => admr.accepted,
            };
            slot.admr_errors += u64::from(err);
            admr_errors += u64::from(err);
        }
    }
    let total = entries.len() as u64;
    Ok(ErrorPropagationReport {
        ada_error_definition: ADA_ERROR_DEFINITION.into(),
        admr_error_definition: ADMR_ERROR_DEFINITION.into(),
        total,
        ada_errors,
        ada_correct: total - ada_errors,
        ada_error_rate: ratio(ada_errors, total).0,
        forwarded,
        admr_errors,
        admr_misclassification_rate: ratio(admr_errors, forwarded).0,
        per_class,
        ada_confusion_rows: rows.iter().map(|s| (*s).to_owned()).collect(),
        ada_confusion_columns: ["ASV", "FoR", "Codec", UNKNOWN].iter().map(|s| (*s).to_owned()).collect(),
        ada_confusion: confusion,
    })
}

// --------------------------------------------------------- generalization

/// Accepted final attributions for the conformance fraction. Each pattern
/// is an attribution key (`"unknown"`, `"FoR"`, `"Codec/F02"`), `"Codec/*"`
/// for any Codec outcome, or `"*"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub allowed: Vec<String>,
}

impl Expectation {
    pub fn matches(&self, a: &Attribution) -> bool {
        let key = a.key();
        self.allowed.iter().any(|p| {
            p == "*" || *p == key || p.strip_suffix("/*").is_some_and(|t| t == a.technology && a.model.is_some())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub total: u64,
    pub ada_rejection_rate: f64,
    /// Fractions of all samples per ADA outcome (vocabulary and "unknown").
    pub ada_distribution: BTreeMap<String, f64>,
    pub forwarded: u64,
    /// Fractions of forwarded samples per ADMR outcome; empty when none were forwarded.
    pub admr_distribution: BTreeMap<String, f64>,
    pub admr_rejection_rate: f64,
    /// Fractions of all samples per final attribution.
    pub attribution_distribution: BTreeMap<String, f64>,
    pub expectation: Option<Expectation>,
    pub conformance: Option<f64>,
}

pub fn generalization_eval(
    n: usize,
    scorer: &dyn Scorer,
    th: Thresholds,
    expectation: Option<&Expectation>,
) -> Result<GeneralizationReport> {
    if n == 0 {
        return Err(Error::Argument("generalization needs a non-empty manifest".into()));
    }
    let mut ada: BTreeMap<String, u64> = Level::Ada
        .vocab()
        .iter()
        .chain([&UNKNOWN])
        .map(|s| ((*s).to_owned(), 0))
        .collect();
    let mut admr: BTreeMap<String, u64> = BTreeMap::new();
    let mut finals: BTreeMap<String, u64> = BTreeMap::new();
    let (mut forwarded, mut conforming) = (0u64, 0u64);
    for i in 0..n {
        let r = infer(scorer, i, th)?;
        r.check()?;
        *ada.get_mut(&r.ada.label).expect("vocabulary label") += 1;
        if let Some(p) = &r.admr {
            if forwarded == 0 {
                admr = Level::Admr
                    .vocab()
                    .iter()
                    .chain([&UNKNOWN])
                    .map(|s| ((*s).to_owned(), 0))
                    .collect();
            }
            forwarded += 1;
            *admr.get_mut(&p.label).expect("vocabulary label") += 1;
        }
        *finals.entry(r.attribution.key()).or_default() += 1;
        conforming += u64::from(expectation.is_some_and(|x| x.matches(&r.attribution)));
    }
    let total = n as u64;
    let frac = |m: &BTreeMap<String, u64>, d: u64| m.iter().map(|(k, &v)| (k.clone(), ratio(v, d).0)).collect();
    Ok(GeneralizationReport {
        total,
        ada_rejection_rate: ratio(ada[UNKNOWN], total).0,
        ada_distribution: frac(&ada, total),
        forwarded,
        admr_rejection_rate: ratio(admr.get(UNKNOWN).copied().unwrap_or(0), forwarded).0,
        admr_distribution: frac(&admr, forwarded),
        attribution_distribution: frac(&finals, total),
        expectation: expectation.cloned(),
        conformance: expectation.map(|_| ratio(conforming, total).0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodecModel, Split};
    use proptest::prelude::*;
    use std::cell::Cell;

    /// Stub returning fixed probability vectors and counting ADMR calls.
    struct Stub {
        ada: Vec<Vec<f64>>,
        admr: Vec<Vec<f64>>,
        admr_calls: Cell<usize>,
    }

    impl Scorer for Stub {
        fn ada_probs(&self, i: usize) -> Result<Vec<f64>> {
            Ok(self.ada[i].clone())
        }
        fn admr_probs(&self, i: usize) -> Result<Vec<f64>> {
            self.admr_calls.set(self.admr_calls.get() + 1);
            self.admr
                .get(i)
                .cloned()
                .ok_or_else(|| Error::Config("no ADMR model".into()))
        }
    }

    fn peaked(n: usize, k: usize, conf: f64) -> Vec<f64> {
        let rest = (1.0 - conf) / (n - 1) as f64;
        (0..n).map(|j| if j == k { conf } else { rest }).collect()
    }

    fn stub(ada: Vec<Vec<f64>>, admr: Vec<Vec<f64>>) -> Stub {
        Stub {
            ada,
            admr,
            admr_calls: Cell::new(0),
        }
    }

    const TH: Thresholds = Thresholds {
        ada: Tau::Finite(0.6),
        admr: Tau::Finite(0.6),
    };

    fn pred(idx: usize, accepted: bool) -> Prediction {
        Prediction {
            label: if accepted { ["A", "B"][idx].into() } else { UNKNOWN.into() },
            confidence: 0.9,
            raw_label: ["A", "B"][idx].into(),
            raw_index: idx,
            accepted,
        }
    }

    #[test]
    fn routing_examples() {
        let s = stub(vec![peaked(3, 1, 0.9)], vec![]);
        let r = infer(&s, 0, TH).unwrap();
        assert_eq!(r.attribution.key(), "FoR");
        assert_eq!(s.admr_calls.get(), 0);
        let s = stub(vec![peaked(3, 2, 0.5)], vec![]);
        assert_eq!(infer(&s, 0, TH).unwrap().attribution.key(), "unknown");
        assert_eq!(s.admr_calls.get(), 0);
        let s = stub(vec![peaked(3, 2, 0.9)], vec![peaked(6, 4, 0.3)]);
        let r = infer(&s, 0, TH).unwrap();
        assert_eq!(r.attribution.key(), "Codec/unknown");
        assert_eq!(r.admr.unwrap().raw_label, "F05");
        let s = stub(vec![peaked(3, 2, 0.9)], vec![]);
        assert!(matches!(infer(&s, 0, TH), Err(Error::Config(_))));
    }

    #[test]
    fn routing_is_sound_for_every_stub_combination() {
        for a in 0..3 {
            for a_ok in [true, false] {
                for m in 0..6 {
                    for m_ok in [true, false] {
                        let s = stub(
                            vec![peaked(3, a, if a_ok { 0.9 } else { 0.5 })],
                            vec![peaked(6, m, if m_ok { 0.9 } else { 0.3 })],
                        );
                        let r = infer(&s, 0, TH).unwrap();
                        r.check().unwrap();
                        assert_eq!(r.admr.is_some(), a_ok && a == 2);
                        assert_eq!(s.admr_calls.get(), usize::from(a_ok && a == 2));
                    }
                }
            }
        }
    }

    #[test]
    fn two_class_metrics_example() {
        let preds = [pred(0, true), pred(1, true), pred(1, true), pred(1, true)];
        let pairs: Vec<(&str, &Prediction)> = ["A", "A", "B", "B"].into_iter().zip(preds.iter()).collect();
        let m = compute_metrics(&pairs, &["A", "B"], RejectionMode::Off).unwrap();
        let (a, b) = (&m.per_class[0], &m.per_class[1]);
        assert_eq!((a.precision, a.recall), (1.0, 0.5));
        assert!((a.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((b.precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(b.recall, 1.0);
        assert!((b.f1 - 0.8).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.macro_avg.f1 - 11.0 / 15.0).abs() < 1e-15);
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn as_error_mode_adds_unknown_column() {
        let preds = [pred(0, false), pred(1, true)];
        let pairs: Vec<(&str, &Prediction)> = ["A", "B"].into_iter().zip(preds.iter()).collect();
        let off = compute_metrics(&pairs, &["A", "B"], RejectionMode::Off).unwrap();
        let on = compute_metrics(&pairs, &["A", "B"], RejectionMode::AsError).unwrap();
        assert_eq!(off.accuracy, 1.0);
        assert_eq!(on.accuracy, 0.5);
        assert_eq!(on.confusion, vec![vec![0, 0, 1], vec![0, 1, 0]]);
        assert_eq!(on.per_class[0].precision, 0.0);
        assert!(on.per_class[0].precision_undefined);
        assert_eq!(on.rejection_rate, 0.5);
        assert!(matches!(
            compute_metrics(&[("C", &preds[0])], &["A", "B"], RejectionMode::Off),
            Err(Error::Validation(_))
        ));
    }

    fn fake(t: Technology, m: Option<CodecModel>) -> ManifestEntry {
        ManifestEntry::fake(format!("{t}.wav"), t, m, Split::Test)
    }

    #[test]
    fn perfect_stubs_have_zero_error() {
        let entries = vec![
            fake(Technology::Asv, None),
            fake(Technology::Codec, Some(CodecModel::F03)),
            fake(Technology::FoR, None),
        ];
        let s = stub(
            vec![peaked(3, 0, 1.0), peaked(3, 2, 1.0), peaked(3, 1, 1.0)],
            vec![vec![], peaked(6, 2, 1.0), vec![]],
        );
        let r = error_propagation_eval(&entries, &s, TH).unwrap();
        assert_eq!((r.ada_error_rate, r.admr_misclassification_rate, r.forwarded), (0.0, 0.0, 1));
    }

    #[test]
    fn always_codec_on_for_fakes() {
        let entries = vec![fake(Technology::FoR, None); 10];
        let s = stub(vec![peaked(3, 2, 1.0); 10], vec![peaked(6, 0, 1.0); 10]);
        let r = error_propagation_eval(&entries, &s, TH).unwrap();
        assert_eq!((r.ada_error_rate, r.forwarded, r.admr_errors), (1.0, 10, 10));
        assert_eq!(r.ada_confusion[1][2], 10);
    }

    #[test]
    fn generalization_examples() {
        let s = stub(vec![peaked(3, 0, 0.4); 4], vec![]);
        let r = generalization_eval(4, &s, TH, None).unwrap();
        assert_eq!(r.ada_rejection_rate, 1.0);
        let s = stub(vec![peaked(3, 0, 0.9); 4], vec![]);
        let x = Expectation {
            allowed: vec!["unknown".into(), "ASV".into()],
        };
        let r = generalization_eval(4, &s, TH, Some(&x)).unwrap();
        assert_eq!(r.ada_distribution["ASV"], 1.0);
        assert_eq!(r.conformance, Some(1.0));
        assert!(r.admr_distribution.is_empty());
        assert!(matches!(generalization_eval(0, &s, TH, None), Err(Error::Argument(_))));
    }

    #[test]
    fn expectation_patterns() {
        let x = Expectation {
            allowed: vec!["Codec/*".into()],
        };
        let codec = |m: Option<&str>| Attribution {
            technology: "Codec".into(),
            model: m.map(Into::into),
        };
        assert!(x.matches(&codec(Some("F02"))));
        assert!(x.matches(&codec(Some(UNKNOWN))));
        assert!(!x.matches(&Attribution {
            technology: "ASV".into(),
            model: None
        }));
    }

    fn arb_probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn metrics_identities(truth in prop::collection::vec(0usize..4, 1..80), guess in prop::collection::vec(0usize..4, 80), acc in prop::collection::vec(any::<bool>(), 80)) {
            let vocab = ["a", "b", "c", "d"];
            let preds: Vec<Prediction> = truth.iter().enumerate().map(|(i, _)| Prediction {
                label: if acc[i] { vocab[guess[i]].into() } else { UNKNOWN.into() },
                confidence: 0.5,
                raw_label: vocab[guess[i]].into(),
                raw_index: guess[i],
                accepted: acc[i],
            }).collect();
            let pairs: Vec<(&str, &Prediction)> = truth.iter().map(|&t| vocab[t]).zip(preds.iter()).collect();
            for mode in [RejectionMode::Off, RejectionMode::AsError] {
                let m = compute_metrics(&pairs, &vocab, mode).unwrap();
                let trace: u64 = (0..4).map(|k| m.confusion[k][k]).sum();
                prop_assert_eq!(m.accuracy, trace as f64 / m.total as f64);
                prop_assert!((m.weighted_avg.recall - m.accuracy).abs() < 1e-12);
                for c in &m.per_class {
                    for v in [c.precision, c.recall, c.f1] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
                let mut shuffled = pairs.clone();
                shuffled.reverse();
                prop_assert_eq!(compute_metrics(&shuffled, &vocab, mode).unwrap().confusion, m.confusion);
            }
        }

        #[test]
        fn propagation_accounting(ada in prop::collection::vec(arb_probs(3), 1..40), admr in prop::collection::vec(arb_probs(6), 40), labels in prop::collection::vec(0usize..9, 40)) {
            let n = ada.len();
            let entries: Vec<ManifestEntry> = labels[..n].iter().map(|&l| match l {
                0 => fake(Technology::Asv, None),
                1 => fake(Technology::FoR, None),
                2 => ManifestEntry::real("r.wav", Split::Test),
                k => fake(Technology::Codec, Some(CodecModel::ALL[k - 3])),
            }).collect();
            let s = stub(ada, admr);
            let r = error_propagation_eval(&entries, &s, TH).unwrap();
            prop_assert_eq!(r.ada_errors + r.ada_correct, r.total);
            let codec_col: u64 = r.ada_confusion.iter().map(|row| row[2]).sum();
            prop_assert_eq!(codec_col, r.forwarded);
            let g = generalization_eval(n, &s, TH, None).unwrap();
            prop_assert!((g.ada_distribution.values().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((g.attribution_distribution.values().sum::<f64>() - 1.0).abs() < 1e-9);
            if g.forwarded > 0 {
                prop_assert!((g.admr_distribution.values().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
