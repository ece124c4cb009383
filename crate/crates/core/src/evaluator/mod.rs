//! Confusion counts, the four detection metrics, report rendering, model
//! evaluation over long windows, and the single-flow baseline.

mod baseline;

use std::fmt::{self, Write as _};
use std::ops::{Add, AddAssign};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::discretizer::{DiscretizedFlow, Vocabulary};
use crate::error::{Error, Result};
use crate::flowset::TokenizedDataset;
use crate::ingest::{balance_dataset, BinaryLabel, FlowDataset};
use crate::model::{classifier_head_forward, forward, predict_label, ModelParams};
use crate::sequence::{chunk_sequences, TokenBatch};

pub use baseline::{BaselineOptions, ContextFreeBaseline};

/// Malicious is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, predicted: BinaryLabel, actual: BinaryLabel) {
        use BinaryLabel::*;
        match (predicted, actual) {
            (Malicious, Malicious) => self.tp += 1,
            (Benign, Benign) => self.tn += 1,
            (Malicious, Benign) => self.fp += 1,
            (Benign, Malicious) => self.fn_ += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.tp += rhs.tp;
        self.tn += rhs.tn;
        self.fp += rhs.fp;
        self.fn_ += rhs.fn_;
    }
}

pub fn confusion_from_predictions(predictions: &[BinaryLabel], labels: &[BinaryLabel]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        c.record(p, l);
    }
    Ok(c)
}

/// A metric or the reason it has no value. Serializes as a number or as
/// `{"undefined": reason}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Defined(f64),
    Undefined { undefined: String },
}

impl MetricValue {
    fn undefined(reason: &str) -> Self {
        MetricValue::Undefined {
            undefined: reason.to_string(),
        }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            MetricValue::Defined(v) => Some(*v),
            MetricValue::Undefined { .. } => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        self.value().is_some()
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Defined(v) => write!(f, "{v:.4}"),
            MetricValue::Undefined { .. } => f.write_str("undef"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
    pub f1: MetricValue,
}

fn ratio(num: u64, den: u64, reason: &str) -> MetricValue {
    if den == 0 {
        MetricValue::undefined(reason)
    } else {
        MetricValue::Defined(num as f64 / den as f64)
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::Precondition("no flows were evaluated".into()));
    }
    let accuracy = ratio(c.tp + c.tn, c.total(), "no flows");
    let precision = ratio(c.tp, c.tp + c.fp, "TP+FP = 0");
    let recall = ratio(c.tp, c.tp + c.fn_, "TP+FN = 0");
    let f1 = match (precision.value(), recall.value()) {
        (Some(p), Some(r)) if p + r > 0.0 => MetricValue::Defined(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => MetricValue::undefined("precision + recall = 0"),
        _ => MetricValue::undefined("precision or recall undefined"),
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub dataset: String,
    pub dataset_digest: String,
    pub checkpoint: String,
    pub flows: u64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

impl MetricsReport {
    pub fn new(model: &str, dataset: &str, dataset_digest: &str, checkpoint: &str, counts: ConfusionCounts) -> Result<Self> {
        Ok(MetricsReport {
            model: model.to_string(),
            dataset: dataset.to_string(),
            dataset_digest: dataset_digest.to_string(),
            checkpoint: checkpoint.to_string(),
            flows: counts.total(),
            metrics: compute_metrics(&counts)?,
            counts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Corruption(format!("metrics report: {e}")))
    }
}

/// Plain-text table with the columns Accuracy, F1-score, Recall, Precision.
pub fn render_table(title: &str, rows: &[(&str, &Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Classifier".len());
    let mut out = String::new();
    writeln!(out, "{title}").unwrap();
    writeln!(
        out,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
        "Classifier", "Accuracy", "F1-score", "Recall", "Precision"
    )
    .unwrap();
    for (name, m) in rows {
        writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            name,
            m.accuracy.to_string(),
            m.f1.to_string(),
            m.recall.to_string(),
            m.precision.to_string()
        )
        .unwrap();
    }
    out
}

pub const DEFAULT_TEST_SEQ_LEN: usize = 1024;

/// Per-flow output of a model over a dataset, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPredictions {
    pub labels: Vec<BinaryLabel>,
    /// Probability of the malicious class.
    pub malicious_probability: Vec<f32>,
}

impl FlowPredictions {
    pub fn counts_against(&self, truth: &[BinaryLabel]) -> Result<ConfusionCounts> {
        confusion_from_predictions(&self.labels, truth)
    }

    /// Confusion counts restricted to positions where `keep` holds.
    pub fn subset_counts(&self, truth: &[BinaryLabel], keep: &[bool]) -> Result<ConfusionCounts> {
        if keep.len() != truth.len() || truth.len() != self.labels.len() {
            return Err(Error::Precondition("subset mask length mismatch".into()));
        }
        let mut c = ConfusionCounts::default();
        for ((&p, &t), _) in self.labels.iter().zip(truth).zip(keep).filter(|(_, &k)| k) {
            c.record(p, t);
        }
        Ok(c)
    }
}

/// Runs the sequence model over windows of `seq_len` flows. PAD positions of
/// the final window are dropped, so one prediction is returned per flow.
pub fn predict_flows(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    flows: &[DiscretizedFlow],
    seq_len: usize,
) -> Result<FlowPredictions> {
    let seqs = chunk_sequences(flows, None, seq_len, vocab)?;
    // bounded working set; grouping is fixed by seq_len so results are reproducible
    let group = (8192 / seq_len).max(1);
    let mut out = FlowPredictions {
        labels: Vec::with_capacity(flows.len()),
        malicious_probability: Vec::with_capacity(flows.len()),
    };
    for chunk in seqs.chunks(group) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = TokenBatch::from_sequences(&refs)?;
        let act = forward(params, &batch)?;
        let head = classifier_head_forward(params, act.hidden());
        for (row, &real) in head.probabilities.axis_iter(Axis(0)).zip(&batch.attention) {
            if real {
                out.labels.push(predict_label(row));
                out.malicious_probability.push(row[BinaryLabel::Malicious.index()]);
            }
        }
    }
    debug_assert_eq!(out.labels.len(), flows.len());
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: FlowPredictions,
    pub report: MetricsReport,
}

/// Chunks the dataset at `seq_len`, predicts every flow, and reports metrics
/// over all real flows.
pub fn evaluate_dataset(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    data: &TokenizedDataset,
    seq_len: usize,
    checkpoint_id: &str,
) -> Result<Evaluation> {
    data.check_vocabulary(vocab)?;
    let predictions = predict_flows(params, vocab, &data.flows, seq_len)?;
    let counts = predictions.counts_against(&data.labels)?;
    let report = MetricsReport::new(
        &format!("sequence model (test window {seq_len})"),
        &data.source,
        &data.digest(),
        checkpoint_id,
        counts,
    )?;
    Ok(Evaluation { predictions, report })
}

/// The two training regimes compared in the cross-domain experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingRegime {
    /// Every flow of the source environment.
    Full,
    /// Benign flows subsampled to the malicious count.
    Balanced,
}

impl TrainingRegime {
    pub fn training_set(self, data: &FlowDataset, seed: u64) -> Result<FlowDataset> {
        match self {
            TrainingRegime::Full => Ok(data.clone()),
            TrainingRegime::Balanced => balance_dataset(data, seed),
        }
    }
}
