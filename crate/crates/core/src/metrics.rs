//! Confusion-matrix metrics and ROC-AUC, reported per (machine, SNR).
//!
//! The positive class is `abnormal` (fault detection convention). Kappa is
//! standard binary Cohen's kappa, 2(TP*TN - FN*FP) / ((TP+FP)(FP+TN) +
//! (TP+FN)(FN+TN)). Metrics whose denominator vanishes come back as an
//! explicit `None`, never a silent zero.

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Machine};
use crate::error::{Error, Result};
use crate::model::{LabeledSet, Model};

/// Binary confusion counts: tpc/tnc/fpc/fnc = true/false positives and
/// negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tpc: u64,
    pub tnc: u64,
    pub fpc: u64,
    pub fnc: u64,
}

impl ConfusionMatrix {
    pub fn new(tpc: u64, tnc: u64, fpc: u64, fnc: u64) -> ConfusionMatrix {
        ConfusionMatrix { tpc, tnc, fpc, fnc }
    }

    pub fn total(&self) -> u64 {
        self.tpc + self.tnc + self.fpc + self.fnc
    }
}

/// Count predictions against truth. Positive class is abnormal.
pub fn confusion(predictions: &[Label], truths: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("cannot build a confusion matrix from nothing".into()));
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&p, &t) in predictions.iter().zip(truths) {
        match (p.is_abnormal(), t.is_abnormal()) {
            (true, true) => cm.tpc += 1,
            (false, false) => cm.tnc += 1,
            (true, false) => cm.fpc += 1,
            (false, true) => cm.fnc += 1,
        }
    }
    Ok(cm)
}

/// The six confusion-matrix metrics; `None` marks an undefined value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub kappa: Option<f64>,
    pub mcc: Option<f64>,
}

pub fn metric_suite(cm: &ConfusionMatrix) -> MetricSuite {
    let (tp, tn, fp, fnn) = (
        cm.tpc as f64,
        cm.tnc as f64,
        cm.fpc as f64,
        cm.fnc as f64,
    );
    let total = tp + tn + fp + fnn;
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };

    let accuracy = ratio(tp + tn, total);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    let kappa = ratio(
        2.0 * (tp * tn - fnn * fp),
        (tp + fp) * (fp + tn) + (tp + fnn) * (fnn + tn),
    );
    let mcc_den = ((tp + fnn) * (tp + fp) * (tn + fp) * (tn + fnn)).sqrt();
    let mcc = ratio(tp * tn - fp * fnn, mcc_den);

    MetricSuite {
        accuracy,
        precision,
        recall,
        f1,
        kappa,
        mcc,
    }
}

/// Mann-Whitney AUC: the fraction of (positive, negative) pairs where the
/// positive outscores the negative, ties counted one half. Computed by
/// rank sums with tie-averaged ranks, which equals the trapezoidal ROC
/// area. `None` when only one class is present.
pub fn roc_auc(scores: &[f64], truths: &[Label]) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        return Err(Error::Data(format!(
            "{} scores vs {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Data("cannot compute AUC of nothing".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    let pos = truths.iter().filter(|t| t.is_abnormal()).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average rank for the tie group [i, j], 1-based ranks
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if truths[idx].is_abnormal() {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok(Some(
        (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64),
    ))
}

/// One table row: the metric suite plus AUC for a (machine, SNR) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub machine: Machine,
    pub snr_db: i32,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub kappa: Option<f64>,
    pub mcc: Option<f64>,
    pub auc: Option<f64>,
}

/// CSV header matching the report table column order.
pub const REPORT_CSV_HEADER: &str = "SNR,Machine,Accuracy,Precision,Recall,F1 Score,Kappa,MCC,AUC";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.5}"),
        None => "NA".into(),
    }
}

impl MetricsReport {
    pub fn has_undefined(&self) -> bool {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.kappa,
            self.mcc,
            self.auc,
        ]
        .iter()
        .any(|v| v.is_none())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{} dB,{},{},{},{},{},{},{},{}",
            self.snr_db,
            self.machine.display_name(),
            cell(self.accuracy),
            cell(self.precision),
            cell(self.recall),
            cell(self.f1),
            cell(self.kappa),
            cell(self.mcc),
            cell(self.auc),
        )
    }
}

/// Threshold the model at 0.5 for the confusion-matrix metrics and use raw
/// probabilities for AUC. Undefined metrics surface as `None` fields, not
/// errors.
pub fn evaluate(
    model: &Model,
    set: &LabeledSet,
    machine: Machine,
    snr_db: i32,
) -> Result<(MetricsReport, ConfusionMatrix)> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let probs = model.predict_batch(&set.images)?;
    let preds: Vec<Label> = probs
        .iter()
        .map(|&p| if p >= 0.5 { Label::Abnormal } else { Label::Normal })
        .collect();
    let cm = confusion(&preds, &set.labels)?;
    let suite = metric_suite(&cm);
    let auc = roc_auc(&probs, &set.labels)?;
    Ok((
        MetricsReport {
            machine,
            snr_db,
            accuracy: suite.accuracy,
            precision: suite.precision,
            recall: suite.recall,
            f1: suite.f1,
            kappa: suite.kappa,
            mcc: suite.mcc,
            auc,
        },
        cm,
    ))
}
