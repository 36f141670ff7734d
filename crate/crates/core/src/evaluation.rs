//! Test-set metrics, ROC curves, the last-three-epochs summary and feature
//! export.
//!
//! Rates are percentages in `[0, 100]`; AUC values are fractions.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::NoisyDataset;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Binary tasks: AUC of class 1. Multiclass: mean of the defined
    /// one-vs-rest values.
    pub auc: Option<f64>,
    pub auc_one_vs_rest: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n_test: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold reached at each point after the first.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

pub fn confusion_matrix(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::validation("labels", format!("({t}, {p}) outside [0, {num_classes})")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Empirical ROC of `scores` against `positive`. Samples with equal scores
/// enter the curve together, so ties produce diagonal segments.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("scores", "NaN score"));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("labels", "ROC needs both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (x0, y0) = *points.last().expect("non-empty");
        let (x1, y1) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (x1 - x0) * (y0 + y1) / 2.0;
        points.push((x1, y1));
        thresholds.push(threshold);
    }
    Ok(RocCurve { points, thresholds, auc })
}

pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    roc_curve(scores, positive).map(|c| c.auc)
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Scores one set of predictions. `probabilities`, when given, is `[n, C]`
/// and feeds the AUC fields.
pub fn classification_report(
    predicted: &[usize],
    truth: &[usize],
    probabilities: Option<&Array2<f64>>,
    num_classes: usize,
) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::validation("test set", "empty"));
    }
    if num_classes < 2 {
        return Err(Error::validation("num_classes", "need at least 2"));
    }
    let confusion = confusion_matrix(predicted, truth, num_classes)?;
    let n = truth.len();
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let support: usize = confusion[c].iter().sum();
        if support == 0 {
            warnings.push(format!("class {c} absent from the test set; its metrics are undefined"));
            per_class.push(ClassMetrics { precision: None, recall: None, f1: None, support });
            continue;
        }
        let tp = confusion[c][c];
        let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = if predicted_c == 0 { 0.0 } else { percent(tp, predicted_c) };
        let recall = percent(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        per_class.push(ClassMetrics { precision: Some(precision), recall: Some(recall), f1: Some(f1), support });
    }
    let defined: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.f1.is_some()).collect();
    let macro_of = |f: fn(&ClassMetrics) -> Option<f64>| {
        defined.iter().filter_map(|m| f(m)).sum::<f64>() / defined.len() as f64
    };

    let mut auc_one_vs_rest = vec![None; num_classes];
    let mut auc = None;
    if let Some(p) = probabilities {
        if p.dim() != (n, num_classes) {
            return Err(Error::Shape(format!("probabilities {:?}, expected ({n}, {num_classes})", p.dim())));
        }
        for (c, slot) in auc_one_vs_rest.iter_mut().enumerate() {
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            if positive.iter().all(|&b| b) || !positive.iter().any(|&b| b) {
                continue;
            }
            *slot = Some(roc_auc(&p.column(c).to_vec(), &positive)?);
        }
        auc = if num_classes == 2 {
            auc_one_vs_rest[1]
        } else {
            let v: Vec<f64> = auc_one_vs_rest.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
    }

    let trace: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(MetricsReport {
        accuracy: percent(trace, n),
        macro_precision: macro_of(|m| m.precision),
        macro_recall: macro_of(|m| m.recall),
        macro_f1: macro_of(|m| m.f1),
        per_class,
        auc,
        auc_one_vs_rest,
        confusion,
        n_test: n,
        warnings,
    })
}

fn softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Class probabilities of a frozen model, `[n, C]`.
pub fn predict_probabilities(model: &Model, dataset: &NoisyDataset) -> Result<Array2<f64>> {
    let logits = model.logits(&dataset.images)?;
    let mut out = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        for (j, v) in softmax_row(row).into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Scores a frozen model on the true labels of `test`.
pub fn evaluate(model: &Model, test: &NoisyDataset) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::validation("test set", "empty"));
    }
    let probs = predict_probabilities(model, test)?;
    let predicted: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold(0, |best, (j, &v)| if v > r[best] { j } else { best }))
        .collect();
    let report = classification_report(&predicted, &test.true_labels(), Some(&probs), test.num_classes)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Last3Summary {
    pub mean_accuracy: f64,
    /// Position (0..3) of the report nearest the mean.
    pub selected: usize,
    pub report: MetricsReport,
}

/// Mean accuracy of the last three epochs, plus the report nearest that mean
/// (ties go to the later epoch). `reports` are in epoch order.
pub fn average_last3(reports: &[MetricsReport]) -> Result<Last3Summary> {
    if reports.len() != 3 {
        return Err(Error::validation("reports", format!("expected 3, got {}", reports.len())));
    }
    let mean = reports.iter().map(|r| r.accuracy).sum::<f64>() / 3.0;
    let mut selected = 0;
    for (i, r) in reports.iter().enumerate().skip(1) {
        if (r.accuracy - mean).abs() <= (reports[selected].accuracy - mean).abs() {
            selected = i;
        }
    }
    Ok(Last3Summary { mean_accuracy: mean, selected, report: reports[selected].clone() })
}

/// Feature table: header `index,true_label,given_label,f0,...,f{d-1}`, then
/// one row per sample with features in shortest round-trip notation.
pub fn features_to_string(features: &Array2<f64>, dataset: &NoisyDataset) -> Result<String> {
    if features.nrows() != dataset.len() {
        return Err(Error::Shape(format!("{} feature rows for {} samples", features.nrows(), dataset.len())));
    }
    let mut s = String::from("index,true_label,given_label");
    for j in 0..features.ncols() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (r, row) in dataset.records.iter().zip(features.rows()) {
        let _ = write!(s, "{},{},{}", r.index, r.true_label, r.given_label);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

/// Writes encoder features (the last convolutional stage after pooling).
pub fn export_features(model: &Model, dataset: &NoisyDataset, path: &Path) -> Result<()> {
    let features = model.features(&dataset.images)?;
    let text = features_to_string(&features, dataset)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for (k, (x, y)) in curve.points.iter().enumerate() {
        let t = if k == 0 { "inf".to_string() } else { curve.thresholds[k - 1].to_string() };
        let _ = writeln!(s, "{x},{y},{t}");
    }
    s
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_to_csv(confusion: &[Vec<usize>], class_names: &[String]) -> String {
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut s = String::from("true\\predicted");
    for c in 0..confusion.len() {
        let _ = write!(s, ",{}", name(c));
    }
    s.push('\n');
    for (t, row) in confusion.iter().enumerate() {
        s.push_str(&name(t));
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(acc: f64) -> MetricsReport {
        let mut r = classification_report(&[0, 1], &[0, 1], None, 2).unwrap();
        r.accuracy = acc;
        r
    }

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 1, 0, 2];
        let r = classification_report(&truth, &truth, None, 3).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert!(r.per_class.iter().all(|m| m.f1 == Some(100.0)));
        assert_eq!(r.confusion, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn constant_prediction_on_balanced_binary() {
        let truth = [0, 0, 1, 1];
        let r = classification_report(&[1, 1, 1, 1], &truth, None, 2).unwrap();
        assert_eq!(r.accuracy, 50.0);
        assert_eq!(r.per_class[1].recall, Some(100.0));
        assert_eq!(r.per_class[0].recall, Some(0.0));
        assert_eq!(r.per_class[0].precision, Some(0.0));
    }

    #[test]
    fn three_class_hand_case() {
        // sample 4 (true 2) predicted as 1
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [0, 0, 1, 1, 1, 2];
        let r = classification_report(&pred, &truth, None, 3).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 1, 1]]);
        assert!((r.accuracy - 500.0 / 6.0).abs() < 1e-12);
        let p1 = r.per_class[1].precision.unwrap();
        assert!((p1 - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[2].recall, Some(50.0));
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let r = classification_report(&[0, 1, 0], &[0, 1, 1], None, 3).unwrap();
        assert_eq!(r.per_class[2].f1, None);
        assert_eq!(r.warnings.len(), 1);
        let f: Vec<f64> = r.per_class.iter().filter_map(|m| m.f1).collect();
        assert!((r.macro_f1 - f.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_test_set_rejected() {
        assert!(classification_report(&[], &[], None, 2).is_err());
    }

    #[test]
    fn roc_hand_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        let c = roc_curve(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn last3_selection() {
        let s = average_last3(&[report_with(90.0), report_with(91.0), report_with(92.0)]).unwrap();
        assert_eq!((s.mean_accuracy, s.selected), (91.0, 1));
        let s = average_last3(&[report_with(80.0), report_with(90.0), report_with(100.0)]).unwrap();
        assert_eq!((s.mean_accuracy, s.selected), (90.0, 1));
        let s = average_last3(&[report_with(70.0), report_with(70.0), report_with(70.0)]).unwrap();
        assert_eq!(s.selected, 2);
        assert!(average_last3(&[report_with(1.0)]).is_err());
    }

    #[test]
    fn confusion_csv_layout() {
        let s = confusion_to_csv(&[vec![1, 2], vec![3, 4]], &["a".into(), "b".into()]);
        assert_eq!(s, "true\\predicted,a,b\na,1,2\nb,3,4\n");
    }
}
