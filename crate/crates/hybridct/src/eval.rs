//! Classification metrics: confusion matrix, per-class precision/recall/F1,
//! support-weighted averages, ROC curve, and AUC. COVID is always the
//! positive class; per-class metrics for non-COVID are computed with the
//! classes swapped.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Binary confusion counts with COVID as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn new(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same matrix with the positive class flipped.
    pub fn flipped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Count TP/FP/FN/TN over paired label vectors.
pub fn confusion(y_true: &[Label], y_pred: &[Label]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Invalid(format!(
            "label vectors differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Invalid("empty label vectors".into()));
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (Label::Covid, Label::Covid) => cm.tp += 1,
            (Label::Covid, Label::NonCovid) => cm.fn_ += 1,
            (Label::NonCovid, Label::Covid) => cm.fp += 1,
            (Label::NonCovid, Label::NonCovid) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// `(TP + TN) / total`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into()));
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// A metric value plus a flag marking the zero-denominator convention
/// (the value is reported as 0 when its denominator is empty).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub undefined: bool,
}

impl Metric {
    fn defined(value: f64) -> Self {
        Metric { value, undefined: false }
    }
    const UNDEFINED: Metric = Metric { value: 0.0, undefined: true };
}

fn ratio(num: usize, den: usize) -> Metric {
    if den == 0 {
        Metric::UNDEFINED
    } else {
        Metric::defined(num as f64 / den as f64)
    }
}

/// `TP / (TP + FP)`; 0 with a flag when nothing was predicted positive.
pub fn precision(cm: &ConfusionMatrix) -> Metric {
    ratio(cm.tp, cm.tp + cm.fp)
}

/// `TP / (TP + FN)`; 0 with a flag when there are no positives.
pub fn recall(cm: &ConfusionMatrix) -> Metric {
    ratio(cm.tp, cm.tp + cm.fn_)
}

/// Harmonic mean of precision and recall; 0 with a flag when both are 0.
pub fn f1(cm: &ConfusionMatrix) -> Metric {
    let p = precision(cm);
    let r = recall(cm);
    if p.undefined || r.undefined || p.value + r.value == 0.0 {
        Metric::UNDEFINED
    } else {
        Metric::defined(2.0 * p.value * r.value / (p.value + r.value))
    }
}

/// Precision/recall/F1 for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub support: usize,
}

impl ClassMetrics {
    fn from_cm(label: Label, cm: &ConfusionMatrix) -> Self {
        ClassMetrics {
            label,
            precision: precision(cm),
            recall: recall(cm),
            f1: f1(cm),
            support: cm.tp + cm.fn_,
        }
    }
}

/// Per-class metrics for (COVID, non-COVID); the non-COVID entry treats
/// non-COVID as the positive class.
pub fn class_metrics(cm: &ConfusionMatrix) -> (ClassMetrics, ClassMetrics) {
    (
        ClassMetrics::from_cm(Label::Covid, cm),
        ClassMetrics::from_cm(Label::NonCovid, &cm.flipped()),
    )
}

/// Support-weighted mean of per-class metric values.
pub fn weighted_average(values: &[f64], supports: &[usize]) -> Result<f64> {
    if values.len() != supports.len() {
        return Err(Error::Invalid("values/supports length mismatch".into()));
    }
    let n: usize = supports.iter().sum();
    if n == 0 {
        return Err(Error::UndefinedMetric("weighted average over zero supports".into()));
    }
    Ok(values
        .iter()
        .zip(supports)
        .map(|(&v, &s)| v * s as f64)
        .sum::<f64>()
        / n as f64)
}

/// One operating point of the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The sentinel point (0, 0) carries an infinite threshold, which JSON
    /// cannot represent as a number.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Symbolic(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            Repr::Finite(*value).serialize(ser)
        } else {
            Repr::Symbolic(value.to_string()).serialize(ser)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        match Repr::deserialize(de)? {
            Repr::Finite(v) => Ok(v),
            Repr::Symbolic(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// ROC curve over all distinct score thresholds (descending), with a +inf
/// sentinel so the curve starts at (0, 0) and ends at (1, 1). Predictions
/// are positive when `score >= threshold`.
pub fn roc_curve(y_true: &[Label], scores: &[f64]) -> Result<Vec<RocPoint>> {
    if y_true.len() != scores.len() {
        return Err(Error::Invalid(format!(
            "labels ({}) and scores ({}) differ in length",
            y_true.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let n_pos = y_true.iter().filter(|&&l| l == Label::Covid).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid("ROC requires both classes present".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume every sample tied at this score.
        while i < order.len() && scores[order[i]] == threshold {
            match y_true[order[i]] {
                Label::Covid => tp += 1,
                Label::NonCovid => fp += 1,
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold,
            tpr: tp as f64 / n_pos as f64,
            fpr: fp as f64 / n_neg as f64,
        });
    }
    Ok(points)
}

/// Area under the ROC curve by trapezoidal integration of TPR over FPR.
pub fn auc(y_true: &[Label], scores: &[f64]) -> Result<f64> {
    Ok(auc_of_curve(&roc_curve(y_true, scores)?))
}

/// Trapezoidal area of an already-computed curve.
pub fn auc_of_curve(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Support-weighted precision/recall/F1 plus accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Everything reported for one evaluated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Display name of the evaluated model ("vgg16", "hybrid", ...).
    pub model: String,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted: WeightedMetrics,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    pub config_hash: String,
}

impl EvalReport {
    /// Assemble a report from truth labels, hard predictions, and continuous
    /// ROC scores.
    pub fn from_predictions(
        model: impl Into<String>,
        y_true: &[Label],
        y_pred: &[Label],
        scores: &[f64],
        config_hash: impl Into<String>,
    ) -> Result<EvalReport> {
        let cm = confusion(y_true, y_pred)?;
        let roc = roc_curve(y_true, scores)?;
        let auc = auc_of_curve(&roc);
        Ok(EvalReport::from_parts(model, cm, roc, auc, config_hash))
    }

    /// Assemble a report from a confusion matrix plus a precomputed curve.
    pub fn from_parts(
        model: impl Into<String>,
        cm: ConfusionMatrix,
        roc: Vec<RocPoint>,
        auc: f64,
        config_hash: impl Into<String>,
    ) -> EvalReport {
        let (covid, noncovid) = class_metrics(&cm);
        let supports = [covid.support, noncovid.support];
        let weighted = WeightedMetrics {
            precision: weighted_average(&[covid.precision.value, noncovid.precision.value], &supports)
                .unwrap_or(0.0),
            recall: weighted_average(&[covid.recall.value, noncovid.recall.value], &supports)
                .unwrap_or(0.0),
            f1: weighted_average(&[covid.f1.value, noncovid.f1.value], &supports).unwrap_or(0.0),
        };
        EvalReport {
            model: model.into(),
            accuracy: accuracy(&cm).unwrap_or(0.0),
            confusion: cm,
            per_class: vec![covid, noncovid],
            weighted,
            roc,
            auc,
            config_hash: config_hash.into(),
        }
    }
}

/// Render a fraction as a percentage with two decimals, rounding half up.
pub fn format_pct(fraction: f64) -> String {
    let scaled = (fraction * 10_000.0).round() / 100.0;
    format!("{scaled:.2}")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Confusion matrices reported for the four evaluated models
    /// (tp, fp, fn, tn with COVID positive).
    pub(crate) const HYBRID_CM: ConfusionMatrix = ConfusionMatrix { tp: 182, fp: 0, fn_: 4, tn: 187 };
    pub(crate) const VGG16_CM: ConfusionMatrix = ConfusionMatrix { tp: 161, fp: 18, fn_: 25, tn: 169 };
    pub(crate) const DENSENET_CM: ConfusionMatrix = ConfusionMatrix { tp: 170, fp: 11, fn_: 16, tn: 176 };
    pub(crate) const MOBILENET_CM: ConfusionMatrix = ConfusionMatrix { tp: 171, fp: 7, fn_: 15, tn: 180 };

    #[test]
    fn confusion_from_labels() {
        let y_true = vec![Label::Covid, Label::Covid, Label::NonCovid, Label::NonCovid];
        let y_pred = vec![Label::Covid, Label::NonCovid, Label::Covid, Label::NonCovid];
        let cm = confusion(&y_true, &y_pred).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 1, 1, 1));

        let perfect = confusion(&y_true, &y_true).unwrap();
        assert_eq!(perfect.fp, 0);
        assert_eq!(perfect.fn_, 0);
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        let err = confusion(&[Label::Covid], &[]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn hybrid_model_metrics() {
        assert_eq!(format_pct(accuracy(&HYBRID_CM).unwrap()), "98.93");
        let (covid, noncovid) = class_metrics(&HYBRID_CM);
        assert_eq!(format_pct(covid.precision.value), "100.00");
        assert_eq!(format_pct(covid.recall.value), "97.85");
        assert_eq!(format_pct(covid.f1.value), "98.91");
        assert_eq!(format_pct(noncovid.precision.value), "97.91");
        assert_eq!(format_pct(noncovid.recall.value), "100.00");
        assert_eq!(format_pct(noncovid.f1.value), "98.94");
        assert_eq!(covid.support, 186);
        assert_eq!(noncovid.support, 187);
    }

    #[test]
    fn vgg16_model_metrics() {
        assert_eq!(format_pct(accuracy(&VGG16_CM).unwrap()), "88.47");
        let (covid, _) = class_metrics(&VGG16_CM);
        assert_eq!(format_pct(covid.precision.value), "89.94");
        assert_eq!(format_pct(covid.recall.value), "86.56");
    }

    #[test]
    fn densenet_covid_recall() {
        let (covid, _) = class_metrics(&DENSENET_CM);
        assert_eq!(format_pct(covid.recall.value), "91.40");
    }

    #[test]
    fn f1_equals_precision_when_equal() {
        // precision == recall forces f1 to the same value.
        let cm = ConfusionMatrix::new(10, 5, 5, 10);
        let p = precision(&cm);
        let r = recall(&cm);
        assert_eq!(p.value, r.value);
        assert!((f1(&cm).value - p.value).abs() < 1e-12);
    }

    #[test]
    fn zero_denominator_metrics_are_flagged() {
        let cm = ConfusionMatrix::new(0, 0, 3, 5);
        assert!(precision(&cm).undefined);
        assert_eq!(precision(&cm).value, 0.0);
        let no_pos = ConfusionMatrix::new(0, 2, 0, 5);
        assert!(recall(&no_pos).undefined);
    }

    #[test]
    fn weighted_average_matches_reported_f1() {
        let (covid, noncovid) = class_metrics(&HYBRID_CM);
        let wf1 = weighted_average(
            &[covid.f1.value, noncovid.f1.value],
            &[covid.support, noncovid.support],
        )
        .unwrap();
        assert_eq!(format_pct(wf1), "98.93");

        // Equal supports reduce to the arithmetic mean.
        let m = weighted_average(&[0.2, 0.8], &[7, 7]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_recall_equals_accuracy_for_mobilenet() {
        let (covid, noncovid) = class_metrics(&MOBILENET_CM);
        let wr = weighted_average(
            &[covid.recall.value, noncovid.recall.value],
            &[covid.support, noncovid.support],
        )
        .unwrap();
        let acc = accuracy(&MOBILENET_CM).unwrap();
        assert!((wr - acc).abs() < 1e-12);
        assert_eq!(format_pct(acc), "94.10");
        assert!((acc - 351.0 / 373.0).abs() < 1e-12);
    }

    #[test]
    fn roc_curve_enumerates_thresholds() {
        // positives {0.9, 0.4}, negatives {0.1, 0.6}
        let y = vec![Label::Covid, Label::Covid, Label::NonCovid, Label::NonCovid];
        let s = vec![0.9, 0.4, 0.1, 0.6];
        let roc = roc_curve(&y, &s).unwrap();
        assert_eq!(roc.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(roc.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(roc.iter().any(|p| p.fpr == 0.5 && p.tpr == 0.5));
        assert!(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr));

        let a = auc(&y, &s).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_with_tied_scores_collapses() {
        let y = vec![Label::Covid, Label::NonCovid, Label::Covid, Label::NonCovid];
        let s = vec![0.3, 0.3, 0.3, 0.3];
        let roc = roc_curve(&y, &s).unwrap();
        assert_eq!(roc.len(), 2);
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        assert_eq!((roc[1].fpr, roc[1].tpr), (1.0, 1.0));
        assert!((auc(&y, &s).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_scores_hit_top_left() {
        let y = vec![Label::Covid, Label::Covid, Label::NonCovid];
        let s = vec![1.0, 1.0, 0.0];
        let roc = roc_curve(&y, &s).unwrap();
        assert!(roc.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert!((auc(&y, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn roc_rejects_single_class() {
        let err = roc_curve(&[Label::Covid, Label::Covid], &[0.1, 0.2]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn pct_formatting_rounds_half_up() {
        assert_eq!(format_pct(0.989276), "98.93");
        assert_eq!(format_pct(0.98925), "98.93");
        assert_eq!(format_pct(1.0), "100.00");
        assert_eq!(format_pct(0.0), "0.00");
    }

    #[test]
    fn report_roundtrips_through_json() {
        let y = vec![Label::Covid, Label::Covid, Label::NonCovid, Label::NonCovid];
        let s = vec![0.9, 0.4, 0.1, 0.6];
        let pred: Vec<Label> = s
            .iter()
            .map(|&v| if v > 0.5 { Label::Covid } else { Label::NonCovid })
            .collect();
        let report = EvalReport::from_predictions("toy", &y, &pred, &s, "cfg").unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
