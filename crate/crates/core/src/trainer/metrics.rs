use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datapipe::Label;

/// Counts with non-stalking as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Non-stalking predicted as non-stalking.
    pub tp: usize,
    /// Stalking predicted as non-stalking.
    pub fp: usize,
    /// Stalking predicted as stalking.
    pub tn: usize,
    /// Non-stalking predicted as stalking.
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut m = ConfusionMatrix::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (Label::NonStalking, Label::NonStalking) => m.tp += 1,
                (Label::NonStalking, Label::Stalking) => m.fp += 1,
                (Label::Stalking, Label::Stalking) => m.tn += 1,
                (Label::Stalking, Label::NonStalking) => m.fn_ += 1,
            }
        }
        m
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Keyed by `stalking` and `non_stalking`.
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion_matrix: ConfusionMatrix,
    pub history: Vec<EpochRecord>,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn ratio(num: usize, den: usize, what: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("{what}: zero denominator"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64, what: String, flags: &mut Vec<String>) -> f64 {
    if p + r == 0.0 {
        flags.push(format!("{what}: zero denominator"));
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricsReport {
    pub fn from_confusion(m: ConfusionMatrix) -> Self {
        let mut flags = Vec::new();
        let accuracy = ratio(m.correct(), m.total(), "accuracy".into(), &mut flags);
        // (class, its true positives, predicted-as-class count, actual-class count)
        let orientations = [
            (Label::NonStalking, m.tp, m.tp + m.fp, m.tp + m.fn_),
            (Label::Stalking, m.tn, m.tn + m.fn_, m.tn + m.fp),
        ];
        let mut per_class = BTreeMap::new();
        for (label, hits, predicted, actual) in orientations {
            let precision = ratio(hits, predicted, format!("precision({label})"), &mut flags);
            let recall = ratio(hits, actual, format!("recall({label})"), &mut flags);
            let f_measure = harmonic(precision, recall, format!("f_measure({label})"), &mut flags);
            per_class.insert(
                label.as_str().to_string(),
                ClassMetrics {
                    precision,
                    recall,
                    f_measure,
                    support: actual,
                },
            );
        }
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / 2.0;
        let macro_avg = MacroMetrics {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f_measure: mean(|c| c.f_measure),
        };
        MetricsReport {
            accuracy,
            per_class,
            macro_avg,
            confusion_matrix: m,
            history: Vec::new(),
            flags,
        }
    }

    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.per_class[label.as_str()]
    }
}

/// Confusion counts and derived metrics for probabilities of stalking.
pub fn metrics_from_probabilities(probs: &[f64], labels: &[Label], threshold: f64) -> MetricsReport {
    MetricsReport::from_confusion(ConfusionMatrix::from_pairs(
        probs
            .iter()
            .zip(labels)
            .map(|(&p, &l)| (Label::from_probability(p, threshold), l)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = MetricsReport::from_confusion(ConfusionMatrix { tp: 5, fp: 0, tn: 7, fn_: 0 });
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.values().all(|c| c.f_measure == 1.0));
        assert!(r.flags.is_empty());
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let r = MetricsReport::from_confusion(ConfusionMatrix { tp: 0, fp: 0, tn: 3, fn_: 2 });
        assert_eq!(r.class(Label::NonStalking).precision, 0.0);
        assert!(r.flags.iter().any(|f| f.contains("precision(non_stalking)")));
    }

    #[test]
    fn json_keys() {
        let r = MetricsReport::from_confusion(ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let v = serde_json::to_value(&r).unwrap();
        for k in ["accuracy", "per_class", "macro", "confusion_matrix", "history"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["confusion_matrix"]["fn"], 1);
    }
}
