//! Classification metrics. Metrics with a zero denominator are `None`
//! ("undefined"), never silently zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion_counts(predicted: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction count".into(),
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut cc = ConfusionCounts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => cc.tp += 1,
            (false, false) => cc.tn += 1,
            (true, false) => cc.fp += 1,
            (false, true) => cc.fn_ += 1,
        }
    }
    Ok(cc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn classification_metrics(cc: &ConfusionCounts) -> Result<BinaryMetrics> {
    let total = cc.total();
    if total == 0 {
        return Err(Error::Empty("confusion counts"));
    }
    let (tp, tn, fp, fn_) = (cc.tp as f64, cc.tn as f64, cc.fp as f64, cc.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => ratio(2.0 * p * r, p + r),
        _ => None,
    };
    Ok(BinaryMetrics {
        accuracy: (tp + tn) / total as f64,
        precision,
        recall,
        f1,
    })
}

/// Area under the ROC curve in its rank form:
/// (concordant pairs + ½ tied pairs) / (positives · negatives).
pub fn auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    if scores.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            what: "score count".into(),
            expected: truths.len(),
            actual: scores.len(),
        });
    }
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sweep tie groups in ascending score order; each positive is concordant
    // with every negative seen in earlier groups and ties with those in its own.
    let mut concordant = 0.0;
    let mut negatives_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let gp = group.iter().filter(|&&k| truths[k]).count();
        let gn = group.len() - gp;
        concordant += gp as f64 * negatives_below as f64 + 0.5 * (gp * gn) as f64;
        negatives_below += gn;
        i = j;
    }
    Ok(concordant / (pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

/// Headline metrics plus one-vs-rest detail. For two classes the headline
/// precision/recall/F1/AUC are those of class 1; otherwise they are macro
/// averages over the classes where each metric is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsBundle {
    pub const CSV_HEADER: [&'static str; 6] = ["head", "accuracy", "precision", "recall", "f1", "auc"];

    pub fn csv_record(&self, head: &str) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            head.to_string(),
            self.accuracy.to_string(),
            opt(self.precision),
            opt(self.recall),
            opt(self.f1),
            opt(self.auc),
        ]
    }
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One-vs-rest metrics. `scores` is `M × C`; column `j` ranks class `j`.
pub fn multiclass_metrics(
    predicted: &[usize],
    truth: &[usize],
    scores: &Tensor,
    num_classes: usize,
) -> Result<MetricsBundle> {
    if predicted.len() != truth.len() || scores.rows() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "prediction count".into(),
            expected: truth.len(),
            actual: predicted.len().min(scores.rows()),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if scores.cols() != num_classes {
        return Err(Error::DimensionMismatch {
            what: "score columns".into(),
            expected: num_classes,
            actual: scores.cols(),
        });
    }
    if let Some(&bad) = truth.iter().chain(predicted).find(|&&c| c >= num_classes) {
        return Err(Error::ClassIndex {
            index: bad,
            classes: num_classes,
        });
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    let accuracy = correct as f64 / truth.len() as f64;

    let mut per_class = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let p: Vec<bool> = predicted.iter().map(|&c| c == class).collect();
        let t: Vec<bool> = truth.iter().map(|&c| c == class).collect();
        let m = classification_metrics(&confusion_counts(&p, &t)?)?;
        let column: Vec<f64> = (0..scores.rows()).map(|r| scores.row(r)[class]).collect();
        per_class.push(ClassMetrics {
            class,
            support: t.iter().filter(|&&x| x).count(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc: auc(&column, &t).ok(),
        });
    }

    let bundle = if num_classes == 2 {
        let c1 = &per_class[1];
        MetricsBundle {
            accuracy,
            precision: c1.precision,
            recall: c1.recall,
            f1: c1.f1,
            auc: c1.auc,
            per_class,
        }
    } else {
        MetricsBundle {
            accuracy,
            precision: macro_mean(per_class.iter().map(|c| c.precision)),
            recall: macro_mean(per_class.iter().map(|c| c.recall)),
            f1: macro_mean(per_class.iter().map(|c| c.f1)),
            auc: macro_mean(per_class.iter().map(|c| c.auc)),
            per_class,
        }
    };
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], truths: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &ti) in truths.iter().enumerate() {
            for (j, &tj) in truths.iter().enumerate() {
                if ti && !tj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / pairs
    }

    #[test]
    fn confusion_examples() {
        let cc = confusion_counts(&[true; 10], &[true; 10]).unwrap();
        assert_eq!((cc.tp, cc.tn, cc.fp, cc.fn_), (10, 0, 0, 0));
        let cc = confusion_counts(&[true, false, true], &[false, true, false]).unwrap();
        assert_eq!((cc.tp, cc.tn), (0, 0));
        let cc = confusion_counts(&[true, true, false, false], &[true, false, true, false]).unwrap();
        assert_eq!((cc.tp, cc.fp, cc.fn_, cc.tn), (1, 1, 1, 1));
        assert!(confusion_counts(&[true], &[true, false]).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = classification_metrics(&ConfusionCounts {
            tp: 5,
            tn: 5,
            fp: 0,
            fn_: 0,
        })
        .unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, Some(1.0), Some(1.0), Some(1.0))
        );
        let m = classification_metrics(&ConfusionCounts {
            tp: 3,
            tn: 5,
            fp: 1,
            fn_: 1,
        })
        .unwrap();
        assert_eq!(m.precision, Some(0.75));
        assert_eq!(m.recall, Some(0.75));
        assert_eq!(m.f1, Some(0.75));
        assert_eq!(m.accuracy, 0.8);
        let m = classification_metrics(&ConfusionCounts {
            tp: 0,
            tn: 4,
            fp: 0,
            fn_: 2,
        })
        .unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert!((m.accuracy - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[true, false, true, false]).unwrap(), 1.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn two_class_bundle_reduces_to_binary() {
        let truth = [1, 0, 1, 0, 1];
        let pred = [1, 1, 1, 0, 0];
        let scores =
            Tensor::from_rows(&[[0.2, 0.8], [0.4, 0.6], [0.1, 0.9], [0.7, 0.3], [0.6, 0.4]])
                .unwrap();
        let b = multiclass_metrics(&pred, &truth, &scores, 2).unwrap();
        let bin = classification_metrics(
            &confusion_counts(
                &pred.map(|c| c == 1),
                &truth.map(|c| c == 1),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(b.accuracy, bin.accuracy);
        assert_eq!(b.precision, bin.precision);
        assert_eq!(b.recall, bin.recall);
        assert_eq!(b.f1, bin.f1);
        let col: Vec<f64> = (0..5).map(|r| scores.row(r)[1]).collect();
        assert_eq!(b.auc, Some(brute_auc(&col, &truth.map(|c| c == 1))));
    }

    #[test]
    fn perfect_three_class() {
        let truth = [0, 1, 2, 2, 1, 0];
        let mut rows = Vec::new();
        for &t in &truth {
            let mut r = [0.0; 3];
            r[t] = 1.0;
            rows.push(r);
        }
        let b = multiclass_metrics(&truth, &truth, &Tensor::from_rows(&rows).unwrap(), 3).unwrap();
        assert_eq!(
            (b.accuracy, b.precision, b.recall, b.f1, b.auc),
            (1.0, Some(1.0), Some(1.0), Some(1.0), Some(1.0))
        );
    }

    #[test]
    fn never_predicted_class_excluded_from_macro() {
        let truth = [0, 1, 2, 2];
        let pred = [0, 1, 1, 1];
        let scores = Tensor::full(&[4, 3], 1.0 / 3.0);
        let b = multiclass_metrics(&pred, &truth, &scores, 3).unwrap();
        assert_eq!(b.per_class[2].precision, None);
        let p0 = b.per_class[0].precision.unwrap();
        let p1 = b.per_class[1].precision.unwrap();
        assert!((b.precision.unwrap() - (p0 + p1) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let truths: Vec<bool> = data.iter().map(|(_, t)| *t).collect();
            let has_both = truths.iter().any(|&t| t) && truths.iter().any(|&t| !t);
            prop_assume!(has_both);
            prop_assert_eq!(auc(&scores, &truths).unwrap(), brute_auc(&scores, &truths));
        }

        #[test]
        fn auc_complement(data in proptest::collection::vec((-1e3..1e3f64, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s).collect();
            let truths: Vec<bool> = data.iter().map(|(_, t)| *t).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            prop_assume!(truths.iter().any(|&t| t) && truths.iter().any(|&t| !t));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auc(&scores, &truths).unwrap() + auc(&neg, &truths).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn metrics_permutation_invariant(
            data in proptest::collection::vec((any::<bool>(), any::<bool>(), 0.0..1.0f64), 2..40),
            seed in 0u64..1000,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = data.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |d: &[(bool, bool, f64)]| {
                (
                    d.iter().map(|x| x.0).collect::<Vec<_>>(),
                    d.iter().map(|x| x.1).collect::<Vec<_>>(),
                    d.iter().map(|x| x.2).collect::<Vec<_>>(),
                )
            };
            let (p, t, s) = split(&data);
            let (p2, t2, s2) = split(&shuffled);
            prop_assert_eq!(
                classification_metrics(&confusion_counts(&p, &t).unwrap()).unwrap(),
                classification_metrics(&confusion_counts(&p2, &t2).unwrap()).unwrap()
            );
            if t.iter().any(|&x| x) && t.iter().any(|&x| !x) {
                prop_assert_eq!(auc(&s, &t).unwrap(), auc(&s2, &t2).unwrap());
            }
        }
    }
}
