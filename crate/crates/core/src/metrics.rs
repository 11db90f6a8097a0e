//! One-vs-rest confusion metrics, macro averages and pairwise AUC.

use std::cmp::Ordering;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::domain::HospitalLevel;
use crate::error::{Error, Result};
use crate::neuralnet::argmax;
use crate::scalar::Scalar;

/// One-vs-rest tallies for a single class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n: u64,
    pub classes: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn correct(&self) -> u64 {
        self.classes.iter().map(|c| c.tp).sum()
    }
}

fn check_lengths(labels: usize, predictions: usize) -> Result<()> {
    if labels != predictions {
        return Err(Error::LengthMismatch { labels, predictions });
    }
    if labels == 0 {
        return Err(Error::InvalidInput("metrics need at least one sample".into()));
    }
    Ok(())
}

fn check_class(c: usize, n_classes: usize) -> Result<()> {
    if c >= n_classes {
        return Err(Error::InvalidInput(format!("class index {c} outside 0..{n_classes}")));
    }
    Ok(())
}

pub fn confusion_counts(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<ConfusionCounts> {
    check_lengths(labels.len(), predictions.len())?;
    let mut classes = vec![ClassCounts::default(); n_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        check_class(y, n_classes)?;
        check_class(p, n_classes)?;
        for (c, counts) in classes.iter_mut().enumerate() {
            match (y == c, p == c) {
                (true, true) => counts.tp += 1,
                (false, true) => counts.fp += 1,
                (true, false) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        n: labels.len() as u64,
        classes,
    })
}

/// A metric whose denominator was zero and was therefore reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Degenerate {
    Sensitivity,
    Specificity,
    Precision,
    F1,
}

impl fmt::Display for Degenerate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Degenerate::Sensitivity => "sensitivity",
            Degenerate::Specificity => "specificity",
            Degenerate::Precision => "precision",
            Degenerate::F1 => "f1",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<T> {
    pub accuracy: T,
    pub sensitivity: T,
    pub specificity: T,
    pub precision: T,
    pub f1: T,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<T>,
    pub degenerate: Vec<Degenerate>,
}

fn ratio<T: Scalar>(num: u64, den: u64) -> Option<T> {
    (den > 0).then(|| T::from_u64(num).expect("count") / T::from_u64(den).expect("count"))
}

/// Accuracy, sensitivity, specificity, precision and F1 from one class's
/// counts. Zero denominators give 0 and are listed in `degenerate`.
pub fn per_class_metrics<T: Scalar>(c: &ClassCounts) -> ClassMetrics<T> {
    let mut degenerate = Vec::new();
    let mut or_zero = |v: Option<T>, tag| {
        v.unwrap_or_else(|| {
            degenerate.push(tag);
            T::zero()
        })
    };
    let accuracy = ratio(c.tp + c.tn, c.total()).unwrap_or_else(T::zero);
    let sensitivity = or_zero(ratio(c.tp, c.tp + c.fn_), Degenerate::Sensitivity);
    let specificity = or_zero(ratio(c.tn, c.tn + c.fp), Degenerate::Specificity);
    let precision = or_zero(ratio(c.tp, c.tp + c.fp), Degenerate::Precision);
    let sum = precision + sensitivity;
    let f1 = if sum > T::zero() {
        T::lit(2.0) * (precision * sensitivity) / sum
    } else {
        degenerate.push(Degenerate::F1);
        T::zero()
    };
    ClassMetrics {
        accuracy,
        sensitivity,
        specificity,
        precision,
        f1,
        auc: None,
        degenerate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics<T> {
    pub accuracy: T,
    pub sensitivity: T,
    pub specificity: T,
    pub precision: T,
    pub f1: T,
    /// Mean over the classes that have an AUC.
    pub auc: Option<T>,
}

fn mean<T: Scalar>(values: impl Iterator<Item = T>) -> Option<T> {
    let (sum, n) = values.fold((T::zero(), 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / T::from_count(n))
}

pub fn macro_metrics<T: Scalar>(per_class: &[ClassMetrics<T>]) -> Result<MacroMetrics<T>> {
    if per_class.is_empty() {
        return Err(Error::InvalidInput("macro average over zero classes".into()));
    }
    let avg = |f: fn(&ClassMetrics<T>) -> T| mean(per_class.iter().map(f)).expect("nonempty");
    Ok(MacroMetrics {
        accuracy: avg(|m| m.accuracy),
        sensitivity: avg(|m| m.sensitivity),
        specificity: avg(|m| m.specificity),
        precision: avg(|m| m.precision),
        f1: avg(|m| m.f1),
        auc: mean(per_class.iter().filter_map(|m| m.auc)),
    })
}

/// Mann-Whitney AUC of `scores` for the positives: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
/// Computed from midranks in integer arithmetic, so it equals the pairwise
/// count exactly. `None` without positives or negatives.
pub fn auc_binary<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<Option<T>> {
    check_lengths(positive.len(), scores.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // twice the rank sum of the positives
    let mut rank_sum2 = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let mid2 = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| positive[i]).count() as u64;
        rank_sum2 += mid2 * pos_in_group;
        start = end;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    let den = 2 * n_pos * n_neg;
    Ok(ratio(u2, den))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport<T> {
    pub per_class: Vec<Option<T>>,
    pub macro_auc: Option<T>,
    /// Classes left out of the macro for lack of positives or negatives.
    pub excluded: Vec<usize>,
}

pub fn auc_ovr<T: Scalar>(labels: &[usize], probabilities: ArrayView2<T>) -> Result<AucReport<T>> {
    check_lengths(labels.len(), probabilities.nrows())?;
    let n_classes = probabilities.ncols();
    for &y in labels {
        check_class(y, n_classes)?;
    }
    let tol = T::lit(1e-6);
    for (i, row) in probabilities.rows().into_iter().enumerate() {
        let s = row.iter().fold(T::zero(), |a, &b| a + b);
        if (s - T::one()).abs() > tol {
            return Err(Error::InvalidInput(format!("probability row {i} sums to {s}")));
        }
    }
    let mut per_class = Vec::with_capacity(n_classes);
    let mut excluded = Vec::new();
    for c in 0..n_classes {
        let scores: Vec<T> = probabilities.column(c).to_vec();
        let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let auc = auc_binary(&scores, &positive)?;
        if auc.is_none() {
            excluded.push(c);
        }
        per_class.push(auc);
    }
    let macro_auc = mean(per_class.iter().flatten().copied());
    Ok(AucReport {
        per_class,
        macro_auc,
        excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "withoutAE")]
    WithoutAe,
    #[serde(rename = "withAE")]
    WithAe,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::WithoutAe => "noae",
            Variant::WithAe => "ae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport<T> {
    pub variant: Variant,
    pub n: u64,
    pub class_names: Vec<String>,
    pub counts: ConfusionCounts,
    pub per_class: Vec<ClassMetrics<T>>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics<T>,
    /// Plain multiclass accuracy, correct / n.
    pub multiclass_accuracy: T,
    pub warnings: Vec<String>,
}

impl<T: Serialize> MetricReport<T> {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("metric report", e))
    }
}

/// Full report for hospital-level predictions given class probabilities;
/// predicted classes are the row-wise argmax.
pub fn evaluate<T: Scalar>(
    labels: &[usize],
    probabilities: ArrayView2<T>,
    variant: Variant,
) -> Result<MetricReport<T>> {
    let n_classes = probabilities.ncols();
    let predictions: Vec<usize> = probabilities.rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
    let counts = confusion_counts(labels, &predictions, n_classes)?;
    let auc = auc_ovr(labels, probabilities)?;
    let class_names: Vec<String> = (0..n_classes)
        .map(|c| HospitalLevel::from_index(c).map_or_else(|| format!("class_{c}"), |l| l.name().to_string()))
        .collect();
    let mut warnings = Vec::new();
    let per_class: Vec<ClassMetrics<T>> = counts
        .classes
        .iter()
        .zip(&auc.per_class)
        .zip(&class_names)
        .map(|((cc, a), name)| {
            let mut m = per_class_metrics(cc);
            m.auc = *a;
            for d in &m.degenerate {
                warnings.push(format!("{name}: {d} has a zero denominator, reported as 0"));
            }
            m
        })
        .collect();
    for &c in &auc.excluded {
        warnings.push(format!(
            "{}: no positives or no negatives, excluded from macro AUC",
            class_names[c]
        ));
    }
    let macro_avg = macro_metrics(&per_class)?;
    let multiclass_accuracy = ratio(counts.correct(), counts.n).expect("n >= 1");
    Ok(MetricReport {
        variant,
        n: counts.n,
        class_names,
        counts,
        per_class,
        macro_avg,
        multiclass_accuracy,
        warnings,
    })
}

/// Rows of the comparison table, in order.
pub const TABLE_ROWS: [&str; 6] = ["AUC", "Accuracy", "F1 Score", "Precision", "Sensitivity", "Specificity"];

fn table_values<T: Scalar>(m: &MacroMetrics<T>) -> [f64; 6] {
    [
        m.auc.map_or(f64::NAN, |v| v.to_f64_lossy()),
        m.accuracy.to_f64_lossy(),
        m.f1.to_f64_lossy(),
        m.precision.to_f64_lossy(),
        m.sensitivity.to_f64_lossy(),
        m.specificity.to_f64_lossy(),
    ]
}

/// Macro metrics side by side: `metric,withoutAE,withAE,increase`. Accuracy
/// is the macro one-vs-rest accuracy.
pub fn comparison_table<T: Scalar>(without: &MetricReport<T>, with: &MetricReport<T>) -> String {
    let a = table_values(&without.macro_avg);
    let b = table_values(&with.macro_avg);
    let mut out = String::from("metric,withoutAE,withAE,increase\n");
    for (i, name) in TABLE_ROWS.iter().enumerate() {
        out.push_str(&format!("{name},{:.4},{:.4},{:+.4}\n", a[i], b[i], b[i] - a[i]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ClassCounts {
        ClassCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_tabulated_counts() {
        let c = confusion_counts(&[0, 0, 1], &[0, 1, 1], 4).unwrap();
        assert_eq!(c.classes[0], counts(1, 1, 0, 1));
        assert_eq!(c.classes[1], counts(1, 1, 1, 0));
        assert_eq!(c.classes[2], counts(0, 3, 0, 0));
        assert_eq!(c.correct(), 2);
        assert!(confusion_counts(&[0, 1], &[0], 4).is_err());
        assert!(confusion_counts(&[], &[], 4).is_err());
        assert!(confusion_counts(&[5], &[0], 4).is_err());
    }

    #[test]
    fn worked_example() {
        let m: ClassMetrics<f64> = per_class_metrics(&counts(50, 30, 10, 10));
        let r = |x: f64| (x * 1e4).round() / 1e4;
        assert_eq!(r(m.accuracy), 0.8);
        assert_eq!(r(m.sensitivity), 0.8333);
        assert_eq!(r(m.specificity), 0.75);
        assert_eq!(r(m.precision), 0.8333);
        assert_eq!(r(m.f1), 0.8333);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn all_positive_and_correct() {
        let m: ClassMetrics<f64> = per_class_metrics(&counts(7, 0, 0, 0));
        assert_eq!((m.sensitivity, m.precision, m.f1), (1.0, 1.0, 1.0));
        assert_eq!(m.degenerate, vec![Degenerate::Specificity]);
    }

    #[test]
    fn no_positive_predictions_are_flagged() {
        let m: ClassMetrics<f64> = per_class_metrics(&counts(0, 5, 0, 3));
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
        assert_eq!(m.degenerate, vec![Degenerate::Precision, Degenerate::F1]);
    }

    #[test]
    fn macro_is_plain_mean() {
        let mk = |f1| ClassMetrics {
            accuracy: 0.5,
            sensitivity: 0.5,
            specificity: 0.5,
            precision: 0.5,
            f1,
            auc: None,
            degenerate: vec![],
        };
        let m = macro_metrics(&[mk(1.0), mk(0.5), mk(0.5), mk(0.0)]).unwrap();
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.auc, None);
    }

    #[test]
    fn auc_examples() {
        let auc = auc_binary(&[0.9, 0.4, 0.7, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(auc, Some(0.75));
        assert_eq!(
            auc_binary(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            auc_binary(&[0.3; 5], &[true, false, true, false, false]).unwrap(),
            Some(0.5)
        );
        assert_eq!(auc_binary(&[0.3, 0.4], &[true, true]).unwrap(), None);
    }

    #[test]
    fn class_without_positives_leaves_macro() {
        let p = array![[0.7, 0.1, 0.1, 0.1], [0.2, 0.6, 0.1, 0.1], [0.1, 0.2, 0.6, 0.1]];
        let r = auc_ovr(&[0, 1, 2], p.view()).unwrap();
        assert_eq!(r.excluded, vec![3]);
        assert_eq!(r.macro_auc, Some(1.0));
        let bad = array![[0.7, 0.7, 0.1, 0.1]];
        assert!(auc_ovr(&[0], bad.view()).is_err());
    }

    #[test]
    fn report_and_table() {
        let p = array![
            [0.7, 0.1, 0.1, 0.1],
            [0.2, 0.6, 0.1, 0.1],
            [0.1, 0.2, 0.6, 0.1],
            [0.4, 0.3, 0.2, 0.1]
        ];
        let r = evaluate(&[0, 1, 2, 3], p.view(), Variant::WithoutAe).unwrap();
        assert_eq!(r.multiclass_accuracy, 0.75);
        assert!(!r.warnings.is_empty());
        let t = comparison_table(&r, &r);
        assert!(t.starts_with("metric,withoutAE,withAE,increase\nAUC,"));
        assert!(t.contains("F1 Score,"));
        assert_eq!(t.lines().count(), 7);
    }

    fn naive_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
        let mut twice = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    twice += if si > sj {
                        2
                    } else if si == sj {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise(data in prop::collection::vec((0u8..6, any::<bool>()), 1..50)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
            let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assert_eq!(auc_binary(&scores, &pos).unwrap(), naive_auc(&scores, &pos));
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc_binary(&warped, &pos).unwrap(), auc_binary(&scores, &pos).unwrap());
        }

        #[test]
        fn counts_partition_n(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50)) {
            let (y, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let c = confusion_counts(&y, &p, 4).unwrap();
            for cc in &c.classes {
                prop_assert_eq!(cc.total(), y.len() as u64);
            }
            let correct = y.iter().zip(&p).filter(|(a, b)| a == b).count() as u64;
            prop_assert_eq!(c.correct(), correct);
        }
    }
}
