//! Confusion tallies and the scores used to rank detectors: accuracy,
//! the four component rates, P4 and the Custom score.
//!
//! P4 is the harmonic mean of precision, recall, specificity and NPV.
//! Custom is the harmonic mean of precision and specificity only, which
//! de-emphasizes false negatives: a rejected good image only costs the
//! patient a retake, while an accepted bad image costs clinician time.
//!
//! A component whose denominator is zero is `None` (undefined). A harmonic
//! mean with an undefined component is undefined; one with a component
//! equal to zero is zero.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::cascade::HierLabel;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no reports to aggregate")]
    NoReports,
    #[error("metric `{0}` is undefined in every run")]
    AllUndefined(&'static str),
    #[error("{truth} labels but {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
}

/// Binary outcome counts; positive means "acceptable quality".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryConfusion {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(truth: &[bool], predicted: &[bool]) -> Result<Self, MetricsError> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch {
                truth: truth.len(),
                predicted: predicted.len(),
            });
        }
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p);
        }
        Ok(cm)
    }

    /// Exchanges the roles of the two classes.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

impl Add for BinaryConfusion {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            tn: self.tn + rhs.tn,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for BinaryConfusion {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

/// 3x3 hierarchical tally, `counts[truth][predicted]` in
/// `HierLabel::ALL` order (no eye, eye with bad light, eye with good light).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierConfusion {
    pub counts: [[u64; 3]; 3],
}

impl HierConfusion {
    pub fn from_rows(counts: [[u64; 3]; 3]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, truth: HierLabel, predicted: HierLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn get(&self, truth: HierLabel, predicted: HierLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: HierLabel) -> u64 {
        self.counts[truth.index()].iter().sum()
    }
}

impl Add for HierConfusion {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for (row, other) in self.counts.iter_mut().zip(rhs.counts) {
            for (cell, o) in row.iter_mut().zip(other) {
                *cell += o;
            }
        }
        self
    }
}

/// Collapses the hierarchy to good (eye present and well lit) versus poor.
pub fn collapse_binary(h: &HierConfusion) -> BinaryConfusion {
    let good = HierLabel::EyeGoodLight.index();
    let mut cm = BinaryConfusion::default();
    for (truth, row) in h.counts.iter().enumerate() {
        for (pred, &n) in row.iter().enumerate() {
            match (truth == good, pred == good) {
                (true, true) => cm.tp += n,
                (true, false) => cm.fn_ += n,
                (false, true) => cm.fp += n,
                (false, false) => cm.tn += n,
            }
        }
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub npv: Option<f64>,
    pub p4: Option<f64>,
    pub custom: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 7] = [
        "accuracy",
        "precision",
        "recall",
        "specificity",
        "npv",
        "p4",
        "custom",
    ];

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.specificity,
            self.npv,
            self.p4,
            self.custom,
        ]
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Harmonic mean with the zero/undefined conventions described above.
pub fn harmonic_mean(parts: &[Option<f64>]) -> Option<f64> {
    let mut inverse_sum = 0.0;
    let mut zero = false;
    for part in parts {
        let v = (*part)?;
        if v == 0.0 {
            zero = true;
        } else {
            inverse_sum += 1.0 / v;
        }
    }
    if zero {
        Some(0.0)
    } else {
        Some(parts.len() as f64 / inverse_sum)
    }
}

pub fn binary_metrics(cm: &BinaryConfusion) -> Result<MetricReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let specificity = ratio(cm.tn, cm.tn + cm.fp);
    let npv = ratio(cm.tn, cm.tn + cm.fn_);
    Ok(MetricReport {
        accuracy: ratio(cm.tp + cm.tn, total),
        precision,
        recall,
        specificity,
        npv,
        p4: harmonic_mean(&[precision, recall, specificity, npv]),
        custom: harmonic_mean(&[precision, specificity]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single defined value.
    pub std: f64,
    /// Runs where the metric was undefined and therefore left out.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub k: usize,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub specificity: MetricSummary,
    pub npv: MetricSummary,
    pub p4: MetricSummary,
    pub custom: MetricSummary,
}

fn summarize(name: &'static str, values: &[Option<f64>]) -> Result<MetricSummary, MetricsError> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined(name));
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = if defined.len() < 2 {
        0.0
    } else {
        (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MetricSummary {
        mean,
        std,
        excluded: values.len() - defined.len(),
    })
}

/// Mean and sample standard deviation per metric across runs.
pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    let column = |pick: fn(&MetricReport) -> Option<f64>| -> Vec<Option<f64>> {
        reports.iter().map(pick).collect()
    };
    Ok(AggregateReport {
        k: reports.len(),
        accuracy: summarize("accuracy", &column(|r| r.accuracy))?,
        precision: summarize("precision", &column(|r| r.precision))?,
        recall: summarize("recall", &column(|r| r.recall))?,
        specificity: summarize("specificity", &column(|r| r.specificity))?,
        npv: summarize("npv", &column(|r| r.npv))?,
        p4: summarize("p4", &column(|r| r.p4))?,
        custom: summarize("custom", &column(|r| r.custom))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Option<f64>, b: f64, tol: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() <= tol)
    }

    fn table_two() -> HierConfusion {
        HierConfusion::from_rows([[99, 0, 1], [1, 73, 26], [0, 0, 100]])
    }

    #[test]
    fn hierarchical_table_collapses_to_published_scores() {
        let cm = collapse_binary(&table_two());
        assert_eq!(cm, BinaryConfusion::new(100, 27, 173, 0));
        let r = binary_metrics(&cm).unwrap();
        assert!(close(r.accuracy, 0.91, 1e-12));
        assert!(close(r.p4, 0.9037, 1e-4));
        assert!(close(r.custom, 0.8244, 1e-4));
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let r = binary_metrics(&BinaryConfusion::new(50, 0, 50, 0)).unwrap();
        assert!(r.values().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn small_matrix_by_hand() {
        let r = binary_metrics(&BinaryConfusion::new(3, 2, 4, 1)).unwrap();
        assert!(close(r.accuracy, 0.7, 1e-12));
        assert!(close(r.precision, 0.6, 1e-12));
        assert!(close(r.recall, 0.75, 1e-12));
        assert!(close(r.specificity, 4.0 / 6.0, 1e-12));
        assert!(close(r.npv, 0.8, 1e-12));
        // 4 / (5/3 + 4/3 + 3/2 + 5/4) = 16/23
        assert!(close(r.p4, 16.0 / 23.0, 1e-12));
        // 2 / (5/3 + 3/2) = 12/19
        assert!(close(r.custom, 12.0 / 19.0, 1e-12));
        assert!(close(r.p4, 0.6957, 5e-5));
        assert!(close(r.custom, 0.6316, 5e-5));
    }

    #[test]
    fn zero_denominators_are_undefined_and_zero_components_zero() {
        // never predicts positive: precision 0/0
        let r = binary_metrics(&BinaryConfusion::new(0, 0, 10, 5)).unwrap();
        assert_eq!(r.precision, None);
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.p4, None);
        assert_eq!(r.custom, None);
        // every prediction wrong, all components defined and zero
        let r = binary_metrics(&BinaryConfusion::new(0, 4, 0, 6)).unwrap();
        assert_eq!(r.p4, Some(0.0));
        assert_eq!(r.custom, Some(0.0));
        assert_eq!(r.accuracy, Some(0.0));
        assert_eq!(
            binary_metrics(&BinaryConfusion::default()),
            Err(MetricsError::EmptyMatrix)
        );
    }

    #[test]
    fn collapse_examples() {
        let diag = HierConfusion::from_rows([[100, 0, 0], [0, 100, 0], [0, 0, 100]]);
        assert_eq!(collapse_binary(&diag), BinaryConfusion::new(100, 0, 200, 0));
        let mut corner = HierConfusion::default();
        corner.counts[HierLabel::NoEye.index()][HierLabel::EyeGoodLight.index()] = 100;
        assert_eq!(collapse_binary(&corner), BinaryConfusion::new(0, 100, 0, 0));
    }

    #[test]
    fn collapse_enumerates_each_cell() {
        let labels = HierLabel::ALL;
        for &t in &labels {
            for &p in &labels {
                let mut h = HierConfusion::default();
                h.record(t, p);
                let cm = collapse_binary(&h);
                let good_t = t == HierLabel::EyeGoodLight;
                let good_p = p == HierLabel::EyeGoodLight;
                let mut expect = BinaryConfusion::default();
                expect.record(good_t, good_p);
                assert_eq!(cm, expect, "{t:?} -> {p:?}");
            }
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = binary_metrics(&BinaryConfusion::new(3, 2, 4, 1)).unwrap();
        let agg = aggregate(&[r; 5]).unwrap();
        assert_eq!(agg.k, 5);
        assert!((agg.p4.mean - r.p4.unwrap()).abs() < 1e-15);
        assert_eq!(agg.p4.std, 0.0);

        let runs: Vec<MetricReport> = [0.96, 0.97, 0.97, 0.965, 0.975]
            .iter()
            .map(|&a| MetricReport {
                accuracy: Some(a),
                ..r
            })
            .collect();
        let agg = aggregate(&runs).unwrap();
        assert!((agg.accuracy.mean - 0.968).abs() < 1e-12);
        // sqrt(130e-6 / 4)
        assert!((agg.accuracy.std - 0.0325e-3f64.sqrt()).abs() < 1e-12);
        assert!((agg.accuracy.std - 0.0057009).abs() < 1e-7);

        let single = aggregate(&[r]).unwrap();
        assert_eq!((single.k, single.custom.std), (1, 0.0));
    }

    #[test]
    fn aggregate_excludes_undefined_runs() {
        let good = binary_metrics(&BinaryConfusion::new(3, 2, 4, 1)).unwrap();
        let no_positive = binary_metrics(&BinaryConfusion::new(0, 0, 10, 5)).unwrap();
        let agg = aggregate(&[good, no_positive]).unwrap();
        assert_eq!(agg.precision.excluded, 1);
        assert_eq!(agg.precision.mean, 0.6);
        assert_eq!(agg.recall.excluded, 0);
        assert_eq!(
            aggregate(&[no_positive]),
            Err(MetricsError::AllUndefined("precision"))
        );
        assert_eq!(aggregate(&[]), Err(MetricsError::NoReports));
    }

    #[test]
    fn report_json_uses_fixed_keys_and_null() {
        let r = binary_metrics(&BinaryConfusion::new(0, 0, 10, 5)).unwrap();
        let v = serde_json::to_value(r).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expect = MetricReport::NAMES.to_vec();
        expect.sort();
        let mut got = keys.clone();
        got.sort();
        assert_eq!(got, expect);
        assert!(v["precision"].is_null());
        assert_eq!(v["recall"], 0.0);
    }

    #[test]
    fn custom_is_not_swap_invariant() {
        let cm = BinaryConfusion::new(3, 2, 4, 1);
        let a = binary_metrics(&cm).unwrap();
        let b = binary_metrics(&cm.swapped()).unwrap();
        assert!((a.p4.unwrap() - b.p4.unwrap()).abs() < 1e-12);
        // swapped: precision 4/5, specificity 3/4 -> 24/31
        assert!((b.custom.unwrap() - 24.0 / 31.0).abs() < 1e-12);
        assert!((a.custom.unwrap() - b.custom.unwrap()).abs() > 0.1);
    }

    proptest! {
        #[test]
        fn p4_is_class_swap_invariant(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let cm = BinaryConfusion::new(tp, fp, tn, fn_);
            prop_assume!(cm.total() > 0);
            let a = binary_metrics(&cm).unwrap();
            let b = binary_metrics(&cm.swapped()).unwrap();
            match (a.p4, b.p4) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn harmonic_means_are_bounded(tp in 1u64..500, fp in 1u64..500, tn in 1u64..500, fn_ in 1u64..500) {
            let r = binary_metrics(&BinaryConfusion::new(tp, fp, tn, fn_)).unwrap();
            let parts = [r.precision.unwrap(), r.recall.unwrap(), r.specificity.unwrap(), r.npv.unwrap()];
            let lo = parts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = parts.iter().cloned().fold(0.0, f64::max);
            let p4 = r.p4.unwrap();
            prop_assert!(lo - 1e-12 <= p4 && p4 <= hi + 1e-12);
            let (p, s) = (parts[0], parts[2]);
            let c = r.custom.unwrap();
            prop_assert!(p.min(s) - 1e-12 <= c && c <= p.max(s) + 1e-12);
            let acc = r.accuracy.unwrap();
            prop_assert_eq!(acc, (tp + tn) as f64 / (tp + fp + tn + fn_) as f64);
            for v in r.values().iter().flatten() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn collapse_conserves_mass(cells in proptest::array::uniform9(0u64..1000)) {
            let h = HierConfusion::from_rows([
                [cells[0], cells[1], cells[2]],
                [cells[3], cells[4], cells[5]],
                [cells[6], cells[7], cells[8]],
            ]);
            prop_assert_eq!(collapse_binary(&h).total(), h.total());
        }

        #[test]
        fn merging_partial_tallies_is_order_free(a in proptest::array::uniform4(0u64..100), b in proptest::array::uniform4(0u64..100)) {
            let x = BinaryConfusion::new(a[0], a[1], a[2], a[3]);
            let y = BinaryConfusion::new(b[0], b[1], b[2], b[3]);
            prop_assert_eq!(x + y, y + x);
        }
    }
}
