//! Confusion matrices and the per-class and overall scores derived from them.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Counts indexed `[reference][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Empty("class list"));
        }
        let c = class_names.len();
        Ok(Self {
            class_names,
            counts: vec![vec![0; c]; c],
        })
    }

    /// Classes named by their index.
    pub fn with_classes(c: usize) -> Result<Self> {
        Self::new((0..c).map(|i| i.to_string()).collect())
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 || counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion matrix", &[c, c], &[counts.len()]));
        }
        Ok(Self { class_names, counts })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accumulate(&mut self, reference: &[usize], predicted: &[usize]) -> Result<()> {
        if reference.len() != predicted.len() {
            return Err(Error::dim("accumulate", &[reference.len()], &[predicted.len()]));
        }
        let c = self.classes();
        for (index, (&r, &p)) in reference.iter().zip(predicted).enumerate() {
            for label in [r, p] {
                if label >= c {
                    return Err(Error::LabelOutOfRange {
                        index,
                        label,
                        classes: c,
                    });
                }
            }
        }
        for (&r, &p) in reference.iter().zip(predicted) {
            self.counts[r][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::dim("merge", &[self.classes()], &[other.classes()]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub name: String,
    /// Reference points of this class.
    pub support: u64,
    /// Points predicted as this class.
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No point was predicted as this class; precision is reported as 0.
    pub no_predictions: bool,
    /// The class is absent from the reference; recall is reported as 0.
    pub no_support: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub classes: Vec<ClassScores>,
    /// Unweighted mean of per-class F1, zero-scored classes included.
    pub avg_f1: f64,
    pub overall_accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let c = cm.classes();
    let classes: Vec<ClassScores> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let support: u64 = cm.counts[k].iter().sum();
            let predicted: u64 = cm.counts.iter().map(|row| row[k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            ClassScores {
                name: cm.class_names[k].clone(),
                support,
                predicted,
                precision,
                recall,
                f1: f1(precision, recall),
                no_predictions: predicted == 0,
                no_support: support == 0,
            }
        })
        .collect();
    let trace: u64 = (0..c).map(|k| cm.counts[k][k]).sum();
    Ok(Metrics {
        avg_f1: classes.iter().map(|s| s.f1).sum::<f64>() / c as f64,
        overall_accuracy: ratio(trace, total),
        classes,
        total,
    })
}

/// Plain-text report: the confusion matrix with row percentages and counts,
/// then precision, recall and F1 rows, all in percent.
pub fn text_report(cm: &ConfusionMatrix, m: &Metrics) -> String {
    let width = cm
        .class_names
        .iter()
        .map(String::len)
        .chain([9, 18])
        .max()
        .unwrap_or(18)
        + 2;
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Classes");
    for name in &cm.class_names {
        let _ = write!(out, "{name:>width$}");
    }
    out.push('\n');
    for (k, row) in cm.counts.iter().enumerate() {
        let support = m.classes[k].support;
        let _ = write!(out, "{:<width$}", cm.class_names[k]);
        for &n in row {
            let cell = format!("{:.1} ({n})", 100.0 * ratio(n, support));
            let _ = write!(out, "{cell:>width$}");
        }
        out.push('\n');
    }
    for (label, get) in [
        ("Precision", (|s: &ClassScores| s.precision) as fn(&ClassScores) -> f64),
        ("Recall", |s| s.recall),
        ("F1 score", |s| s.f1),
    ] {
        let _ = write!(out, "{label:<width$}");
        for s in &m.classes {
            let _ = write!(out, "{:>width$}", format!("{:.1}", 100.0 * get(s)));
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "OA {:.1}  Avg. F1 {:.1}  points {}",
        100.0 * m.overall_accuracy,
        100.0 * m.avg_f1,
        m.total
    );
    for s in &m.classes {
        if s.no_support {
            let _ = writeln!(out, "note: class {} has no reference points", s.name);
        }
        if s.no_predictions {
            let _ = writeln!(out, "note: class {} was never predicted", s.name);
        }
    }
    out
}

/// Per-class CSV followed by `overall` and `avg_f1` rows; scores are fractions.
pub fn csv_report(m: &Metrics) -> String {
    let mut out = String::from("class,precision,recall,f1,support,predicted,flags\n");
    for s in &m.classes {
        let mut flags = Vec::new();
        if s.no_support {
            flags.push("no_support");
        }
        if s.no_predictions {
            flags.push("no_predictions");
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.name,
            s.precision,
            s.recall,
            s.f1,
            s.support,
            s.predicted,
            flags.join("|")
        );
    }
    let _ = writeln!(out, "overall_accuracy,,,{},{},,", m.overall_accuracy, m.total);
    let _ = writeln!(out, "avg_f1,,,{},,,", m.avg_f1);
    out
}

/// 1 where the prediction disagrees with the reference.
pub fn error_map(reference: &[usize], predicted: &[usize]) -> Result<Vec<usize>> {
    if reference.len() != predicted.len() {
        return Err(Error::dim("error map", &[reference.len()], &[predicted.len()]));
    }
    Ok(reference
        .iter()
        .zip(predicted)
        .map(|(r, p)| (r != p) as usize)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_fixture() -> ConfusionMatrix {
        let names = [
            "power",
            "low_veg",
            "imp_surf",
            "car",
            "fence_hedge",
            "roof",
            "fac",
            "shrub",
            "tree",
        ];
        let counts = vec![
            vec![542, 1, 0, 0, 0, 28, 2, 2, 25],
            vec![0, 88357, 6470, 73, 106, 452, 104, 2767, 361],
            vec![0, 2279, 99225, 114, 48, 126, 27, 145, 22],
            vec![0, 70, 40, 3344, 28, 58, 20, 138, 10],
            vec![0, 683, 136, 122, 3047, 132, 91, 2109, 1102],
            vec![75, 361, 97, 5, 52, 105750, 414, 1045, 1249],
            vec![10, 912, 99, 121, 33, 1548, 6963, 787, 751],
            vec![1, 2882, 141, 132, 309, 653, 275, 18353, 2072],
            vec![10, 1174, 16, 35, 142, 882, 356, 3761, 47850],
        ];
        ConfusionMatrix::from_counts(names.iter().map(|s| s.to_string()).collect(), counts).unwrap()
    }

    fn pct(v: f64) -> f64 {
        100.0 * v
    }

    #[test]
    fn published_matrix_scores() {
        let m = metrics(&table_fixture()).unwrap();
        let power = &m.classes[0];
        assert!((pct(power.precision) - 85.0).abs() <= 0.05);
        assert!((pct(power.recall) - 90.3).abs() <= 0.05);
        assert!((pct(power.f1) - 87.6).abs() <= 0.05);
        assert!((pct(m.overall_accuracy) - 90.7).abs() <= 0.05);
        let precision = [85.0, 91.4, 93.4, 84.7, 80.9, 96.5, 84.4, 63.1, 89.5];
        let f1s = [87.6, 90.4, 95.3, 87.4, 54.5, 96.7, 71.5, 68.1, 88.9];
        for (k, s) in m.classes.iter().enumerate() {
            assert!((pct(s.precision) - precision[k]).abs() <= 0.05, "{}", s.name);
            assert!((pct(s.f1) - f1s[k]).abs() <= 0.05, "{}", s.name);
        }
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::with_classes(3).unwrap();
        let labels = [0, 1, 2, 0, 1, 2];
        cm.accumulate(&labels, &labels).unwrap();
        assert_eq!(cm.counts(), &[vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 2]]);
        let m = metrics(&cm).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        assert_eq!(m.avg_f1, 1.0);
        assert!(m.classes.iter().all(|s| s.precision == 1.0 && s.recall == 1.0));
    }

    #[test]
    fn single_pair_single_cell() {
        let mut cm = ConfusionMatrix::with_classes(4).unwrap();
        cm.accumulate(&[2], &[1]).unwrap();
        let nonzero: Vec<_> = cm.counts().iter().flatten().filter(|&&v| v != 0).collect();
        assert_eq!(nonzero, [&1]);
        assert_eq!(cm.counts()[2][1], 1);
    }

    #[test]
    fn out_of_range_label_reports_position() {
        let mut cm = ConfusionMatrix::with_classes(2).unwrap();
        match cm.accumulate(&[0, 1, 0], &[0, 5, 0]) {
            Err(Error::LabelOutOfRange {
                index: 1,
                label: 5,
                classes: 2,
            }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn empty_matrix_rejected_and_absent_classes_flagged() {
        let cm = ConfusionMatrix::with_classes(2).unwrap();
        assert!(metrics(&cm).is_err());
        let mut cm = ConfusionMatrix::with_classes(3).unwrap();
        cm.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let m = metrics(&cm).unwrap();
        assert!(m.classes[2].no_support && m.classes[2].no_predictions);
        assert_eq!(m.classes[2].f1, 0.0);
        assert!((m.avg_f1 - (m.classes[0].f1 + m.classes[1].f1) / 3.0).abs() < 1e-15);
        let report = text_report(&cm, &m);
        assert!(report.contains("class 2 has no reference points"));
        assert!(csv_report(&m)
            .lines()
            .nth(3)
            .unwrap()
            .ends_with("no_support|no_predictions"));
    }

    #[test]
    fn error_map_marks_mismatches() {
        assert_eq!(error_map(&[0, 1, 2], &[0, 2, 2]).unwrap(), [0, 1, 0]);
        assert!(error_map(&[0], &[]).is_err());
    }

    #[test]
    fn report_mirrors_table_layout() {
        let cm = table_fixture();
        let text = text_report(&cm, &metrics(&cm).unwrap());
        assert!(text.contains("90.3 (542)"));
        assert!(text.contains("OA 90.7"));
    }

    fn labels(c: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec((0..c, 0..c), 1..200).prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn split_accumulation_matches_whole((r, p) in labels(5), cut in 0usize..200) {
            let cut = cut.min(r.len());
            let mut whole = ConfusionMatrix::with_classes(5).unwrap();
            whole.accumulate(&r, &p).unwrap();
            let mut a = ConfusionMatrix::with_classes(5).unwrap();
            a.accumulate(&r[..cut], &p[..cut]).unwrap();
            let mut b = ConfusionMatrix::with_classes(5).unwrap();
            b.accumulate(&r[cut..], &p[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, whole);
        }

        #[test]
        fn relabeling_permutes_metrics((r, p) in labels(4), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
            let mut cm = ConfusionMatrix::with_classes(4).unwrap();
            cm.accumulate(&r, &p).unwrap();
            let rp: Vec<usize> = r.iter().map(|&l| perm[l]).collect();
            let pp: Vec<usize> = p.iter().map(|&l| perm[l]).collect();
            let mut permuted = ConfusionMatrix::with_classes(4).unwrap();
            permuted.accumulate(&rp, &pp).unwrap();
            let (m, mp) = (metrics(&cm).unwrap(), metrics(&permuted).unwrap());
            for (a, &pk) in m.classes.iter().zip(&perm) {
                let b = &mp.classes[pk];
                prop_assert_eq!((a.precision, a.recall, a.f1), (b.precision, b.recall, b.f1));
            }
            prop_assert_eq!(m.overall_accuracy, mp.overall_accuracy);
            prop_assert!((m.avg_f1 - mp.avg_f1).abs() < 1e-12);
        }

        #[test]
        fn accuracy_is_support_weighted_recall((r, p) in labels(6)) {
            let mut cm = ConfusionMatrix::with_classes(6).unwrap();
            cm.accumulate(&r, &p).unwrap();
            let m = metrics(&cm).unwrap();
            let weighted: f64 = m.classes.iter().map(|s| s.recall * s.support as f64).sum::<f64>() / m.total as f64;
            prop_assert!((weighted - m.overall_accuracy).abs() < 1e-12);
            for s in &m.classes {
                for v in [s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert_eq!(f1(s.precision, s.recall), f1(s.recall, s.precision));
            }
        }
    }
}
