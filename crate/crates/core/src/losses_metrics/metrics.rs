use serde::Serialize;

/// Confusion counts and scores of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 for every class id below `n_classes`.
/// Undefined ratios (zero denominator) are reported as 0.
///
/// Panics if a label is `>= n_classes`.
pub fn precision_recall_per_class(truth: &[usize], pred: &[usize], n_classes: usize) -> Vec<ClassStats> {
    assert_eq!(truth.len(), pred.len(), "truth and prediction lengths differ");
    let mut stats = vec![ClassStats::default(); n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        assert!(t < n_classes && p < n_classes, "label out of range");
        stats[t].support += 1;
        if t == p {
            stats[t].tp += 1;
        } else {
            stats[p].fp += 1;
            stats[t].fn_ += 1;
        }
    }
    for s in &mut stats {
        s.precision = ratio(s.tp, s.tp + s.fp);
        s.recall = ratio(s.tp, s.tp + s.fn_);
        let d = s.precision + s.recall;
        s.f1 = if d == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / d };
    }
    stats
}

/// Mean of per-class F1 over all `n_classes` classes.
pub fn f1_macro(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    if n_classes == 0 {
        return 0.0;
    }
    let stats = precision_recall_per_class(truth, pred, n_classes);
    stats.iter().map(|s| s.f1).sum::<f64>() / n_classes as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassReport {
    pub label: String,
    #[serde(flatten)]
    pub stats: ClassStats,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadReport {
    pub level: String,
    pub n_classes: usize,
    pub macro_f1: f64,
    pub classes: Vec<ClassReport>,
}

impl HeadReport {
    pub fn new(level: impl Into<String>, labels: &[String], truth: &[usize], pred: &[usize]) -> Self {
        let stats = precision_recall_per_class(truth, pred, labels.len());
        let macro_f1 = if labels.is_empty() {
            0.0
        } else {
            stats.iter().map(|s| s.f1).sum::<f64>() / labels.len() as f64
        };
        Self {
            level: level.into(),
            n_classes: labels.len(),
            macro_f1,
            classes: labels
                .iter()
                .zip(stats)
                .map(|(l, stats)| ClassReport {
                    label: l.clone(),
                    stats,
                })
                .collect(),
        }
    }
}

/// Evaluation of all four heads. Field order is fixed, so the JSON form is
/// byte-stable.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_macro_f1: f64,
    pub heads: Vec<HeadReport>,
}

impl EvalReport {
    pub fn new(samples: usize, heads: Vec<HeadReport>) -> Self {
        let mean_macro_f1 = if heads.is_empty() {
            0.0
        } else {
            heads.iter().map(|h| h.macro_f1).sum::<f64>() / heads.len() as f64
        };
        Self {
            samples,
            mean_macro_f1,
            heads,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
