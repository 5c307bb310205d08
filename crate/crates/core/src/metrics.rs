//! Macro-F1 and per-class diagnostics for multi-label predictions.
//!
//! Wherever a ratio has a zero denominator (a class that is neither
//! predicted nor present, or never predicted) it is defined as 0.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// A `rows x classes` boolean matrix of label assignments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    rows: usize,
    classes: usize,
    bits: Vec<bool>,
}

impl LabelMatrix {
    pub fn new(rows: usize, classes: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * classes {
            return Err(Error::dim(format!(
                "{} label bits for a {rows} x {classes} matrix",
                bits.len()
            )));
        }
        Ok(Self { rows, classes, bits })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::dim("label rows have differing lengths"));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    /// Multi-hot rows from label sets.
    pub fn from_label_sets<'a>(sets: impl IntoIterator<Item = &'a [usize]>, classes: usize) -> Result<Self> {
        let mut bits = Vec::new();
        let mut rows = 0;
        for set in sets {
            let mut row = vec![false; classes];
            for &c in set {
                *row.get_mut(c)
                    .ok_or_else(|| Error::dim(format!("class {c} out of range for {classes} classes")))? = true;
            }
            bits.extend(row);
            rows += 1;
        }
        Self::new(rows, classes, bits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, class: usize) -> bool {
        self.bits[row * self.classes + class]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.classes..(row + 1) * self.classes]
    }

    /// Positive class ids of one row, ascending.
    pub fn row_labels(&self, row: usize) -> Vec<usize> {
        self.row(row)
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            ..self.clone()
        }
    }
}

/// Thresholds probabilities `[B, C]`: positive iff `p >= threshold`.
pub fn binarize<T: Element>(probabilities: &Tensor<T>, threshold: f64) -> Result<LabelMatrix> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let [b, c] = probabilities.dims2("binarize")?;
    let mut bits = Vec::with_capacity(b * c);
    for &p in probabilities.data() {
        let p = p.as_f64();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
        }
        bits.push(p >= threshold);
    }
    LabelMatrix::new(b, c, bits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class confusion counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn tally(preds: &LabelMatrix, targets: &LabelMatrix) -> Result<Self> {
        if (preds.rows, preds.classes) != (targets.rows, targets.classes) {
            return Err(Error::dim(format!(
                "predictions are {} x {} but targets are {} x {}",
                preds.rows, preds.classes, targets.rows, targets.classes
            )));
        }
        let mut per_class = vec![ClassCounts::default(); preds.classes];
        for (k, (&p, &t)) in preds.bits.iter().zip(&targets.bits).enumerate() {
            let c = &mut per_class[k % preds.classes];
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(Self { per_class })
    }

    pub fn macro_f1(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.iter().map(ClassCounts::f1).sum::<f64>() / self.per_class.len() as f64
    }
}

/// Unweighted mean over classes of `2tp / (2tp + fp + fn)`.
pub fn macro_f1(preds: &LabelMatrix, targets: &LabelMatrix) -> Result<f64> {
    if preds.classes == 0 {
        return Err(Error::dim("macro F1 needs at least one class"));
    }
    Ok(ConfusionCounts::tally(preds, targets)?.macro_f1())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of positive targets.
    pub support: u64,
    pub predicted: u64,
}

pub fn per_class_report(preds: &LabelMatrix, targets: &LabelMatrix) -> Result<Vec<ClassReport>> {
    let counts = ConfusionCounts::tally(preds, targets)?;
    Ok(counts
        .per_class
        .iter()
        .enumerate()
        .map(|(class, c)| ClassReport {
            class,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            support: c.tp + c.fn_,
            predicted: c.tp + c.fp,
        })
        .collect())
}

/// Renders a per-class report as CSV.
pub fn report_csv(report: &[ClassReport]) -> String {
    let mut s = String::from("class,precision,recall,f1,support,predicted\n");
    for r in report {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.class, r.precision, r.recall, r.f1, r.support, r.predicted
        ));
    }
    s
}
