//! Per-label confusion counts, F1 and the 9-label macro average used by the
//! competition, plus a Table-style report.

use std::fmt::Write as _;

use crate::record::{Label, LabelVector, NUM_LABELS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {truths} ground-truth vectors")]
    LengthMismatch { preds: usize, truths: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// F1 with the zero-denominator convention (0).
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp == 0 || self.tp + self.fn_ == 0 {
            return 0.0;
        }
        let p = self.tp as f64 / (self.tp + self.fp) as f64;
        let r = self.tp as f64 / (self.tp + self.fn_) as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Whether the label occurs in predictions or truth at all.
    pub fn is_present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts(pub [Counts; NUM_LABELS]);

impl ConfusionCounts {
    pub fn label(&self, label: Label) -> Counts {
        self.0[label.index()]
    }
}

pub fn confusion(preds: &[LabelVector], truths: &[LabelVector]) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    let mut out = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        for (c, (p, t)) in out.0.iter_mut().zip(p.flags().into_iter().zip(t.flags())) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(out)
}

pub fn f1_per_label(counts: &ConfusionCounts) -> [f64; NUM_LABELS] {
    counts.0.map(|c| c.f1())
}

/// Unweighted mean of per-label F1 scores.
pub fn macro_f1(per_label: &[f64]) -> f64 {
    if per_label.is_empty() {
        return 0.0;
    }
    per_label.iter().sum::<f64>() / per_label.len() as f64
}

/// Macro F1 over the labels that occur in predictions or truth. On data
/// covering only some classes the plain 9-label mean is capped below 1
/// (absent labels score 0 by convention); this variant is what training
/// monitors and the synthetic checks report.
pub fn macro_f1_present(counts: &ConfusionCounts) -> f64 {
    let present: Vec<f64> = counts.0.iter().filter(|c| c.is_present()).map(|c| c.f1()).collect();
    macro_f1(&present)
}

/// One column of per-label F1 scores plus its average, laid out like the
/// incremental-development ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub counts: ConfusionCounts,
    pub f1: [f64; NUM_LABELS],
    pub average: f64,
    pub average_present: f64,
}

impl Report {
    pub fn new(counts: ConfusionCounts) -> Self {
        let f1 = f1_per_label(&counts);
        Self { counts, f1, average: macro_f1(&f1), average_present: macro_f1_present(&counts) }
    }

    pub fn from_predictions(preds: &[LabelVector], truths: &[LabelVector]) -> Result<Self, MetricsError> {
        Ok(Self::new(confusion(preds, truths)?))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,tp,fp,tn,fn,f1\n");
        for (label, c) in Label::ALL.iter().zip(&self.counts.0) {
            let _ = writeln!(s, "{},{},{},{},{},{:.3}", label.name(), c.tp, c.fp, c.tn, c.fn_, c.f1());
        }
        let _ = writeln!(s, "Average,,,,,{:.3}", self.average);
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<8} {:>5} {:>5} {:>5} {:>5} {:>6}\n", "Label", "TP", "FP", "TN", "FN", "F1");
        for (label, c) in Label::ALL.iter().zip(&self.counts.0) {
            let _ = writeln!(s, "{:<8} {:>5} {:>5} {:>5} {:>5} {:>6.3}", label.name(), c.tp, c.fp, c.tn, c.fn_, c.f1());
        }
        let _ = writeln!(s, "{:<8} {:>29.3}", "Average", self.average);
        let _ = writeln!(s, "{:<8} {:>29.3}", "Present", self.average_present);
        s
    }
}
