//! Class-frequency loss weights and heuristic cropping: random training
//! windows are only accepted when they cover a marked irregular region.

use rand::Rng;

use crate::qrs::MarkedRegions;
use crate::record::{Dataset, EcgRecord, Label, NUM_LABELS};

/// Default crop length in samples (8.192 s at 500 Hz).
pub const DEFAULT_CROP_LEN: usize = 4096;
/// Uniform draws tried before a covering window is built directly.
pub const MAX_REJECTIONS: usize = 100;
/// Minimum window overlap for regions longer than the window.
pub const LONG_REGION_OVERLAP: f64 = 0.9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("no positive records for class {0}")]
    ZeroCount(Label),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("record of {n} samples shorter than crop length {length}")]
    RecordTooShort { n: usize, length: usize },
}

/// Positive-label weights, aligned with [`Label::ALL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights(pub [f64; NUM_LABELS]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; NUM_LABELS])
    }

    pub fn get(&self, label: Label) -> f64 {
        self.0[label.index()]
    }
}

/// `w_i = T / (9 c_i)`; fails if any class has no positives.
pub fn class_weights(dataset: &Dataset) -> Result<ClassWeights, AugmentError> {
    weights_from_counts(&dataset.label_counts(), dataset.len())
}

pub fn weights_from_counts(counts: &[usize; NUM_LABELS], total: usize) -> Result<ClassWeights, AugmentError> {
    if total == 0 {
        return Err(AugmentError::EmptyDataset);
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(AugmentError::ZeroCount(Label::ALL[i]));
    }
    let k = NUM_LABELS as f64;
    Ok(ClassWeights(counts.map(|c| total as f64 / (k * c as f64))))
}

/// Like [`class_weights`] over the K classes that occur: `w_i = T / (K c_i)`
/// for present classes, 1 for absent ones (they only ever see negative
/// targets, which are unweighted). Equal to [`class_weights`] when all nine
/// classes occur.
pub fn class_weights_present(dataset: &Dataset) -> Result<ClassWeights, AugmentError> {
    present_weights_from_counts(&dataset.label_counts(), dataset.len())
}

pub fn present_weights_from_counts(counts: &[usize; NUM_LABELS], total: usize) -> Result<ClassWeights, AugmentError> {
    if total == 0 {
        return Err(AugmentError::EmptyDataset);
    }
    let k = counts.iter().filter(|&&c| c > 0).count() as f64;
    let t = total as f64;
    Ok(ClassWeights(counts.map(|c| if c == 0 { 1.0 } else { t / (k * c as f64) })))
}

/// A crop `[start, start + length)` inside a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub start: usize,
    pub length: usize,
}

impl CropWindow {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    /// Whether the window counts as covering region `[s, e)`.
    pub fn covers(&self, [s, e]: [usize; 2]) -> bool {
        if e - s > self.length {
            let overlap = self.end().min(e).saturating_sub(self.start.max(s));
            overlap as f64 >= LONG_REGION_OVERLAP * self.length as f64
        } else {
            self.start <= s && e <= self.end()
        }
    }

    /// Acceptance predicate for heuristic cropping.
    pub fn accepts(&self, regions: &MarkedRegions) -> bool {
        regions.is_empty() || regions.intervals().iter().any(|&r| self.covers(r))
    }
}

/// Draws a training window. Without regions the start is uniform; otherwise
/// uniform windows are rejection-sampled until one covers a region, and after
/// [`MAX_REJECTIONS`] misses a covering window around a random region is
/// built directly.
pub fn mark_and_crop<R: Rng + ?Sized>(
    regions: &MarkedRegions,
    length: usize,
    rng: &mut R,
) -> Result<CropWindow, AugmentError> {
    let n = regions.n_samples();
    if n < length || length == 0 {
        return Err(AugmentError::RecordTooShort { n, length });
    }
    let max_start = n - length;
    let uniform = |rng: &mut R| CropWindow { start: rng.random_range(0..=max_start), length };
    if regions.is_empty() {
        return Ok(uniform(rng));
    }
    for _ in 0..MAX_REJECTIONS {
        let w = uniform(rng);
        if w.accepts(regions) {
            return Ok(w);
        }
    }
    let [s, e] = regions.intervals()[rng.random_range(0..regions.len())];
    let (lo, hi) = if e - s <= length {
        (e.saturating_sub(length), s.min(max_start))
    } else {
        let slack = length - (LONG_REGION_OVERLAP * length as f64).ceil() as usize;
        (s.saturating_sub(slack), (e + slack).saturating_sub(length).min(max_start))
    };
    let w = CropWindow { start: rng.random_range(lo..=hi.max(lo)), length };
    debug_assert!(w.covers([s, e]));
    Ok(w)
}

/// Window used when heuristic cropping is off.
pub fn random_crop<R: Rng + ?Sized>(n: usize, length: usize, rng: &mut R) -> Result<CropWindow, AugmentError> {
    mark_and_crop(&MarkedRegions::empty(n), length, rng)
}

/// Right-pads with zeros or centre-crops to `length` samples.
pub fn pad_or_crop(record: &EcgRecord, length: usize) -> EcgRecord {
    let n = record.n_samples();
    match n.cmp(&length) {
        std::cmp::Ordering::Equal => record.clone(),
        std::cmp::Ordering::Greater => record.window((n - length) / 2, length).expect("window inside record"),
        std::cmp::Ordering::Less => record
            .map_leads(|_, lead| {
                let mut v = lead.to_vec();
                v.resize(length, 0.0);
                v
            })
            .expect("padding keeps record valid"),
    }
}
