//! Hand-crafted beat and signal features fed to the classifier head next to
//! the pooled convolutional activations.

use serde::{Deserialize, Serialize};

use crate::qrs::Fiducials;
use crate::record::{EcgRecord, LEAD_NAMES, NUM_LEADS};

pub const NUM_FEATURES: usize = 20;

/// Slots of the beat statistics; the per-lead standard deviations follow.
pub const QRS_MEAN: usize = 0;
pub const QRS_STD: usize = 1;
pub const PR_MEAN: usize = 2;
pub const PR_STD: usize = 3;
pub const RR_MEAN: usize = 4;
pub const RR_STD: usize = 5;
pub const RR_RMSSD: usize = 6;
pub const P_ABSENT: usize = 7;
pub const LEAD_STD: usize = 8;

const BEAT_COLUMNS: [&str; LEAD_STD] =
    ["qrs_mean_ms", "qrs_std_ms", "pr_mean_ms", "pr_std_ms", "rr_mean_ms", "rr_std_ms", "rr_rmssd_ms", "p_absent_frac"];

/// Column names in feature order (`std_I` .. `std_V6` for the leads).
pub fn feature_names() -> Vec<String> {
    BEAT_COLUMNS.iter().map(|s| s.to_string()).chain(LEAD_NAMES.iter().map(|l| format!("std_{l}"))).collect()
}

/// Raw feature values. A value that could not be measured is stored as 0
/// with `valid = false`; standardization maps it to 0 as well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    pub valid: [bool; NUM_FEATURES],
}

impl Default for FeatureVector {
    fn default() -> Self {
        Self { values: [0.0; NUM_FEATURES], valid: [false; NUM_FEATURES] }
    }
}

impl FeatureVector {
    fn set(&mut self, slot: usize, v: Option<f64>) {
        if let Some(v) = v.filter(|v| v.is_finite()) {
            self.values[slot] = v;
            self.valid[slot] = true;
        }
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Population standard deviation.
fn std(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
}

/// Features of `record` given its fiducials. Beat statistics need at least
/// two beats; per-lead standard deviations always come from the full
/// signal.
pub fn extract_features(record: &EcgRecord, fid: &Fiducials) -> FeatureVector {
    let mut f = FeatureVector::default();
    let ms = 1000.0 / record.sample_rate_hz() as f64;

    let mut beats: Vec<_> = fid.beats.iter().collect();
    beats.sort_by_key(|b| b.r_peak);
    if beats.len() >= 2 {
        let qrs: Vec<f64> = beats.iter().map(|b| b.qrs_width() as f64 * ms).collect();
        let pr: Vec<f64> = beats.iter().filter_map(|b| b.pr()).map(|p| p as f64 * ms).collect();
        let rr: Vec<f64> = beats.windows(2).map(|w| (w[1].r_peak - w[0].r_peak) as f64 * ms).collect();
        let succ: Vec<f64> = rr.windows(2).map(|w| (w[1] - w[0]).powi(2)).collect();

        f.set(QRS_MEAN, mean(&qrs));
        f.set(QRS_STD, std(&qrs));
        f.set(PR_MEAN, mean(&pr));
        f.set(PR_STD, std(&pr));
        f.set(RR_MEAN, mean(&rr));
        f.set(RR_STD, std(&rr));
        f.set(RR_RMSSD, mean(&succ).map(f64::sqrt));
        f.set(P_ABSENT, Some((beats.len() - pr.len()) as f64 / beats.len() as f64));
    }
    for (lead, x) in record.leads().enumerate() {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        f.set(LEAD_STD + lead, std(&x));
    }
    debug_assert_eq!(LEAD_STD + NUM_LEADS, NUM_FEATURES);
    f
}

/// Per-feature mean and standard deviation over a training set, using only
/// valid entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self { mean: [0.0; NUM_FEATURES], std: [1.0; NUM_FEATURES] }
    }
}

impl Standardizer {
    pub fn fit<'a, I: IntoIterator<Item = &'a FeatureVector>>(vectors: I) -> Self {
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); NUM_FEATURES];
        for v in vectors {
            for (j, col) in cols.iter_mut().enumerate() {
                if v.valid[j] {
                    col.push(v.values[j]);
                }
            }
        }
        let mut out = Self::default();
        for (j, col) in cols.iter().enumerate() {
            out.mean[j] = mean(col).unwrap_or(0.0);
            // Constant columns carry no information; keep them at 0.
            out.std[j] = std(col).filter(|s| *s > 1e-12).unwrap_or(1.0);
        }
        out
    }

    /// Standardized values; missing measurements become 0.
    pub fn apply(&self, v: &FeatureVector) -> [f64; NUM_FEATURES] {
        std::array::from_fn(|j| if v.valid[j] { (v.values[j] - self.mean[j]) / self.std[j] } else { 0.0 })
    }
}
