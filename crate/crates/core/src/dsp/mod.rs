//! Signal conditioning: wavelet denoising and band-pass filtering.

mod filter;
mod wavelet;

pub use filter::{bandpass, BandPass, EDGE_ORDER};
pub use wavelet::{band_len, db4_hi, dwt_forward, dwt_inverse, WaveletCoeffs, DB4_LO};

use crate::record::{EcgRecord, RecordError};

/// Decomposition depth used by [`denoise`]. At 500 Hz the level-8
/// approximation spans roughly 0-1 Hz.
pub const DENOISE_LEVELS: usize = 8;

/// Median absolute deviation to Gaussian sigma.
const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DspError {
    #[error("signal of length {len} too short for {levels} decomposition levels")]
    SignalTooShort { len: usize, levels: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("corrupted wavelet coefficients: {0}")]
    CorruptCoefficients(String),
    #[error("invalid band {lo_hz}-{hi_hz} Hz at fs={fs_hz} Hz")]
    InvalidBand { lo_hz: f64, hi_hz: f64, fs_hz: f64 },
    #[error(transparent)]
    Record(#[from] RecordError),
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_unstable_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Baseline median windows (two-stage median filter), in seconds.
const BASELINE_WINDOWS_S: [f64; 2] = [0.2, 0.6];

/// Denoises one lead: soft-thresholds all detail bands with the universal
/// threshold `sigma * sqrt(2 ln N)` (sigma from the finest band's MAD) and
/// zeroes the deepest approximation band to drop baseline wander.
///
/// At 500 Hz the level-8 approximation (0-1 Hz) also holds a sizeable share
/// of the beat itself (heart rates sit near 1 Hz), so zeroing it alone bends
/// the isoelectric line by ~0.1 mV under each beat. The band is therefore
/// refilled with the approximation of the median-detrended lead: the
/// two-stage median filter tracks wander but not the beats.
pub fn denoise_lead(signal: &[f64], fs: f64, levels: usize) -> Result<Vec<f64>, DspError> {
    if fs.is_nan() || fs <= 0.0 {
        return Err(DspError::InvalidParameter(format!("sample rate {fs}")));
    }
    let mut coeffs = dwt_forward(signal, levels)?;
    let mut finest: Vec<f64> = coeffs.details()[0].iter().map(|v| v.abs()).collect();
    let sigma = median(&mut finest) / MAD_TO_SIGMA;
    let threshold = sigma * (2.0 * (signal.len() as f64).ln()).sqrt();
    for band in coeffs.details_mut() {
        for v in band.iter_mut() {
            *v = soft_threshold(*v, threshold);
        }
    }
    coeffs.approximation_mut().fill(0.0);
    let mut out = dwt_inverse(&coeffs)?;

    let mut baseline = signal.to_vec();
    for w in BASELINE_WINDOWS_S {
        baseline = median_filter(&baseline, (w * fs).round() as usize | 1);
    }
    let detrended: Vec<f64> = signal.iter().zip(&baseline).map(|(x, b)| x - b).collect();
    let mut low = dwt_forward(&detrended, levels)?;
    low.details_mut().iter_mut().for_each(|band| band.fill(0.0));
    out.iter_mut().zip(dwt_inverse(&low)?).for_each(|(v, l)| *v += l);
    Ok(out)
}

/// Centered running median with the window truncated at the edges.
pub fn median_filter(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = x.len();
    // Sorted copy of the current window, updated one sample at a time.
    let mut sorted: Vec<f64> = x[..half.min(n)].to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = |s: &[f64], v: f64| s.binary_search_by(|p| p.total_cmp(&v)).unwrap_or_else(|e| e);
    (0..n)
        .map(|i| {
            if i + half < n {
                let v = x[i + half];
                sorted.insert(pos(&sorted, v), v);
            }
            if i > half {
                let v = x[i - half - 1];
                sorted.remove(pos(&sorted, v));
            }
            sorted[sorted.len() / 2]
        })
        .collect()
}

/// Applies [`denoise_lead`] to every lead at [`DENOISE_LEVELS`].
pub fn denoise(record: &EcgRecord) -> Result<EcgRecord, DspError> {
    denoise_with_levels(record, DENOISE_LEVELS)
}

pub fn denoise_with_levels(record: &EcgRecord, levels: usize) -> Result<EcgRecord, DspError> {
    let leads: Vec<&[f32]> = record.leads().collect();
    let rows = crate::par::map_collect(&leads, |lead| {
        let x: Vec<f64> = lead.iter().map(|&v| v as f64).collect();
        denoise_lead(&x, record.sample_rate_hz() as f64, levels)
            .map(|y| y.into_iter().map(|v| v as f32).collect::<Vec<f32>>())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(EcgRecord::from_leads(record.id(), record.sample_rate_hz(), &rows)?)
}
