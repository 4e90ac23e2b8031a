//! QRS detection (Pan-Tompkins style), beat delineation and marking of
//! irregular beats for heuristic cropping.
//!
//! The functions here expect a denoised record: refinement and delineation
//! read amplitudes directly from the signal.

use serde::Serialize;

use crate::dsp::{BandPass, DspError};
use crate::record::{EcgRecord, LEAD_II, LEAD_V2};

/// Variance below which a lead counts as flat (mV^2).
pub const FLAT_VARIANCE: f64 = 1e-6;
pub const REFRACTORY_MS: f64 = 200.0;
pub const INTEGRATION_MS: f64 = 150.0;
pub const REFINE_MS: f64 = 50.0;
pub const QRS_SEARCH_BEFORE_MS: f64 = 80.0;
pub const QRS_SEARCH_AFTER_MS: f64 = 120.0;
pub const P_SEARCH_MS: (f64, f64) = (300.0, 100.0);
pub const T_SEARCH_MS: (f64, f64) = (120.0, 420.0);
/// RR below this fraction of the median marks a premature beat.
pub const PREMATURE_FRACTION: f64 = 0.8;
pub const WIDE_QRS_MS: f64 = 120.0;
pub const REGION_PAD_MS: f64 = 250.0;

/// Minimum P amplitude (mV) for a P wave to count as present.
const P_MIN_MV: f64 = 0.06;
const T_MIN_MV: f64 = 0.05;
/// QRS boundary: envelope below this fraction of the local envelope peak.
const QRS_ENVELOPE_FRACTION: f64 = 0.08;
const ENVELOPE_SMOOTH_MS: f64 = 20.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QrsError {
    #[error("all leads are flat")]
    FlatSignal,
    #[error("record of {n} samples is shorter than the required {min}")]
    TooShort { n: usize, min: usize },
    #[error("need at least two R peaks, got {0}")]
    TooFewPeaks(usize),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Landmarks of one beat, as sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Beat {
    pub p_onset: Option<usize>,
    pub p_peak: Option<usize>,
    pub qrs_onset: usize,
    pub r_peak: usize,
    pub qrs_offset: usize,
    pub t_peak: Option<usize>,
    pub t_offset: Option<usize>,
}

impl Beat {
    fn indices(&self) -> impl Iterator<Item = usize> {
        [
            self.p_onset,
            self.p_peak,
            Some(self.qrs_onset),
            Some(self.r_peak),
            Some(self.qrs_offset),
            self.t_peak,
            self.t_offset,
        ]
        .into_iter()
        .flatten()
    }

    pub fn qrs_width(&self) -> usize {
        self.qrs_offset - self.qrs_onset
    }

    /// P onset to QRS onset, when a P wave was found.
    pub fn pr(&self) -> Option<usize> {
        self.p_onset.map(|p| self.qrs_onset - p)
    }

    /// Last landmark of the beat.
    pub fn end(&self) -> usize {
        self.t_offset.unwrap_or(self.qrs_offset)
    }
}

/// Per-beat landmarks for one record, sorted by R peak.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Fiducials {
    pub n_samples: usize,
    pub sample_rate_hz: u32,
    pub beats: Vec<Beat>,
}

impl Fiducials {
    /// Checks ordering within and across beats and bounds.
    pub fn is_valid(&self) -> bool {
        let in_beat = self.beats.iter().all(|b| {
            let idx: Vec<usize> = b.indices().collect();
            idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&i| i < self.n_samples)
        });
        in_beat && self.beats.windows(2).all(|w| w[0].r_peak < w[1].r_peak)
    }

    pub fn r_peaks(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r_peak).collect()
    }

    /// Beats whose R peak lies in `[start, end)`.
    pub fn within(&self, start: usize, end: usize) -> impl Iterator<Item = &Beat> {
        self.beats.iter().filter(move |b| b.r_peak >= start && b.r_peak < end)
    }

    /// Fiducials of the sub-record `[start, start + len)`: beats lying
    /// entirely inside it, re-indexed to the window.
    pub fn window(&self, start: usize, len: usize) -> Fiducials {
        let end = start + len;
        let shift = |i: usize| i - start;
        let beats = self
            .beats
            .iter()
            .filter(|b| b.indices().all(|i| i >= start && i < end))
            .map(|b| Beat {
                p_onset: b.p_onset.map(shift),
                p_peak: b.p_peak.map(shift),
                qrs_onset: shift(b.qrs_onset),
                r_peak: shift(b.r_peak),
                qrs_offset: shift(b.qrs_offset),
                t_peak: b.t_peak.map(shift),
                t_offset: b.t_offset.map(shift),
            })
            .collect();
        Fiducials {
            n_samples: len.min(self.n_samples.saturating_sub(start)),
            sample_rate_hz: self.sample_rate_hz,
            beats,
        }
    }
}

/// Sorted, disjoint `[start, end)` intervals inside `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct MarkedRegions {
    n_samples: usize,
    intervals: Vec<[usize; 2]>,
}

impl MarkedRegions {
    /// Merges overlapping or touching intervals and clips them to `[0, n)`.
    pub fn new<I: IntoIterator<Item = (i64, i64)>>(n_samples: usize, intervals: I) -> Self {
        Self { n_samples, intervals: crate::synth::merge_intervals(intervals, n_samples) }
    }

    pub fn empty(n_samples: usize) -> Self {
        Self { n_samples, intervals: Vec::new() }
    }

    pub fn intervals(&self) -> &[[usize; 2]] {
        &self.intervals
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_valid(&self) -> bool {
        self.intervals.iter().all(|iv| iv[0] < iv[1] && iv[1] <= self.n_samples)
            && self.intervals.windows(2).all(|w| w[0][1] < w[1][0])
    }
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

fn variance(x: &[f32]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Lead used for detection: II, else V2, else the first non-flat lead.
pub fn detection_lead(record: &EcgRecord) -> Result<usize, QrsError> {
    [LEAD_II, LEAD_V2]
        .into_iter()
        .chain(0..crate::record::NUM_LEADS)
        .find(|&l| variance(record.lead(l)) > FLAT_VARIANCE)
        .ok_or(QrsError::FlatSignal)
}

/// Centered moving average with a window of `w` samples.
fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let w = w.max(1);
    let half = w / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + w - half).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Band-pass, five-point derivative, squaring and 150 ms integration.
pub fn integrated_energy(x: &[f64], fs: f64) -> Result<Vec<f64>, QrsError> {
    let filtered = BandPass::new(5.0, 15.0, fs)?.apply(x);
    let n = filtered.len();
    let at = |i: isize| filtered[i.clamp(0, n as isize - 1) as usize];
    let squared: Vec<f64> = (0..n as isize)
        .map(|i| {
            let d = (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) / 8.0;
            d * d
        })
        .collect();
    Ok(moving_average(&squared, ms_to_samples(INTEGRATION_MS, fs)))
}

fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i] > x[i - 1] {
            // Walk across plateaus.
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                peaks.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    peaks
}

fn max_slope(x: &[f64], center: usize, half: usize) -> f64 {
    let lo = center.saturating_sub(half).max(1);
    let hi = (center + half).min(x.len() - 1);
    (lo..hi).map(|i| (x[i] - x[i - 1]).abs()).fold(0.0, f64::max)
}

/// Detects R peaks; returns sorted indices at least the refractory period
/// apart.
pub fn detect_r_peaks(record: &EcgRecord) -> Result<Vec<usize>, QrsError> {
    let fs = record.sample_rate_hz() as f64;
    let n = record.n_samples();
    let min = ms_to_samples(2000.0, fs);
    if n < min {
        return Err(QrsError::TooShort { n, min });
    }
    let lead = detection_lead(record)?;
    let x: Vec<f64> = record.lead(lead).iter().map(|&v| v as f64).collect();
    let mwi = integrated_energy(&x, fs)?;
    let refractory = ms_to_samples(REFRACTORY_MS, fs);
    let t_wave_window = ms_to_samples(360.0, fs);
    let slope_half = ms_to_samples(75.0, fs);

    let learn = &mwi[..min];
    let mut spki = 0.25 * learn.iter().cloned().fold(0.0, f64::max);
    let mut npki = 0.5 * learn.iter().sum::<f64>() / learn.len() as f64;
    let threshold = |s: f64, np: f64| np + 0.25 * (s - np);

    // Keep only maxima that dominate their half-refractory neighbourhood.
    let nms = refractory / 2;
    let candidates: Vec<usize> = local_maxima(&mwi)
        .into_iter()
        .filter(|&c| {
            let lo = c.saturating_sub(nms);
            let hi = (c + nms + 1).min(n);
            mwi[lo..hi].iter().all(|&v| v <= mwi[c])
        })
        .collect();
    let mut qrs: Vec<usize> = Vec::new();
    let mut last_slope = 0.0;
    let mut rr_recent: Vec<usize> = Vec::new();
    let mut pending_noise: Vec<usize> = Vec::new();

    for &c in &candidates {
        let th1 = threshold(spki, npki);
        let is_qrs = if let Some(&last) = qrs.last() {
            if c - last < refractory {
                false
            } else if mwi[c] > th1 {
                let slope = max_slope(&mwi, c, slope_half);
                // A late, shallow candidate right after a beat is a T wave.
                !(c - last < t_wave_window && slope < 0.5 * last_slope)
            } else {
                false
            }
        } else {
            mwi[c] > th1
        };

        if is_qrs {
            if let Some(&last) = qrs.last() {
                rr_recent.push(c - last);
                if rr_recent.len() > 8 {
                    rr_recent.remove(0);
                }
            }
            spki = 0.125 * mwi[c] + 0.875 * spki;
            last_slope = max_slope(&mwi, c, slope_half);
            qrs.push(c);
            pending_noise.clear();
        } else {
            npki = 0.125 * mwi[c] + 0.875 * npki;
            pending_noise.push(c);
            // Search back for a missed beat after a long gap.
            if let (Some(&last), false) = (qrs.last(), rr_recent.is_empty()) {
                let rr_avg = rr_recent.iter().sum::<usize>() as f64 / rr_recent.len() as f64;
                if (c - last) as f64 > 1.66 * rr_avg {
                    let th2 = 0.5 * threshold(spki, npki);
                    let best = pending_noise
                        .iter()
                        .copied()
                        .filter(|&p| p - last >= refractory && p < c && mwi[p] > th2)
                        .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                    if let Some(p) = best {
                        spki = 0.25 * mwi[p] + 0.75 * spki;
                        rr_recent.push(p - last);
                        qrs.push(p);
                        pending_noise.retain(|&q| q > p);
                    }
                }
            }
        }
    }
    qrs.sort_unstable();

    // Refine onto the largest deflection of the signal itself.
    let half = ms_to_samples(REFINE_MS, fs);
    let mut refined: Vec<usize> = qrs
        .iter()
        .map(|&c| {
            let lo = c.saturating_sub(half);
            let hi = (c + half + 1).min(n);
            (lo..hi).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).unwrap_or(c)
        })
        .collect();
    refined.sort_unstable();
    let mut out: Vec<usize> = Vec::with_capacity(refined.len());
    for r in refined {
        match out.last_mut() {
            Some(last) if r - *last < refractory => {
                if x[r].abs() > x[*last].abs() {
                    *last = r;
                }
            }
            _ => out.push(r),
        }
    }
    Ok(out)
}

/// Smoothed multi-lead slope envelope used to bracket QRS complexes.
pub fn slope_envelope(record: &EcgRecord) -> Vec<f64> {
    let n = record.n_samples();
    let mut energy = vec![0.0; n];
    for lead in record.leads() {
        for i in 1..n.saturating_sub(1) {
            let d = (lead[i + 1] - lead[i - 1]) as f64 * 0.5;
            energy[i] += d * d;
        }
    }
    let fs = record.sample_rate_hz() as f64;
    moving_average(&energy, ms_to_samples(ENVELOPE_SMOOTH_MS, fs)).into_iter().map(f64::sqrt).collect()
}

/// Locates P, QRS and T landmarks around each R peak.
pub fn delineate(record: &EcgRecord, r_peaks: &[usize]) -> Fiducials {
    let n = record.n_samples();
    let fs_hz = record.sample_rate_hz();
    let fs = fs_hz as f64;
    let mut fid = Fiducials { n_samples: n, sample_rate_hz: fs_hz, beats: Vec::new() };
    if n < 3 || r_peaks.is_empty() {
        return fid;
    }
    let env = slope_envelope(record);
    let mut x: Vec<f64> = record.lead(LEAD_II).iter().map(|&v| v as f64).collect();
    // Measure P and T against the isoelectric (median) level.
    let iso = median(x.clone());
    x.iter_mut().for_each(|v| *v -= iso);
    let ms = |v: f64| ms_to_samples(v, fs);

    let mut peaks: Vec<usize> = r_peaks.iter().copied().filter(|&r| r > 0 && r + 1 < n).collect();
    peaks.sort_unstable();
    peaks.dedup();

    let mut prev_end: Option<usize> = None;
    for (k, &r) in peaks.iter().enumerate() {
        // QRS bracket: first/last envelope sample above the threshold.
        let lo = r.saturating_sub(ms(QRS_SEARCH_BEFORE_MS));
        let hi = (r + ms(QRS_SEARCH_AFTER_MS)).min(n - 1);
        let peak_env = env[lo..=hi].iter().cloned().fold(0.0, f64::max);
        let th = QRS_ENVELOPE_FRACTION * peak_env;
        let qrs_onset = (lo..r).find(|&i| env[i] >= th).unwrap_or(lo).min(r - 1);
        let qrs_offset = (r + 1..=hi).rev().find(|&i| env[i] >= th).unwrap_or(hi).max(r + 1);

        let next_r = peaks.get(k + 1).copied();

        // P wave: positive bump in lead II before the QRS, after the previous beat.
        let mut p_peak = None;
        let mut p_onset = None;
        let p_hi = r.saturating_sub(ms(P_SEARCH_MS.1)).min(qrs_onset.saturating_sub(1));
        let mut p_lo = r.saturating_sub(ms(P_SEARCH_MS.0));
        if let Some(e) = prev_end {
            p_lo = p_lo.max(e + 1);
        }
        if p_hi > p_lo + 4 {
            let pk = (p_lo..=p_hi).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
            let edge = x[p_lo].max(x[p_hi]);
            if pk > p_lo + 1 && pk + 1 < p_hi && x[pk] >= P_MIN_MV && x[pk] - edge >= 0.5 * P_MIN_MV {
                let floor = pk.saturating_sub(ms(60.0));
                let base = x[floor..pk].iter().cloned().fold(f64::INFINITY, f64::min);
                let level = base + 0.1 * (x[pk] - base);
                let onset = (floor..pk).rev().find(|&i| x[i] < level).unwrap_or(floor);
                if onset < pk {
                    p_peak = Some(pk);
                    p_onset = Some(onset);
                }
            }
        }

        // T wave: largest deflection after the QRS, before the next beat.
        let mut t_peak = None;
        let mut t_offset = None;
        let t_lo = (r + ms(T_SEARCH_MS.0)).max(qrs_offset + 1);
        let mut t_hi = (r + ms(T_SEARCH_MS.1)).min(n - 1);
        if let Some(nr) = next_r {
            t_hi = t_hi.min(nr.saturating_sub(ms(QRS_SEARCH_BEFORE_MS)));
        }
        if t_hi > t_lo + 4 {
            let pk = (t_lo..=t_hi).max_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs())).unwrap();
            if x[pk].abs() >= T_MIN_MV && pk < t_hi {
                let level = 0.1 * x[pk].abs();
                let off = (pk + 1..=t_hi).find(|&i| x[i].abs() < level || x[i] * x[pk] < 0.0).unwrap_or(t_hi);
                t_peak = Some(pk);
                t_offset = Some(off);
            }
        }

        let beat = Beat { p_onset, p_peak, qrs_onset, r_peak: r, qrs_offset, t_peak, t_offset };
        prev_end = Some(beat.end());
        fid.beats.push(beat);
    }
    fid
}

/// Successive R-R differences in milliseconds.
pub fn rr_intervals(r_peaks: &[usize], fs_hz: f64) -> Result<Vec<f64>, QrsError> {
    if r_peaks.len() < 2 {
        return Err(QrsError::TooFewPeaks(r_peaks.len()));
    }
    Ok(r_peaks.windows(2).map(|w| (w[1] as f64 - w[0] as f64) * 1000.0 / fs_hz).collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Indices of beats that look ectopic: premature, wide, or missing a P
/// wave that their neighbours have.
pub fn irregular_beats(fid: &Fiducials) -> Vec<usize> {
    let fs = fid.sample_rate_hz as f64;
    let beats = &fid.beats;
    let rr: Vec<f64> = beats.windows(2).map(|w| (w[1].r_peak - w[0].r_peak) as f64).collect();
    let median_rr = (!rr.is_empty()).then(|| median(rr.clone()));
    let wide = ms_to_samples(WIDE_QRS_MS, fs);
    let p_reach = ms_to_samples(P_SEARCH_MS.0, fs);

    (0..beats.len())
        .filter(|&b| {
            let premature = b > 0 && median_rr.is_some_and(|m| rr[b - 1] < PREMATURE_FRACTION * m);
            let is_wide = beats[b].qrs_width() > wide;
            let neighbours: Vec<&Beat> =
                [b.checked_sub(1), Some(b + 1)].into_iter().flatten().filter_map(|i| beats.get(i)).collect();
            let lost_p = beats[b].p_onset.is_none()
                && beats[b].r_peak >= p_reach
                && !neighbours.is_empty()
                && neighbours.iter().all(|nb| nb.p_onset.is_some());
            premature || is_wide || lost_p
        })
        .collect()
}

/// Marks potentially ectopic regions, padded around each irregular beat.
pub fn mark_irregular(record: &EcgRecord, fid: &Fiducials) -> MarkedRegions {
    let fs = record.sample_rate_hz() as f64;
    let pad = ms_to_samples(REGION_PAD_MS, fs) as i64;
    let regions = irregular_beats(fid).into_iter().map(|b| {
        let beat = &fid.beats[b];
        (beat.qrs_onset as i64 - pad, beat.end() as i64 + 1 + pad)
    });
    MarkedRegions::new(record.n_samples(), regions)
}

/// Detection, delineation and marking in one call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeatAnalysis {
    pub r_peaks: Vec<usize>,
    pub fiducials: Fiducials,
    pub regions: MarkedRegions,
}

pub fn analyze(record: &EcgRecord) -> Result<BeatAnalysis, QrsError> {
    let r_peaks = detect_r_peaks(record)?;
    let fiducials = delineate(record, &r_peaks);
    let regions = mark_irregular(record, &fiducials);
    Ok(BeatAnalysis { r_peaks, fiducials, regions })
}
