//! Parameterized 12-lead ECG generator with exact ground truth.
//!
//! Every wave (P, Q, R, S, T and the optional extras) is a Gaussian bump in
//! time carrying a 3-D dipole direction. Each lead sees the projection of
//! that direction onto its fixed lead vector (see [`LEAD_VECTORS`]), so all
//! twelve leads stay mutually consistent. Abnormalities are injected by
//! changing timing, widths, directions or amplitudes of these bumps.
//!
//! Ground truth uses these conventions: QRS spans `R ± qrs/2`; P onset is
//! where the P wave reaches 10% of its peak; T offset is the T centre plus
//! 2.5 T sigmas.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::{self, FormatError};
use crate::record::{
    Dataset, EcgRecord, Label, LabelVector, LabeledRecord, RecordError, Split, DEFAULT_SAMPLE_RATE_HZ, NUM_LEADS,
};

/// Record length bounds in samples.
pub const MIN_SAMPLES: usize = 4500;
pub const MAX_SAMPLES: usize = 30000;

/// Padding around an ectopic beat when forming its region.
pub const REGION_PAD_MS: f64 = 250.0;

/// Unit lead vectors in (left, inferior, anterior) coordinates, in
/// [`crate::record::LEAD_NAMES`] order.
pub const LEAD_VECTORS: [[f64; 3]; NUM_LEADS] = [
    [1.0, 0.0, 0.0],               // I      0 deg
    [0.5, 0.866_025_4, 0.0],       // II    60 deg
    [-0.5, 0.866_025_4, 0.0],      // III  120 deg
    [-0.866_025_4, -0.5, 0.0],     // aVR -150 deg
    [0.866_025_4, -0.5, 0.0],      // aVL  -30 deg
    [0.0, 1.0, 0.0],               // aVF   90 deg
    [-0.5, 0.0, 0.866_025_4],      // V1
    [0.0, 0.0, 1.0],               // V2
    [0.258_819, 0.0, 0.965_925_8], // V3
    [0.5, 0.0, 0.866_025_4],       // V4
    [0.866_025_4, 0.0, 0.5],       // V5
    [1.0, 0.0, 0.0],               // V6
];

const P_DIR: [f64; 3] = [0.5, 0.85, 0.2];
const Q_DIR: [f64; 3] = [-0.5, -0.2, 0.8];
const R_DIR: [f64; 3] = [0.55, 0.75, -0.35];
const S_DIR: [f64; 3] = [-0.4, -0.3, -0.8];
const T_DIR: [f64; 3] = [0.5, 0.7, 0.3];
const PVC_DIR: [f64; 3] = [0.2, 0.95, -0.25];
const LAFB_R_DIR: [f64; 3] = [0.7, -0.7, -0.35];
const LAFB_Q_DIR: [f64; 3] = [0.1, 0.9, 0.3];
const RSR_DIR: [f64; 3] = [-0.7, 0.1, 0.7];

const P_AMP: f64 = 0.15;
const P_SIGMA_S: f64 = 0.020;
/// Distance, in P sigmas, from the P centre to its 10%-amplitude onset.
const P_ONSET_SIGMAS: f64 = 2.146;
const Q_AMP: f64 = 0.10;
const R_AMP: f64 = 1.20;
const S_AMP: f64 = 0.35;
const T_AMP: f64 = 0.30;
const T_SIGMA_S: f64 = 0.040;
const PVC_AMP: f64 = 1.6;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub white_sigma_mv: f64,
    pub baseline_mv: f64,
    pub baseline_hz: f64,
    pub powerline_mv: f64,
    pub powerline_hz: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { white_sigma_mv: 0.0, baseline_mv: 0.0, baseline_hz: 0.3, powerline_mv: 0.0, powerline_hz: 50.0 }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { white_sigma_mv: 0.01, baseline_mv: 0.05, ..Self::none() }
    }
}

/// Abnormality injectors. `None` / zero disables an injector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Injections {
    /// Coefficient of variation of RR intervals; P waves are removed.
    pub af_rr_cv: Option<f64>,
    /// Prolonged PR interval in ms.
    pub fdavb_pr_ms: Option<f64>,
    /// Widened QRS in ms, with a late R' in V1.
    pub crbbb_qrs_ms: Option<f64>,
    pub lafb: bool,
    pub pvc_count: usize,
    pub pac_count: usize,
    /// J-point elevation amplitude in mV.
    pub er_j_mv: Option<f64>,
    /// T-wave scale factor (negative inverts).
    pub twc_t_scale: Option<f64>,
}

impl Injections {
    pub fn labels(&self) -> LabelVector {
        let mut set = Vec::new();
        if self.af_rr_cv.is_some() {
            set.push(Label::Af);
        }
        if self.fdavb_pr_ms.is_some() {
            set.push(Label::Fdavb);
        }
        if self.crbbb_qrs_ms.is_some() {
            set.push(Label::Crbbb);
        }
        if self.lafb {
            set.push(Label::Lafb);
        }
        if self.pvc_count > 0 {
            set.push(Label::Pvc);
        }
        if self.pac_count > 0 {
            set.push(Label::Pac);
        }
        if self.er_j_mv.is_some() {
            set.push(Label::Er);
        }
        if self.twc_t_scale.is_some() {
            set.push(Label::Twc);
        }
        LabelVector::from_abnormalities(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub id: String,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub heart_rate_bpm: f64,
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub amplitude_scale: f64,
    /// Coefficient of variation of sinus RR intervals.
    pub rr_jitter_cv: f64,
    /// Ectopic beat timing as a fraction of the sinus RR interval.
    pub coupling: f64,
    pub injections: Injections,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            id: "synth".into(),
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            duration_s: 10.0,
            heart_rate_bpm: 60.0,
            pr_ms: 160.0,
            qrs_ms: 90.0,
            amplitude_scale: 1.0,
            rr_jitter_cv: 0.0,
            coupling: 0.65,
            injections: Injections::default(),
            noise: NoiseSpec::none(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let n = self.n_samples();
        if !(MIN_SAMPLES..=MAX_SAMPLES).contains(&n) {
            return bad(&format!("{n} samples outside [{MIN_SAMPLES}, {MAX_SAMPLES}]"));
        }
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive");
        }
        if !(20.0..=200.0).contains(&self.heart_rate_bpm) {
            return bad("heart rate outside 20-200 bpm");
        }
        if self.pr_ms <= 0.0 || self.qrs_ms <= 0.0 || self.amplitude_scale <= 0.0 {
            return bad("durations and amplitude scale must be positive");
        }
        if !(0.3..1.0).contains(&self.coupling) {
            return bad("coupling must lie in [0.3, 1)");
        }
        if self.rr_jitter_cv < 0.0 || self.injections.af_rr_cv.is_some_and(|cv| cv <= 0.0) {
            return bad("RR variability must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeatKind {
    Sinus,
    Pvc,
    Pac,
}

/// Exact landmarks of one synthesized beat, as sample indices (may lie
/// outside the record for beats at the edges).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTruth {
    pub kind: BeatKind,
    pub r_time_s: f64,
    pub r_peak: i64,
    pub p_onset: Option<i64>,
    pub qrs_onset: i64,
    pub qrs_offset: i64,
    pub t_offset: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beats: Vec<BeatTruth>,
    /// Merged ectopic-beat regions, `[start, end)` sample intervals.
    pub regions: Vec<[usize; 2]>,
    pub pr_ms: f64,
    pub qrs_ms: f64,
}

impl GroundTruth {
    pub fn beat_times_s(&self) -> Vec<f64> {
        self.beats.iter().map(|b| b.r_time_s).collect()
    }

    /// R-peak indices of beats that fall inside `[0, n)`.
    pub fn r_peaks(&self, n: usize) -> Vec<usize> {
        self.beats.iter().filter(|b| b.r_peak >= 0 && (b.r_peak as usize) < n).map(|b| b.r_peak as usize).collect()
    }

    pub fn sidecar(&self) -> TruthSidecar {
        TruthSidecar {
            beat_times_s: self.beat_times_s(),
            regions: self.regions.clone(),
            pr_ms: self.pr_ms,
            qrs_ms: self.qrs_ms,
        }
    }
}

/// Per-record ground-truth JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub beat_times_s: Vec<f64>,
    pub regions: Vec<[usize; 2]>,
    pub pr_ms: f64,
    pub qrs_ms: f64,
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub record: EcgRecord,
    pub labels: LabelVector,
    pub truth: GroundTruth,
}

struct Wave {
    center_s: f64,
    sigma_s: f64,
    amp: f64,
    dir: [f64; 3],
}

fn project(dir: [f64; 3], lead: [f64; 3]) -> f64 {
    dir[0] * lead[0] + dir[1] * lead[1] + dir[2] * lead[2]
}

struct Planned {
    kind: BeatKind,
    r_s: f64,
}

fn plan_beats(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Planned> {
    let rr = 60.0 / spec.heart_rate_bpm;
    let duration = spec.duration_s;
    let cv = spec.injections.af_rr_cv.unwrap_or(spec.rr_jitter_cv);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let next_rr = |rng: &mut ChaCha8Rng| {
        if cv > 0.0 {
            (rr * (1.0 + cv * normal.sample(rng))).clamp(0.45 * rr, 2.0 * rr).max(0.3)
        } else {
            rr
        }
    };

    // Ectopic slots among the interior sinus beats.
    let expected = (duration / rr).floor() as usize;
    let mut slots: Vec<usize> = (2..expected.saturating_sub(2)).collect();
    let mut ectopic = BTreeMap::new();
    let wanted = [(BeatKind::Pvc, spec.injections.pvc_count), (BeatKind::Pac, spec.injections.pac_count)];
    for (kind, count) in wanted {
        for _ in 0..count {
            if slots.is_empty() {
                break;
            }
            let pick = rng.random_range(0..slots.len());
            let slot = slots.remove(pick);
            // Keep ectopic beats apart from each other.
            slots.retain(|&s| s.abs_diff(slot) > 1);
            ectopic.insert(slot, kind);
        }
    }

    let mut beats = Vec::new();
    let mut prev = rr / 2.0 - rr;
    let mut t = rr / 2.0;
    let mut i = 0;
    while t < duration {
        match ectopic.get(&i).copied().unwrap_or(BeatKind::Sinus) {
            BeatKind::Sinus => {
                beats.push(Planned { kind: BeatKind::Sinus, r_s: t });
                prev = t;
                t += next_rr(rng);
            }
            BeatKind::Pvc => {
                let interval = t - prev;
                let r = prev + spec.coupling * interval;
                beats.push(Planned { kind: BeatKind::Pvc, r_s: r });
                // Full compensatory pause: the sinus node is not reset.
                let after = prev + 2.0 * interval;
                prev = r;
                t = after;
            }
            BeatKind::Pac => {
                let interval = t - prev;
                let r = prev + spec.coupling * interval;
                beats.push(Planned { kind: BeatKind::Pac, r_s: r });
                prev = r;
                t = r + interval;
            }
        }
        i += 1;
    }
    beats
}

/// Synthesizes one record with labels and exact ground truth.
pub fn generate(spec: &SynthSpec) -> Result<Synthesized, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fs = spec.sample_rate_hz as f64;
    let n = spec.n_samples();
    let inj = &spec.injections;
    let scale = spec.amplitude_scale;
    let rr = 60.0 / spec.heart_rate_bpm;

    let pr_s = inj.fdavb_pr_ms.unwrap_or(spec.pr_ms) / 1000.0;
    let qrs_s = inj.crbbb_qrs_ms.unwrap_or(spec.qrs_ms) / 1000.0;
    let pvc_qrs_s = (qrs_s * 1.8).max(0.160);
    let p_amp = if inj.af_rr_cv.is_some() { 0.0 } else { P_AMP };
    let t_scale = inj.twc_t_scale.unwrap_or(1.0);
    let (r_dir, q_dir) = if inj.lafb { (LAFB_R_DIR, LAFB_Q_DIR) } else { (R_DIR, Q_DIR) };
    let t_delay = |interval: f64| 0.30 * interval.clamp(0.4, 1.5).sqrt();

    let planned = plan_beats(spec, &mut rng);
    let mut waves = Vec::with_capacity(planned.len() * 7);
    let mut beats = Vec::with_capacity(planned.len());
    let to_idx = |s: f64| (s * fs).round() as i64;
    let mut prev_r = planned.first().map_or(0.0, |b| b.r_s - rr);

    for b in &planned {
        let interval = (b.r_s - prev_r).max(0.3);
        prev_r = b.r_s;
        let r = b.r_s;
        let (width, p_onset, t_sigma, t_center) = match b.kind {
            BeatKind::Pvc => {
                waves.push(Wave { center_s: r, sigma_s: pvc_qrs_s / 6.0, amp: PVC_AMP * scale, dir: PVC_DIR });
                let tc = r + 0.34;
                waves.push(Wave { center_s: tc, sigma_s: 0.05, amp: -0.4 * scale, dir: PVC_DIR });
                (pvc_qrs_s, None, 0.05, tc)
            }
            BeatKind::Sinus | BeatKind::Pac => {
                let q = qrs_s;
                let onset = r - q / 2.0;
                let p_center = onset - pr_s + P_ONSET_SIGMAS * P_SIGMA_S;
                let p_scale = if b.kind == BeatKind::Pac { 0.8 } else { 1.0 };
                let has_p = p_amp > 0.0;
                if has_p {
                    waves.push(Wave {
                        center_s: p_center,
                        sigma_s: P_SIGMA_S,
                        amp: p_amp * p_scale * scale,
                        dir: P_DIR,
                    });
                }
                waves.push(Wave { center_s: r - 0.28 * q, sigma_s: q / 10.0, amp: Q_AMP * scale, dir: q_dir });
                waves.push(Wave { center_s: r, sigma_s: q / 8.0, amp: R_AMP * scale, dir: r_dir });
                waves.push(Wave { center_s: r + 0.28 * q, sigma_s: q / 10.0, amp: S_AMP * scale, dir: S_DIR });
                if inj.crbbb_qrs_ms.is_some() {
                    waves.push(Wave { center_s: r + 0.32 * q, sigma_s: q / 10.0, amp: 0.6 * scale, dir: RSR_DIR });
                }
                if let Some(j) = inj.er_j_mv {
                    waves.push(Wave { center_s: r + q / 2.0 + 0.015, sigma_s: 0.015, amp: j * scale, dir: T_DIR });
                }
                let tc = r + t_delay(interval);
                waves.push(Wave { center_s: tc, sigma_s: T_SIGMA_S, amp: T_AMP * t_scale * scale, dir: T_DIR });
                (q, has_p.then(|| to_idx(p_center - P_ONSET_SIGMAS * P_SIGMA_S)), T_SIGMA_S, tc)
            }
        };
        beats.push(BeatTruth {
            kind: b.kind,
            r_time_s: r,
            r_peak: to_idx(r),
            p_onset,
            qrs_onset: to_idx(r - width / 2.0),
            qrs_offset: to_idx(r + width / 2.0),
            t_offset: to_idx(t_center + 2.5 * t_sigma),
        });
    }

    let mut leads = vec![vec![0.0f64; n]; NUM_LEADS];
    for w in &waves {
        let lo = (((w.center_s - 5.0 * w.sigma_s) * fs).floor().max(0.0)) as usize;
        let hi = (((w.center_s + 5.0 * w.sigma_s) * fs).ceil().max(0.0) as usize).min(n);
        let gains: Vec<f64> = LEAD_VECTORS.iter().map(|lv| w.amp * project(w.dir, *lv)).collect();
        for i in lo..hi {
            let z = (i as f64 / fs - w.center_s) / w.sigma_s;
            let g = (-0.5 * z * z).exp();
            for (lead, gain) in leads.iter_mut().zip(&gains) {
                lead[i] += gain * g;
            }
        }
    }

    if inj.af_rr_cv.is_some() {
        // Fibrillatory baseline, strongest in V1 and the inferior leads.
        let f = rng.random_range(5.0..7.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (lead, lv) in leads.iter_mut().zip(LEAD_VECTORS) {
            let gain = 0.04 * scale * project([-0.3, 0.8, 0.5], lv).abs().max(0.3);
            for (i, v) in lead.iter_mut().enumerate() {
                *v += gain * (2.0 * PI * f * i as f64 / fs + phase).sin();
            }
        }
    }

    add_noise(&mut leads, &spec.noise, fs, &mut rng);

    let rows: Vec<Vec<f32>> = leads.into_iter().map(|l| l.into_iter().map(|v| v as f32).collect()).collect();
    let record = EcgRecord::from_leads(spec.id.clone(), spec.sample_rate_hz, &rows)?;

    let pad = (REGION_PAD_MS / 1000.0 * fs).round() as i64;
    let intervals = beats.iter().filter(|b| b.kind != BeatKind::Sinus).map(|b| (b.qrs_onset - pad, b.t_offset + pad));
    let regions = merge_intervals(intervals, n);

    Ok(Synthesized {
        record,
        labels: inj.labels(),
        truth: GroundTruth { beats, regions, pr_ms: pr_s * 1000.0, qrs_ms: qrs_s * 1000.0 },
    })
}

/// Clips `[start, end)` intervals to `[0, n)`, sorts and merges overlaps.
pub fn merge_intervals<I: IntoIterator<Item = (i64, i64)>>(intervals: I, n: usize) -> Vec<[usize; 2]> {
    let mut clipped: Vec<[usize; 2]> = intervals
        .into_iter()
        .filter_map(|(s, e)| {
            let s = s.clamp(0, n as i64) as usize;
            let e = e.clamp(0, n as i64) as usize;
            (e > s).then_some([s, e])
        })
        .collect();
    clipped.sort_unstable();
    let mut merged: Vec<[usize; 2]> = Vec::with_capacity(clipped.len());
    for iv in clipped {
        match merged.last_mut() {
            Some(last) if iv[0] <= last[1] => last[1] = last[1].max(iv[1]),
            _ => merged.push(iv),
        }
    }
    merged
}

/// Adds white, baseline-wander and powerline noise in place.
pub fn add_noise(leads: &mut [Vec<f64>], noise: &NoiseSpec, fs: f64, rng: &mut ChaCha8Rng) {
    let white = (noise.white_sigma_mv > 0.0).then(|| Normal::new(0.0, noise.white_sigma_mv).unwrap());
    for lead in leads.iter_mut() {
        let bw_phase = rng.random_range(0.0..2.0 * PI);
        let pl_phase = rng.random_range(0.0..2.0 * PI);
        for (i, v) in lead.iter_mut().enumerate() {
            let t = i as f64 / fs;
            if noise.baseline_mv > 0.0 {
                *v += noise.baseline_mv * (2.0 * PI * noise.baseline_hz * t + bw_phase).sin();
            }
            if noise.powerline_mv > 0.0 {
                *v += noise.powerline_mv * (2.0 * PI * noise.powerline_hz * t + pl_phase).sin();
            }
            if let Some(d) = &white {
                *v += d.sample(rng);
            }
        }
    }
}

/// A label combination to generate, e.g. `pvc` or `af+pac`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClassSpec(pub Vec<Label>);

impl ClassSpec {
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        let mut labels = Vec::new();
        for part in s.split('+') {
            let l: Label = part.parse()?;
            if !labels.contains(&l) {
                labels.push(l);
            }
        }
        if labels.len() > 1 && labels.contains(&Label::Normal) {
            return Err(SynthError::InvalidSpec(format!("{s}: Normal cannot be combined")));
        }
        labels.sort();
        Ok(Self(labels))
    }

    pub fn name(&self) -> String {
        self.0.iter().map(|l| l.name().to_lowercase()).collect::<Vec<_>>().join("+")
    }
}

/// Parses `normal=50,pvc=50,af+pac=10`.
pub fn parse_mix(s: &str) -> Result<Vec<(ClassSpec, usize)>, SynthError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (class, count) =
                p.split_once('=').ok_or_else(|| SynthError::InvalidSpec(format!("mix entry {p:?} lacks '='")))?;
            let count =
                count.trim().parse::<usize>().map_err(|_| SynthError::InvalidSpec(format!("bad count in {p:?}")))?;
            Ok((ClassSpec::parse(class)?, count))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub mix: Vec<(ClassSpec, usize)>,
    pub split: Split,
    pub duration_s: (f64, f64),
    /// Inclusive range of ectopic beats per PVC/PAC record.
    pub ectopic_count: (usize, usize),
    pub noise: NoiseSpec,
    pub id_prefix: String,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(mix: Vec<(ClassSpec, usize)>, seed: u64) -> Self {
        Self {
            mix,
            split: Split::Train,
            duration_s: (10.0, 20.0),
            ectopic_count: (1, 2),
            noise: NoiseSpec::default(),
            id_prefix: "rec".into(),
            seed,
        }
    }
}

/// Draws per-record parameters for a label combination.
pub fn sample_spec(class: &ClassSpec, ds: &DatasetSpec, index: usize) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(ds.seed);
    rng.set_stream(index as u64 + 1);
    let has = |l: Label| class.0.contains(&l);
    let max_hr = if has(Label::Fdavb) { 75.0 } else { 85.0 };
    let (dlo, dhi) = ds.duration_s;
    let duration = if dhi > dlo { rng.random_range(dlo..=dhi) } else { dlo };
    let (elo, ehi) = ds.ectopic_count;
    let mut ectopics = || rng.random_range(elo..=ehi.max(elo));
    let mut inj = Injections {
        lafb: has(Label::Lafb),
        pvc_count: if has(Label::Pvc) { ectopics() } else { 0 },
        pac_count: if has(Label::Pac) { ectopics() } else { 0 },
        ..Default::default()
    };
    if has(Label::Af) {
        inj.af_rr_cv = Some(rng.random_range(0.22..0.32));
    }
    if has(Label::Fdavb) {
        inj.fdavb_pr_ms = Some(rng.random_range(230.0..270.0));
    }
    if has(Label::Crbbb) {
        inj.crbbb_qrs_ms = Some(rng.random_range(130.0..160.0));
    }
    if has(Label::Er) {
        inj.er_j_mv = Some(rng.random_range(0.15..0.25));
    }
    if has(Label::Twc) {
        inj.twc_t_scale = Some(rng.random_range(-0.8..-0.3));
    }
    let noise = NoiseSpec {
        white_sigma_mv: ds.noise.white_sigma_mv * rng.random_range(0.5..1.5),
        baseline_mv: ds.noise.baseline_mv * rng.random_range(0.5..1.5),
        baseline_hz: ds.noise.baseline_hz * rng.random_range(0.7..1.3),
        ..ds.noise.clone()
    };
    SynthSpec {
        id: format!("{}{:05}", ds.id_prefix, index),
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        duration_s: duration,
        heart_rate_bpm: rng.random_range(55.0..max_hr),
        pr_ms: rng.random_range(130.0..180.0),
        qrs_ms: rng.random_range(80.0..100.0),
        amplitude_scale: rng.random_range(0.85..1.15),
        rr_jitter_cv: rng.random_range(0.0..0.02),
        coupling: rng.random_range(0.6..0.7),
        injections: inj,
        noise,
        seed: rng.random(),
    }
}

/// Generates a stratified dataset; class counts are exact and records are
/// ordered by id.
pub fn generate_dataset(ds: &DatasetSpec) -> Result<(Dataset, Vec<GroundTruth>), SynthError> {
    let mut specs = Vec::new();
    for (class, count) in &ds.mix {
        for _ in 0..*count {
            let index = specs.len();
            specs.push(sample_spec(class, ds, index));
        }
    }
    let generated = crate::par::map_collect(&specs, generate).into_iter().collect::<Result<Vec<_>, _>>()?;
    let (records, truths): (Vec<_>, Vec<_>) =
        generated.into_iter().map(|g| (LabeledRecord { record: g.record, labels: g.labels }, g.truth)).unzip();
    Ok((Dataset::new(ds.split, records)?, truths))
}

/// Writes records, `labels.csv`, and one `<id>.truth.json` per record.
pub fn write_dataset(dataset: &Dataset, truths: &[GroundTruth], dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    io::save_dataset(dataset, dir)?;
    for (r, t) in dataset.records().iter().zip(truths) {
        let path = dir.join(format!("{}.truth.json", r.record.id()));
        let json = serde_json::to_vec_pretty(&t.sidecar()).expect("sidecar serializes");
        fs::write(&path, json).map_err(|source| FormatError::Io { path: path.clone(), source })?;
    }
    Ok(())
}

pub fn load_sidecar(path: impl AsRef<Path>) -> Result<TruthSidecar, SynthError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_slice(&bytes).map_err(|e| SynthError::InvalidSpec(e.to_string()))
}
