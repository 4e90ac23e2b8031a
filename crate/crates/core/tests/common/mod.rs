//! Shared oracles for the integration suites.
#![allow(dead_code)]

use ecgdx::record::EcgRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn lead_f64(rec: &EcgRecord, lead: usize) -> Vec<f64> {
    rec.lead(lead).iter().map(|&v| v as f64).collect()
}

/// Power of `x` in DFT bins with frequency in `[0, hi_hz]`, by direct
/// projection (only a handful of bins, so no FFT needed). Normalized so
/// that a unit sinusoid on an exact bin gives 0.5, matching `power`.
pub fn band_power(x: &[f64], fs: f64, hi_hz: f64) -> f64 {
    let n = x.len();
    let df = fs / n as f64;
    let kmax = (hi_hz / df).floor() as usize;
    let mut total = 0.0;
    for k in 0..=kmax {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        let p = (re * re + im * im) / (n as f64 * n as f64);
        // Positive and negative frequency halves, except at DC.
        total += if k == 0 { p } else { 2.0 * p };
    }
    total
}

/// Adds white noise with one sigma per record, chosen so that the record as
/// a whole sits at `snr_db`.
pub fn add_white_noise(rec: &EcgRecord, snr_db: f64, seed: u64) -> EcgRecord {
    let sig: Vec<f64> = rec.signal().iter().map(|&v| v as f64).collect();
    let sigma = (power(&sig) / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f32> = sig.iter().map(|v| (v + normal.sample(&mut rng)) as f32).collect();
    EcgRecord::new(rec.id(), rec.sample_rate_hz(), noisy).unwrap()
}

pub fn snr_db(clean: &EcgRecord, estimate: &EcgRecord) -> f64 {
    let (mut s, mut e) = (0.0, 0.0);
    for (c, y) in clean.signal().iter().zip(estimate.signal()) {
        let (c, y) = (*c as f64, *y as f64);
        s += c * c;
        e += (y - c) * (y - c);
    }
    10.0 * (s / e).log10()
}

pub mod gradcheck;

/// One-sample Kolmogorov–Smirnov statistic of integer draws against the
/// discrete uniform distribution on `0..=max`.
pub fn ks_uniform(draws: &[usize], max: usize) -> f64 {
    let mut counts = vec![0usize; max + 1];
    for &d in draws {
        counts[d] += 1;
    }
    let n = draws.len() as f64;
    let mut cum = 0usize;
    let mut d = 0.0f64;
    for (k, c) in counts.iter().enumerate() {
        cum += c;
        d = d.max((cum as f64 / n - (k + 1) as f64 / (max + 1) as f64).abs());
    }
    d
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// A random valid label vector (Normal exactly when nothing else is set).
pub fn random_labels<R: rand::Rng>(rng: &mut R) -> ecgdx::record::LabelVector {
    use ecgdx::record::Label;
    ecgdx::record::LabelVector::from_abnormalities(Label::ALL[1..].iter().copied().filter(|_| rng.random_bool(0.2)))
}

/// Greedy one-to-one matching of detected to true peaks within `tol`
/// samples: `(true positives, false positives, false negatives)`.
pub fn match_peaks(detected: &[usize], truth: &[usize], tol: usize) -> (usize, usize, usize) {
    let mut used = vec![false; detected.len()];
    let mut tp = 0;
    for &t in truth {
        let best = detected
            .iter()
            .enumerate()
            .filter(|(i, &d)| !used[*i] && d.abs_diff(t) <= tol)
            .min_by_key(|(_, &d)| d.abs_diff(t));
        if let Some((i, _)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    (tp, detected.len() - tp, truth.len() - tp)
}

/// Per-class F1 columns of the published ablation table and their averages.
pub const TABLE_COLUMNS: [([f64; 9], f64); 4] = [
    ([0.835, 0.902, 0.809, 0.992, 0.842, 0.849, 0.625, 0.480, 0.839], 0.797),
    ([0.873, 0.950, 0.828, 1.000, 0.812, 0.844, 0.776, 0.522, 0.880], 0.832),
    ([0.900, 0.951, 0.876, 0.992, 0.889, 0.915, 0.860, 0.412, 0.879], 0.853),
    ([0.914, 0.962, 0.860, 1.000, 0.944, 0.965, 0.874, 0.500, 0.892], 0.879),
];

/// Random region layouts: record length, window and 1–4 regions, some
/// longer than the window.
pub fn random_layout(rng: &mut ChaCha8Rng) -> (ecgdx::qrs::MarkedRegions, usize) {
    let n = rng.random_range(4500..30000);
    let len = rng.random_range(1024..=4096.min(n));
    let k = rng.random_range(1..=4);
    let regions = (0..k).map(|_| {
        let w = if rng.random_bool(0.2) { rng.random_range(len..n.min(3 * len)) } else { rng.random_range(50..500) };
        let s = rng.random_range(0..n - w.min(n - 1));
        (s as i64, (s + w).min(n) as i64)
    });
    (ecgdx::qrs::MarkedRegions::new(n, regions), len)
}
