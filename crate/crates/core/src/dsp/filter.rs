//! Zero-phase Butterworth band-pass filtering built from cascaded biquads.

use std::f64::consts::PI;

use super::DspError;

/// Butterworth order of each band edge (high-pass and low-pass).
pub const EDGE_ORDER: usize = 6;

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

#[derive(Clone, Copy)]
enum Kind {
    Low,
    High,
}

impl Biquad {
    /// Bilinear-transform section with pre-warped cutoff.
    fn new(kind: Kind, cutoff_hz: f64, fs_hz: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs_hz;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = match kind {
            Kind::Low => [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0],
            Kind::High => [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0],
        };
        Self { b: [b[0] / a0, b[1] / a0, b[2] / a0], a: [-2.0 * cos / a0, (1.0 - alpha) / a0] }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II, starting from the steady state for a
    /// constant input `x0`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let g = self.dc_gain();
        let mut z2 = (self.b[2] - self.a[1] * g) * x0;
        let mut z1 = (self.b[1] - self.a[0] * g) * x0 + z2;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

fn butterworth(kind: Kind, order: usize, cutoff_hz: f64, fs_hz: f64) -> Vec<Biquad> {
    (1..=order / 2)
        .map(|k| {
            let q = 1.0 / (2.0 * ((2 * k - 1) as f64 * PI / (2 * order) as f64).cos());
            Biquad::new(kind, cutoff_hz, fs_hz, q)
        })
        .collect()
}

/// A designed band-pass filter, reusable across signals.
#[derive(Debug, Clone)]
pub struct BandPass {
    sections: Vec<Biquad>,
    pad: usize,
}

impl BandPass {
    pub fn new(lo_hz: f64, hi_hz: f64, fs_hz: f64) -> Result<Self, DspError> {
        let valid = lo_hz.is_finite()
            && hi_hz.is_finite()
            && fs_hz.is_finite()
            && lo_hz > 0.0
            && lo_hz < hi_hz
            && hi_hz < fs_hz / 2.0;
        if !valid {
            return Err(DspError::InvalidBand { lo_hz, hi_hz, fs_hz });
        }
        let mut sections = butterworth(Kind::High, EDGE_ORDER, lo_hz, fs_hz);
        sections.extend(butterworth(Kind::Low, EDGE_ORDER, hi_hz, fs_hz));
        // Odd-reflection padding covering a few periods of the low edge.
        let pad = (3.0 * fs_hz / lo_hz).ceil() as usize;
        Ok(Self { sections, pad })
    }

    fn run_cascade(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Forward-backward (zero-phase) application.
    pub fn apply(&self, signal: &[f64]) -> Vec<f64> {
        let n = signal.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (signal[0], signal[n - 1]);
        ext.extend((1..=pad).rev().map(|k| 2.0 * first - signal[k]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|k| 2.0 * last - signal[n - 1 - k]));
        self.run_cascade(&mut ext);
        ext.reverse();
        self.run_cascade(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase band-pass of `signal` between `lo_hz` and `hi_hz`.
pub fn bandpass(signal: &[f64], lo_hz: f64, hi_hz: f64, fs_hz: f64) -> Result<Vec<f64>, DspError> {
    Ok(BandPass::new(lo_hz, hi_hz, fs_hz)?.apply(signal))
}
