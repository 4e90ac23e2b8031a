//! Records, labels and datasets.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Sample rate of competition-shaped recordings.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 500;

/// Standard lead order used by every record in this crate.
pub const LEAD_NAMES: [&str; 12] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];

pub const NUM_LEADS: usize = 12;
pub const NUM_LABELS: usize = 9;

/// Index of lead II in [`LEAD_NAMES`].
pub const LEAD_II: usize = 1;
/// Index of lead V1 in [`LEAD_NAMES`].
pub const LEAD_V1: usize = 6;
/// Index of lead V2 in [`LEAD_NAMES`].
pub const LEAD_V2: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RecordError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid label vector: {0}")]
    InvalidLabels(String),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
}

/// One 12-lead recording. Samples are millivolts, stored lead-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    id: String,
    sample_rate_hz: u32,
    n_samples: usize,
    signal: Vec<f32>,
}

impl EcgRecord {
    /// Builds a record from a lead-major buffer of `12 * n_samples` values.
    pub fn new(id: impl Into<String>, sample_rate_hz: u32, signal: Vec<f32>) -> Result<Self, RecordError> {
        let id = id.into();
        if sample_rate_hz == 0 {
            return Err(RecordError::InvalidRecord("sample rate must be positive".into()));
        }
        if signal.is_empty() || !signal.len().is_multiple_of(NUM_LEADS) {
            return Err(RecordError::InvalidRecord(format!(
                "signal buffer of {} values is not 12 equal non-empty leads",
                signal.len()
            )));
        }
        if let Some(pos) = signal.iter().position(|v| !v.is_finite()) {
            return Err(RecordError::InvalidRecord(format!("non-finite sample at flat index {pos}")));
        }
        let n_samples = signal.len() / NUM_LEADS;
        Ok(Self { id, sample_rate_hz, n_samples, signal })
    }

    /// Builds a record from per-lead rows; all rows must have the same length.
    pub fn from_leads(id: impl Into<String>, sample_rate_hz: u32, leads: &[Vec<f32>]) -> Result<Self, RecordError> {
        if leads.len() != NUM_LEADS {
            return Err(RecordError::InvalidRecord(format!("expected 12 leads, got {}", leads.len())));
        }
        let n = leads[0].len();
        if leads.iter().any(|l| l.len() != n) {
            return Err(RecordError::InvalidRecord("leads differ in length".into()));
        }
        Self::new(id, sample_rate_hz, leads.concat())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate_hz as f64
    }

    pub fn lead(&self, index: usize) -> &[f32] {
        &self.signal[index * self.n_samples..(index + 1) * self.n_samples]
    }

    pub fn leads(&self) -> impl Iterator<Item = &[f32]> {
        self.signal.chunks_exact(self.n_samples)
    }

    /// Lead-major sample buffer.
    pub fn signal(&self) -> &[f32] {
        &self.signal
    }

    pub fn into_signal(self) -> Vec<f32> {
        self.signal
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Returns a copy restricted to `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, RecordError> {
        if len == 0 || start + len > self.n_samples {
            return Err(RecordError::InvalidRecord(format!(
                "window [{start}, {}) outside record of {} samples",
                start + len,
                self.n_samples
            )));
        }
        let mut out = Vec::with_capacity(len * NUM_LEADS);
        for lead in self.leads() {
            out.extend_from_slice(&lead[start..start + len]);
        }
        Self::new(self.id.clone(), self.sample_rate_hz, out)
    }

    /// Rebuilds the record with every lead replaced through `f`.
    pub fn map_leads<F>(&self, mut f: F) -> Result<Self, RecordError>
    where
        F: FnMut(usize, &[f32]) -> Vec<f32>,
    {
        let rows: Vec<Vec<f32>> = self.leads().enumerate().map(|(i, l)| f(i, l)).collect();
        Self::from_leads(self.id.clone(), self.sample_rate_hz, &rows)
    }
}

/// The nine evaluated labels in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Af,
    Fdavb,
    Crbbb,
    Lafb,
    Pvc,
    Pac,
    Er,
    Twc,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [
        Label::Normal,
        Label::Af,
        Label::Fdavb,
        Label::Crbbb,
        Label::Lafb,
        Label::Pvc,
        Label::Pac,
        Label::Er,
        Label::Twc,
    ];

    /// The eight abnormalities, in label-file column order.
    pub const ABNORMALITIES: [Label; 8] =
        [Label::Af, Label::Fdavb, Label::Crbbb, Label::Lafb, Label::Pvc, Label::Pac, Label::Er, Label::Twc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "Normal",
            Label::Af => "AF",
            Label::Fdavb => "FDAVB",
            Label::Crbbb => "CRBBB",
            Label::Lafb => "LAFB",
            Label::Pvc => "PVC",
            Label::Pac => "PAC",
            Label::Er => "ER",
            Label::Twc => "TWC",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RecordError::UnknownLabel(s.to_string()))
    }
}

/// Nine binary flags indexed by [`Label`]. Normal excludes every abnormality
/// and at least one flag is always set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabelVector([bool; NUM_LABELS]);

impl LabelVector {
    pub fn new(flags: [bool; NUM_LABELS]) -> Result<Self, RecordError> {
        let any_abnormal = flags[1..].iter().any(|&f| f);
        if flags[0] && any_abnormal {
            return Err(RecordError::InvalidLabels("Normal cannot be combined with an abnormality".into()));
        }
        if !flags.iter().any(|&f| f) {
            return Err(RecordError::InvalidLabels("no flag set".into()));
        }
        Ok(Self(flags))
    }

    pub fn normal() -> Self {
        let mut flags = [false; NUM_LABELS];
        flags[0] = true;
        Self(flags)
    }

    /// Builds the vector from a set of abnormalities; an empty set is Normal.
    pub fn from_abnormalities<I: IntoIterator<Item = Label>>(labels: I) -> Self {
        let mut flags = [false; NUM_LABELS];
        for l in labels {
            if l != Label::Normal {
                flags[l.index()] = true;
            }
        }
        if !flags.iter().any(|&f| f) {
            flags[0] = true;
        }
        Self(flags)
    }

    pub fn flags(&self) -> [bool; NUM_LABELS] {
        self.0
    }

    pub fn get(&self, label: Label) -> bool {
        self.0[label.index()]
    }

    pub fn is_normal(&self) -> bool {
        self.0[0]
    }

    pub fn active(&self) -> impl Iterator<Item = Label> + '_ {
        Label::ALL.iter().copied().filter(|l| self.get(*l))
    }

    /// Flags as 0/1 floats in label order.
    pub fn to_targets(&self) -> [f32; NUM_LABELS] {
        self.0.map(|f| if f { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.active().map(Label::name).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct LabeledRecord {
    pub record: EcgRecord,
    pub labels: LabelVector,
}

/// Labeled records with unique ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    split: Split,
    records: Vec<LabeledRecord>,
}

impl Dataset {
    pub fn new(split: Split, records: Vec<LabeledRecord>) -> Result<Self, RecordError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.record.id()) {
                return Err(RecordError::DuplicateId(r.record.id().to_string()));
            }
        }
        Ok(Self { split, records })
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Positive count per label.
    pub fn label_counts(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0; NUM_LABELS];
        for r in &self.records {
            for (c, f) in counts.iter_mut().zip(r.labels.flags()) {
                *c += f as usize;
            }
        }
        counts
    }
}
