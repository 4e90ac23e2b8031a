//! Multi-label cardiac abnormality detection from 12-lead ECGs.

pub mod augment;
pub mod dsp;
pub mod features;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod qrs;
pub mod record;
pub mod synth;
