//! Salience arithmetic. Access raises a field's salience and each tick
//! decays it; thresholds map the value onto the attenuation ladder.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalienceParams {
    /// Salience of a freshly written field.
    pub initial: f64,
    /// Increment applied per access.
    pub access_boost: f64,
    /// Multiplicative decay per tick, in (0, 1).
    pub decay: f64,
    pub summary_threshold: f64,
    pub remove_threshold: f64,
    pub archive_threshold: f64,
    /// Entries kept uncompressed besides the current one.
    pub keep_recent: usize,
}

impl Default for SalienceParams {
    fn default() -> Self {
        Self {
            initial: 1.0,
            access_boost: 1.0,
            decay: 0.9,
            summary_threshold: 0.5,
            remove_threshold: 0.2,
            archive_threshold: 0.05,
            keep_recent: 3,
        }
    }
}

impl SalienceParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(format!("decay must lie in (0, 1), got {}", self.decay));
        }
        if !(self.summary_threshold > self.remove_threshold
            && self.remove_threshold > self.archive_threshold
            && self.archive_threshold > 0.0)
        {
            return Err("thresholds must satisfy summary > remove > archive > 0".into());
        }
        if !(self.initial > self.summary_threshold) {
            return Err("initial salience must exceed the summary threshold".into());
        }
        if !(self.access_boost >= 0.0) {
            return Err("access boost must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eligibility {
    Current,
    CompressEligible,
    HideEligible,
    ArchiveEligible,
}

pub fn decay(s: f64, ticks: u32, lambda: f64) -> f64 {
    let mut out = s;
    for _ in 0..ticks {
        out *= lambda;
    }
    out
}

pub fn bump(s: f64, access_boost: f64) -> f64 {
    s + access_boost
}

/// Where a salience value sits on the ladder. Comparisons are strict.
pub fn tier_of(s: f64, p: &SalienceParams) -> Eligibility {
    if s < p.archive_threshold {
        Eligibility::ArchiveEligible
    } else if s < p.remove_threshold {
        Eligibility::HideEligible
    } else if s < p.summary_threshold {
        Eligibility::CompressEligible
    } else {
        Eligibility::Current
    }
}
