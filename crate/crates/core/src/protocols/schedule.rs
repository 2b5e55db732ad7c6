use serde::{Deserialize, Serialize};

use super::ProtocolError;

/// Timing of one schedule entry [s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    pub dwell: f64,
    pub record_len: f64,
    pub pre_record_gap: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            dwell: 15e-3,
            record_len: 5e-3,
            pre_record_gap: 10e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEntry {
    /// Drive amplitude [V].
    pub amplitude: f64,
    pub timing: Timing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSchedule {
    pub entries: Vec<ScheduleEntry>,
}

impl AmplitudeSchedule {
    /// `steps` uniform steps from `a_min` up to `a_max` and back; the peak is visited once.
    pub fn symmetric(a_min: f64, a_max: f64, steps: usize, timing: Timing) -> Self {
        let up: Vec<f64> = (0..=steps)
            .map(|i| {
                if steps == 0 {
                    a_min
                } else {
                    a_min + (a_max - a_min) * i as f64 / steps as f64
                }
            })
            .collect();
        let down = up.iter().rev().skip(1).copied();
        let entries = up
            .iter()
            .copied()
            .chain(down)
            .map(|amplitude| ScheduleEntry { amplitude, timing })
            .collect();
        Self { entries }
    }

    /// 0.5 → 150 V in 60 steps and back, 15 ms dwell, 10 ms gap, 5 ms record.
    pub fn standard() -> Self {
        Self::symmetric(0.5, 150.0, 60, Timing::default())
    }

    /// Same amplitudes with the dwell chosen so the whole run lasts `total`;
    /// the record stays at the end of each dwell.
    pub fn with_total_duration(a_min: f64, a_max: f64, steps: usize, record_len: f64, total: f64) -> Self {
        let n = 2 * steps + 1;
        let dwell = total / n as f64;
        Self::symmetric(
            a_min,
            a_max,
            steps,
            Timing {
                dwell,
                record_len,
                pre_record_gap: dwell - record_len,
            },
        )
    }

    pub fn single(amplitude: f64, timing: Timing) -> Self {
        Self {
            entries: vec![ScheduleEntry { amplitude, timing }],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the first maximum-amplitude entry, which closes the loading branch.
    pub fn peak_index(&self) -> usize {
        let mut best = 0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.amplitude > self.entries[best].amplitude {
                best = i;
            }
        }
        best
    }

    pub fn total_duration(&self) -> f64 {
        self.entries.iter().map(|e| e.timing.dwell).sum()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.entries.is_empty() {
            return Err(ProtocolError::Invalid("empty amplitude schedule".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let t = e.timing;
            if !(e.amplitude > 0.0 && e.amplitude.is_finite()) {
                return Err(ProtocolError::Invalid(format!(
                    "entry {i}: amplitude {} must be > 0",
                    e.amplitude
                )));
            }
            if !(t.record_len > 0.0 && t.pre_record_gap >= 0.0 && t.dwell >= t.pre_record_gap + t.record_len - 1e-12) {
                return Err(ProtocolError::Invalid(format!(
                    "entry {i}: need dwell >= gap + record, got {t:?}"
                )));
            }
        }
        Ok(())
    }
}
