use serde::{Deserialize, Serialize};

use super::{acquire, branch_points, finish_dwell, AmplitudeSchedule, Branches, ProtocolError};
use crate::modane::{CalibrationParams, ModaneParams};
use crate::plant::{Drive, Plant};
use crate::tracker::{process_iteration, IterationRecord, Measurement, TrackerConfig, TrackerState};

/// Records closer than this many transient times to the command change are flagged.
pub const SETTLE_TRANSIENT_TIMES: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NrusResult {
    pub records: Vec<IterationRecord>,
    /// Per record: the pre-record gap covered `5·τ_tr` at the estimated parameters.
    pub settled: Vec<bool>,
    pub branches: Branches,
}

impl NrusResult {
    pub fn unsettled(&self) -> usize {
        self.settled.iter().filter(|s| !**s).count()
    }
}

fn initial_state(cfg: &TrackerConfig, cal: &CalibrationParams, amplitude: f64) -> TrackerState {
    let k = cfg.k_init.unwrap_or_else(|| cal.ref_model.slope());
    TrackerState::new(cal.ref_model.f_res, amplitude, Some(k))
}

/// Transient time at the iteration's estimates, or at the reference model without them.
fn estimated_transient_time(cal: &CalibrationParams, rec: &IterationRecord) -> f64 {
    let model = match (rec.f_res_est, rec.alpha_est) {
        (Some(f_res), Some(alpha)) => ModaneParams {
            f_res,
            alpha,
            ..cal.ref_model
        },
        _ => cal.ref_model,
    };
    model.transient_time()
}

fn to_measurement(acq: &super::Acquisition) -> Measurement {
    Measurement {
        t: acq.t,
        a: acq.meas.a,
        delta_phi: acq.meas.delta_phi,
        strain: acq.strain,
    }
}

/// Resonance-tracking NRUS over `schedule`.
pub fn run_tracking_nrus(
    plant: &mut Plant,
    tracker: &TrackerConfig,
    cal: &CalibrationParams,
    schedule: &AmplitudeSchedule,
    fs: f64,
) -> Result<NrusResult, ProtocolError> {
    schedule.validate()?;
    let geometry = cal.ref_model.geometry();
    let mut state = initial_state(tracker, cal, schedule.entries[0].amplitude);
    let mut records = Vec::with_capacity(schedule.len());
    let mut settled = Vec::with_capacity(schedule.len());

    for (idx, entry) in schedule.entries.iter().enumerate() {
        let t = entry.timing;
        let drive = Drive {
            f: state.f_i,
            amplitude: entry.amplitude,
        };
        let err = ProtocolError::plant(idx);
        plant.advance(drive, t.pre_record_gap).map_err(err)?;
        let acq = acquire(plant, cal, t.record_len, fs, idx)?;
        finish_dwell(plant, &t, idx)?;

        let next_a = schedule.entries.get(idx + 1).map_or(entry.amplitude, |e| e.amplitude);
        let step = process_iteration(&state, tracker, &to_measurement(&acq), &geometry, next_a);
        settled.push(t.pre_record_gap >= SETTLE_TRANSIENT_TIMES * estimated_transient_time(cal, &step.record));
        records.push(step.record);
        state = step.state;
    }

    let branches = Branches::from_points(&branch_points(&records), schedule.peak_index());
    Ok(NrusResult {
        records,
        settled,
        branches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Precondition,
    Conditioning,
    Relaxation,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Self::Precondition => "precondition",
            Self::Conditioning => "conditioning",
            Self::Relaxation => "relaxation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    /// Drive amplitude [V].
    pub amplitude: f64,
    /// [s]
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondRelaxPhases {
    pub precondition: PhaseSpec,
    pub conditioning: PhaseSpec,
    pub relaxation: PhaseSpec,
    /// Length of each back-to-back iteration [s].
    pub record_len: f64,
}

impl Default for CondRelaxPhases {
    fn default() -> Self {
        Self {
            precondition: PhaseSpec {
                amplitude: 0.5,
                duration: 10.0,
            },
            conditioning: PhaseSpec {
                amplitude: 150.0,
                duration: 60.0,
            },
            relaxation: PhaseSpec {
                amplitude: 0.5,
                duration: 600.0,
            },
            record_len: 5e-3,
        }
    }
}

impl CondRelaxPhases {
    fn iterations(&self, p: &PhaseSpec) -> usize {
        (p.duration / self.record_len).round() as usize
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.record_len > 0.0) {
            return Err(ProtocolError::Invalid(format!(
                "record_len {} must be > 0",
                self.record_len
            )));
        }
        for (name, p) in [
            ("precondition", self.precondition),
            ("conditioning", self.conditioning),
            ("relaxation", self.relaxation),
        ] {
            if !(p.amplitude > 0.0 && p.duration >= 0.0) {
                return Err(ProtocolError::Invalid(format!("{name}: {p:?}")));
            }
        }
        if self.iterations(&self.relaxation) == 0 || self.iterations(&self.conditioning) == 0 {
            return Err(ProtocolError::Invalid(
                "conditioning and relaxation need at least one iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    /// Plant clock at the start of the record [s].
    pub t: f64,
    pub phase: Phase,
    pub amplitude: f64,
    pub f: f64,
    pub delta_phi: f64,
    pub f_res: Option<f64>,
    pub alpha: Option<f64>,
    pub inhibited: bool,
    /// The record starts at least `5·τ_tr` after the last amplitude change.
    pub settled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondRelaxResult {
    pub points: Vec<TimePoint>,
    pub records: Vec<IterationRecord>,
    pub conditioning_start: f64,
    pub relaxation_start: f64,
    pub record_len: f64,
}

impl CondRelaxResult {
    pub fn unsettled(&self) -> usize {
        self.points.iter().filter(|p| !p.settled).count()
    }

    fn series(&self, phase: Phase, start: f64) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.phase == phase)
            .filter_map(|p| Some((p.t - start + 0.5 * self.record_len, p.f_res?)))
            .collect()
    }

    /// `(time since relaxation onset at the window centre, f_res)`.
    pub fn relaxation_series(&self) -> Vec<(f64, f64)> {
        self.series(Phase::Relaxation, self.relaxation_start)
    }

    pub fn conditioning_series(&self) -> Vec<(f64, f64)> {
        self.series(Phase::Conditioning, self.conditioning_start)
    }
}

/// Precondition, conditioning and relaxation with back-to-back iterations;
/// every downward amplitude step starts `inhibition_iters` held iterations.
pub fn run_cond_relax(
    plant: &mut Plant,
    tracker: &TrackerConfig,
    cal: &CalibrationParams,
    phases: &CondRelaxPhases,
    fs: f64,
) -> Result<CondRelaxResult, ProtocolError> {
    phases.validate()?;
    let plan: Vec<(Phase, f64)> = [
        (Phase::Precondition, phases.precondition),
        (Phase::Conditioning, phases.conditioning),
        (Phase::Relaxation, phases.relaxation),
    ]
    .iter()
    .flat_map(|&(ph, spec)| std::iter::repeat_n((ph, spec.amplitude), phases.iterations(&spec)))
    .collect();

    let geometry = cal.ref_model.geometry();
    let mut state = initial_state(tracker, cal, plan[0].1);
    let mut points = Vec::with_capacity(plan.len());
    let mut records = Vec::with_capacity(plan.len());
    let (mut cond_start, mut relax_start) = (None, None);
    let mut last_change = f64::NEG_INFINITY;

    for (idx, &(phase, amplitude)) in plan.iter().enumerate() {
        let drive = Drive {
            f: state.f_i,
            amplitude,
        };
        plant.command(drive).map_err(ProtocolError::plant(idx))?;
        if idx > 0 && amplitude != plan[idx - 1].1 {
            last_change = plant.time();
        }
        match phase {
            Phase::Conditioning => cond_start = cond_start.or(Some(plant.time())),
            Phase::Relaxation => relax_start = relax_start.or(Some(plant.time())),
            Phase::Precondition => {}
        }
        let acq = acquire(plant, cal, phases.record_len, fs, idx)?;
        let next_a = plan.get(idx + 1).map_or(amplitude, |p| p.1);
        let step = process_iteration(&state, tracker, &to_measurement(&acq), &geometry, next_a);
        state = step.state;
        if next_a < amplitude {
            state.inhibit(tracker.inhibition_iters);
        }
        points.push(TimePoint {
            t: acq.t,
            phase,
            amplitude,
            f: acq.f,
            delta_phi: acq.meas.delta_phi,
            f_res: step.record.f_res_est,
            alpha: step.record.alpha_est,
            inhibited: step.record.inhibited,
            settled: acq.t - last_change >= SETTLE_TRANSIENT_TIMES * estimated_transient_time(cal, &step.record),
        });
        records.push(step.record);
    }

    Ok(CondRelaxResult {
        points,
        records,
        conditioning_start: cond_start.unwrap_or(0.0),
        relaxation_start: relax_start.unwrap_or(0.0),
        record_len: phases.record_len,
    })
}
