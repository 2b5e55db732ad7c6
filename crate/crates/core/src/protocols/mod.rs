//! Experiments run against the virtual resonator: tracking NRUS, sweep
//! NRUS, setup calibration, conditioning–relaxation, and the batch studies
//! built on them.
//!
//! Every protocol runs on the plant clock and owns its plant exclusively.
//! Batch studies start one fresh plant per task and run the tasks on scoped
//! threads.

mod batch;
mod export;
pub mod metrics;
mod schedule;
mod sweep;
mod tracking;

use num_complex::Complex64;

use crate::dsp::{self, DspError};
use crate::modane::{apply_calibration, CalibratedMeasurement, CalibrationParams, ModaneError};
use crate::plant::{Plant, PlantError};
use crate::tracker::IterationRecord;

pub use batch::{
    duration_study, mode_ablation, AblationRun, DurationRun, DurationStudy, ModeAblation, ModeSummary, KDE_GRID_POINTS,
};
pub use export::{write_branches_csv, write_kde_csv, write_metrics_csv, write_sweep_curves_csv, write_timeseries_csv};
pub use schedule::{AmplitudeSchedule, ScheduleEntry, Timing};
pub use sweep::{
    calibrate, run_sweep_nrus, CalibrationRun, CalibrationSweep, CurvePoint, SweepCurve, SweepNrusResult, SweepRange,
};
pub use tracking::{
    run_cond_relax, run_tracking_nrus, CondRelaxPhases, CondRelaxResult, NrusResult, Phase, PhaseSpec, TimePoint,
    SETTLE_TRANSIENT_TIMES,
};

/// Sample rate of the reference acquisition hardware [S/s].
pub const DEFAULT_SAMPLE_RATE: f64 = 5e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("invalid protocol parameters: {0}")]
    Invalid(String),
    #[error("insufficient data: {0}")]
    NoData(String),
    #[error("step {index}: plant: {source}")]
    Plant { index: usize, source: PlantError },
    #[error("step {index}: signal processing: {source}")]
    Dsp { index: usize, source: DspError },
    #[error("step {index}: calibration: {source}")]
    Calibration { index: usize, source: ModaneError },
    #[error("calibration fit: {0}")]
    Fit(ModaneError),
    #[error("batch task panicked")]
    Task,
}

impl ProtocolError {
    fn plant(index: usize) -> impl FnOnce(PlantError) -> Self {
        move |source| Self::Plant { index, source }
    }
}

/// One point of an indicator-vs-strain branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchPoint {
    /// Drive amplitude [V].
    pub amplitude: f64,
    pub strain: f64,
    pub f_res: f64,
    pub alpha: f64,
    /// `(f_res − f_res,0) / f_res,0`.
    pub dfr_rel: f64,
    /// `(α − α0) / α0`.
    pub dalpha_rel: f64,
}

/// Loading and unloading branches; both contain the peak-amplitude point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Branches {
    pub loading: Vec<BranchPoint>,
    pub unloading: Vec<BranchPoint>,
    /// Reference point: the first valid estimate of the run.
    pub f_res_ref: f64,
    pub alpha_ref: f64,
}

impl Branches {
    /// Builds branches from `(amplitude, strain, f_res, alpha)` tuples in schedule
    /// order; `peak` is the schedule index that closes the loading branch.
    pub fn from_points(points: &[(usize, f64, f64, f64, f64)], peak: usize) -> Self {
        let Some(&(_, _, _, f0, a0)) = points.first() else {
            return Self::default();
        };
        let bp = |&(_, amplitude, strain, f_res, alpha): &(usize, f64, f64, f64, f64)| BranchPoint {
            amplitude,
            strain,
            f_res,
            alpha,
            dfr_rel: (f_res - f0) / f0,
            dalpha_rel: (alpha - a0) / a0,
        };
        Self {
            loading: points.iter().filter(|p| p.0 <= peak).map(bp).collect(),
            unloading: points.iter().filter(|p| p.0 >= peak).map(bp).collect(),
            f_res_ref: f0,
            alpha_ref: a0,
        }
    }

    /// Loop area of `δf_res(ε)`.
    pub fn area_f(&self) -> f64 {
        self.area(|p| p.dfr_rel)
    }

    /// Loop area of `δα(ε)`.
    pub fn area_alpha(&self) -> f64 {
        self.area(|p| p.dalpha_rel)
    }

    /// The unloading branch is stored in time order, so it is reversed to
    /// share the loading branch's amplitude ordering before closing the loop.
    fn area(&self, y: impl Fn(&BranchPoint) -> f64) -> f64 {
        let load: Vec<_> = self.loading.iter().map(|p| (p.strain, y(p))).collect();
        let unload: Vec<_> = self.unloading.iter().rev().map(|p| (p.strain, y(p))).collect();
        metrics::loop_area(&load, &unload)
    }

    pub fn endpoint(&self) -> (f64, f64) {
        metrics::endpoint(self)
    }
}

/// One recorded window reduced to calibrated observables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Acquisition {
    pub t: f64,
    pub f: f64,
    pub z: Complex64,
    pub meas: CalibratedMeasurement,
    pub strain: f64,
}

/// Records `record_len` at the current command and reduces it.
pub(crate) fn acquire(
    plant: &mut Plant,
    cal: &CalibrationParams,
    record_len: f64,
    fs: f64,
    index: usize,
) -> Result<Acquisition, ProtocolError> {
    let t = plant.time();
    let f = plant.state().drive.f;
    let v_l = plant.config().v_l;
    let (tx, rx) = plant.record(record_len, fs).map_err(ProtocolError::plant(index))?;
    let dsp_err = |source| ProtocolError::Dsp { index, source };
    let z = dsp::transfer_ratio(&tx, &rx, f).map_err(dsp_err)?.to_complex();
    let rx_amp = dsp::single_bin_dft(&rx, f).map_err(dsp_err)?.magnitude;
    let meas = apply_calibration(z, f, cal).map_err(|source| ProtocolError::Calibration { index, source })?;
    Ok(Acquisition {
        t,
        f,
        z,
        meas,
        strain: dsp::velocity_to_strain(rx_amp, v_l),
    })
}

/// Holds the command for the part of the dwell after the record.
pub(crate) fn finish_dwell(plant: &mut Plant, timing: &Timing, index: usize) -> Result<(), ProtocolError> {
    let rest = timing.dwell - timing.pre_record_gap - timing.record_len;
    if rest > 0.0 {
        plant.hold(rest).map_err(ProtocolError::plant(index))?;
    }
    Ok(())
}

/// Indicator points from iteration records that carry estimates.
pub(crate) fn branch_points(records: &[IterationRecord]) -> Vec<(usize, f64, f64, f64, f64)> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| Some((i, r.amplitude, r.strain, r.f_res_est?, r.alpha_est?)))
        .collect()
}
