use std::thread;

use serde::{Deserialize, Serialize};

use super::metrics::{detuning_kde, interquartile_range, median};
use super::{run_tracking_nrus, AmplitudeSchedule, NrusResult, ProtocolError};
use crate::modane::CalibrationParams;
use crate::plant::{Plant, PlantConfig};
use crate::tracker::{TrackerConfig, TrackingMode};

/// Grid points of each detuning density curve.
pub const KDE_GRID_POINTS: usize = 512;

/// Runs every task on its own scoped thread and returns results in input order.
fn run_parallel<T, R, F>(tasks: &[T], f: F) -> Result<Vec<R>, ProtocolError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, ProtocolError> + Sync,
{
    thread::scope(|s| {
        let handles: Vec<_> = tasks.iter().map(|t| s.spawn(|| f(t))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| ProtocolError::Task)?)
            .collect()
    })
}

/// Tracking NRUS repeated with the same amplitudes over different total durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationStudy {
    /// Total run durations [s].
    pub durations: Vec<f64>,
    pub a_min: f64,
    pub a_max: f64,
    pub steps: usize,
    /// [s]
    pub record_len: f64,
}

impl Default for DurationStudy {
    fn default() -> Self {
        Self {
            durations: vec![1.4, 5.0, 20.0, 120.0],
            a_min: 0.5,
            a_max: 150.0,
            steps: 60,
            record_len: 5e-3,
        }
    }
}

impl DurationStudy {
    pub fn schedule(&self, total: f64) -> AmplitudeSchedule {
        AmplitudeSchedule::with_total_duration(self.a_min, self.a_max, self.steps, self.record_len, total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationRun {
    /// Total duration [s].
    pub duration: f64,
    pub result: NrusResult,
    pub area_f: f64,
    pub area_alpha: f64,
    /// `(δf_res, δα)` at the highest amplitude.
    pub endpoint: (f64, f64),
}

/// One fresh plant per duration, all started from the same seed.
pub fn duration_study(
    study: &DurationStudy,
    plant_cfg: &PlantConfig,
    tracker: &TrackerConfig,
    cal: &CalibrationParams,
    seed: u64,
    fs: f64,
) -> Result<Vec<DurationRun>, ProtocolError> {
    if study.durations.is_empty() {
        return Err(ProtocolError::Invalid("duration study without durations".into()));
    }
    run_parallel(&study.durations, |&duration| {
        let mut plant = Plant::new(plant_cfg.clone(), seed).map_err(ProtocolError::plant(0))?;
        let result = run_tracking_nrus(&mut plant, tracker, cal, &study.schedule(duration), fs)?;
        Ok(DurationRun {
            duration,
            area_f: result.branches.area_f(),
            area_alpha: result.branches.area_alpha(),
            endpoint: result.branches.endpoint(),
            result,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSummary {
    pub max_abs_delta_phi: f64,
    /// Over records after the feedforward coefficient first exists; `None` if it never does.
    pub post_learning_max_abs_delta_phi: Option<f64>,
    pub loading_median_delta_phi: f64,
    pub unloading_median_delta_phi: f64,
    /// Interquartile range of `f − f_res` [Hz].
    pub detuning_iqr: f64,
    /// KDE bandwidth used for this mode [Hz].
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub mode: TrackingMode,
    pub result: NrusResult,
    pub summary: ModeSummary,
    /// `f − f_res` per record with an estimate [Hz].
    pub detuning: Vec<f64>,
    pub kde: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeAblation {
    pub runs: Vec<AblationRun>,
}

impl ModeAblation {
    pub fn run(&self, mode: TrackingMode) -> Option<&AblationRun> {
        self.runs.iter().find(|r| r.mode == mode)
    }
}

/// Silverman's rule of thumb, with a tiny floor so identical samples give a spike.
fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = interquartile_range(samples).unwrap_or(0.0) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    (0.9 * spread * n.powf(-0.2)).max(1e-6)
}

/// Summary, per-record detuning and the KDE curve of one run.
type Summarized = (ModeSummary, Vec<f64>, Vec<(f64, f64)>);

fn summarize(result: &NrusResult, peak: usize, bandwidth: Option<f64>) -> Result<Summarized, ProtocolError> {
    let recs = &result.records;
    let dphi = |r: &crate::tracker::IterationRecord| r.delta_phi;
    let max_abs = |rs: &[crate::tracker::IterationRecord]| rs.iter().map(|r| r.delta_phi.abs()).reduce(f64::max);

    let learned = recs.iter().position(|r| r.l.is_some());
    let loading: Vec<f64> = recs[..=peak.min(recs.len() - 1)].iter().map(dphi).collect();
    let unloading: Vec<f64> = recs[peak.min(recs.len() - 1)..].iter().map(dphi).collect();
    let detuning: Vec<f64> = recs.iter().filter_map(|r| Some(r.f - r.f_res_est?)).collect();
    if detuning.len() < 2 {
        return Err(ProtocolError::NoData(format!(
            "{} records carry a resonance estimate",
            detuning.len()
        )));
    }
    let bandwidth = bandwidth.unwrap_or_else(|| silverman_bandwidth(&detuning));
    let kde = detuning_kde(&detuning, bandwidth, KDE_GRID_POINTS)?;
    let summary = ModeSummary {
        max_abs_delta_phi: max_abs(recs).unwrap_or(0.0),
        post_learning_max_abs_delta_phi: learned.and_then(|i| max_abs(&recs[i..])),
        loading_median_delta_phi: median(&loading).unwrap_or(0.0),
        unloading_median_delta_phi: median(&unloading).unwrap_or(0.0),
        detuning_iqr: interquartile_range(&detuning).unwrap_or(0.0),
        bandwidth,
    };
    Ok((summary, detuning, kde))
}

/// Runs the same schedule once per tracking mode on identical plants.
pub fn mode_ablation(
    plant_cfg: &PlantConfig,
    tracker: &TrackerConfig,
    cal: &CalibrationParams,
    schedule: &AmplitudeSchedule,
    kde_bandwidth: Option<f64>,
    seed: u64,
    fs: f64,
) -> Result<ModeAblation, ProtocolError> {
    if let Some(bw) = kde_bandwidth {
        if !(bw > 0.0) {
            return Err(ProtocolError::Invalid(format!("kde bandwidth {bw} must be > 0")));
        }
    }
    let peak = schedule.peak_index();
    let runs = run_parallel(&TrackingMode::ALL, |&mode| {
        let mut plant = Plant::new(plant_cfg.clone(), seed).map_err(ProtocolError::plant(0))?;
        let result = run_tracking_nrus(&mut plant, &tracker.clone().with_mode(mode), cal, schedule, fs)?;
        let (summary, detuning, kde) = summarize(&result, peak, kde_bandwidth)?;
        Ok(AblationRun {
            mode,
            result,
            summary,
            detuning,
            kde,
        })
    })?;
    Ok(ModeAblation { runs })
}
