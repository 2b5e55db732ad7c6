use serde::{Deserialize, Serialize};

use super::{acquire, finish_dwell, AmplitudeSchedule, Branches, ProtocolError, Timing};
use crate::modane::{fit_calibration, invert_response, CalibrationFit, CalibrationParams, SweepPoint};
use crate::plant::{Drive, Plant};

/// Stepped-sine frequency grid relative to the calibrated reference resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepRange {
    /// Span below the reference resonance [Hz].
    pub below: f64,
    /// Span above the reference resonance [Hz].
    pub above: f64,
    /// [Hz]
    pub step: f64,
    pub timing: Timing,
}

impl Default for SweepRange {
    fn default() -> Self {
        Self {
            below: 500.0,
            above: 300.0,
            step: 5.0,
            timing: Timing::default(),
        }
    }
}

impl SweepRange {
    pub fn frequencies(&self, f_ref: f64) -> Vec<f64> {
        let n = ((self.below + self.above) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| f_ref - self.below + i as f64 * self.step).collect()
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if !(self.step > 0.0 && self.below + self.above >= 2.0 * self.step) {
            return Err(ProtocolError::Invalid(format!(
                "sweep needs step > 0 and at least three frequencies, got {self:?}"
            )));
        }
        AmplitudeSchedule::single(1.0, self.timing).validate()
    }
}

/// One point of a resonance curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub f: f64,
    pub a: f64,
    pub phi: f64,
    pub delta_phi: f64,
    pub strain: f64,
}

/// Resonance curve at one drive amplitude and its peak-based estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub amplitude: f64,
    pub points: Vec<CurvePoint>,
    /// Index of the largest calibrated amplitude.
    pub peak: usize,
    /// Peak on the first or last frequency: the resonance left the range.
    pub flagged: bool,
    pub f_res: Option<f64>,
    pub alpha: Option<f64>,
}

impl SweepCurve {
    pub fn peak_point(&self) -> &CurvePoint {
        &self.points[self.peak]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepNrusResult {
    pub curves: Vec<SweepCurve>,
    /// Built from unflagged curves with a valid estimate.
    pub branches: Branches,
}

impl SweepNrusResult {
    pub fn flagged(&self) -> usize {
        self.curves.iter().filter(|c| c.flagged).count()
    }
}

/// Conventional stepped-sine NRUS: a full sweep at every schedule amplitude,
/// with the plant running continuously across all of them.
pub fn run_sweep_nrus(
    plant: &mut Plant,
    cal: &CalibrationParams,
    range: &SweepRange,
    schedule: &AmplitudeSchedule,
    fs: f64,
) -> Result<SweepNrusResult, ProtocolError> {
    range.validate()?;
    schedule.validate()?;
    let freqs = range.frequencies(cal.ref_model.f_res);
    let geometry = cal.ref_model.geometry();
    let t = range.timing;
    let mut curves = Vec::with_capacity(schedule.len());
    let mut index = 0;

    for entry in &schedule.entries {
        let mut points = Vec::with_capacity(freqs.len());
        for &f in &freqs {
            let drive = Drive {
                f,
                amplitude: entry.amplitude,
            };
            plant
                .advance(drive, t.pre_record_gap)
                .map_err(ProtocolError::plant(index))?;
            let acq = acquire(plant, cal, t.record_len, fs, index)?;
            finish_dwell(plant, &t, index)?;
            points.push(CurvePoint {
                f,
                a: acq.meas.a,
                phi: acq.meas.phi,
                delta_phi: acq.meas.delta_phi,
                strain: acq.strain,
            });
            index += 1;
        }
        let peak = points
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.a.total_cmp(&b.1.a))
            .map_or(0, |(i, _)| i);
        let flagged = peak == 0 || peak == points.len() - 1;
        let p = points[peak];
        let point = crate::modane::ResponsePoint {
            amplitude: p.a,
            phase: p.phi,
        };
        let est = invert_response(&point, p.f, &geometry).ok();
        curves.push(SweepCurve {
            amplitude: entry.amplitude,
            points,
            peak,
            flagged,
            f_res: est.map(|e| e.f_res_est),
            alpha: est.map(|e| e.alpha_est),
        });
    }

    let pts: Vec<_> = curves
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.flagged)
        .filter_map(|(i, c)| Some((i, c.amplitude, c.peak_point().strain, c.f_res?, c.alpha?)))
        .collect();
    let branches = Branches::from_points(&pts, schedule.peak_index());
    Ok(SweepNrusResult { curves, branches })
}

/// Low-amplitude sweep that identifies the setup corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSweep {
    /// Drive amplitude [V].
    pub amplitude: f64,
    /// Total span [Hz].
    pub span: f64,
    /// [Hz]
    pub step: f64,
    /// Sweep centre [Hz]; the nominal resonance of the plant when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    pub timing: Timing,
}

impl Default for CalibrationSweep {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            span: 1600.0,
            step: 8.0,
            center: None,
            timing: Timing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRun {
    pub fit: CalibrationFit,
    pub sweep: Vec<SweepPoint>,
}

/// Runs the calibration sweep on `plant` and fits the setup corrections.
/// Geometry `(L, n)` is taken from the plant's nominal model.
pub fn calibrate(plant: &mut Plant, sweep: &CalibrationSweep, fs: f64) -> Result<CalibrationRun, ProtocolError> {
    let nominal = plant.config().base_model;
    let center = sweep.center.unwrap_or(nominal.f_res);
    let range = SweepRange {
        below: 0.5 * sweep.span,
        above: 0.5 * sweep.span,
        step: sweep.step,
        timing: sweep.timing,
    };
    range.validate()?;
    if !(sweep.amplitude > 0.0) {
        return Err(ProtocolError::Invalid(format!(
            "calibration amplitude {} must be > 0",
            sweep.amplitude
        )));
    }
    let t = sweep.timing;
    let mut points = Vec::new();
    for (index, f) in range.frequencies(center).into_iter().enumerate() {
        let drive = Drive {
            f,
            amplitude: sweep.amplitude,
        };
        plant
            .advance(drive, t.pre_record_gap)
            .map_err(ProtocolError::plant(index))?;
        let (tx, rx) = plant.record(t.record_len, fs).map_err(ProtocolError::plant(index))?;
        finish_dwell(plant, &t, index)?;
        let z = crate::dsp::transfer_ratio(&tx, &rx, f)
            .map_err(|source| ProtocolError::Dsp { index, source })?
            .to_complex();
        points.push(SweepPoint { f, z });
    }
    let fit = fit_calibration(&points, &nominal.geometry()).map_err(ProtocolError::Fit)?;
    Ok(CalibrationRun { fit, sweep: points })
}
