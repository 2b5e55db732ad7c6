//! Analytic steady-state response of a damped free-free bar near a
//! longitudinal mode, its single-point inversion, and the affine setup
//! calibration layered on top of it.
//!
//! Phases in a [`ResponsePoint`] live on the branch centred on `n·π`. The
//! complex transfer `Z` measured by the acquisition chain carries the phase
//! `φ − n·π`, so that on the ideal (uncalibrated) chain the resonance
//! condition is `arg Z = 0` and the calibrated chain adds `p0 + p1·f`.

mod fit;
pub mod io;

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub use fit::{fit_calibration, CalibrationFit, SweepPoint};

/// Half-width of the single-mode validity window, relative to `f_res`.
pub const VALIDITY_HALF_WIDTH: f64 = 0.25;

/// Below this phase deviation the inversion switches to the exact
/// at-resonance limit.
pub const RESONANCE_PHASE_EPS: f64 = 1e-4;

const NEGATIVE_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModaneError {
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error("frequency {f} Hz outside the single-mode window around {f_res} Hz")]
    OutsideValidity { f: f64, f_res: f64 },
    #[error("frequency {f} Hz outside calibration band [{f_min}, {f_max}] Hz")]
    CalibrationBand { f: f64, f_min: f64, f_max: f64 },
    #[error("calibration amplitude gain {gain} is not positive at {f} Hz")]
    CalibrationGain { f: f64, gain: f64 },
    #[error("degenerate measurement: amplitude {0}")]
    DegenerateMeasurement(f64),
    #[error("measurement inconsistent with the resonance model: {0}")]
    InconsistentMeasurement(String),
    #[error("sweep has {0} points, at least {1} required")]
    TooFewPoints(usize, usize),
    #[error("amplitude maximum at sweep boundary ({f} Hz): resonance not bracketed")]
    NotBracketed { f: f64 },
    #[error("calibration fit did not converge after {iterations} iterations (residual rms {residual_rms:e})")]
    Convergence { iterations: usize, residual_rms: f64 },
}

pub type Result<T, E = ModaneError> = std::result::Result<T, E>;

fn unit_scale() -> f64 {
    1.0
}

/// Intrinsic description of one longitudinal mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModaneParams {
    /// Resonance frequency [Hz].
    pub f_res: f64,
    /// Damping coefficient [1/m].
    pub alpha: f64,
    /// Bar length [m].
    pub length: f64,
    /// Longitudinal mode index, 1-based.
    pub mode_n: u32,
    /// Source amplitude `U0` of the normalized formulation.
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

impl ModaneParams {
    pub fn new(f_res: f64, alpha: f64, length: f64, mode_n: u32) -> Result<Self> {
        let p = Self {
            f_res,
            alpha,
            length,
            mode_n,
            scale: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds a model from the dimensionless damping `αL`.
    pub fn from_alpha_l(f_res: f64, alpha_l: f64, length: f64, mode_n: u32) -> Result<Self> {
        Self::new(f_res, alpha_l / length, length, mode_n)
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.scale = scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f_res", self.f_res),
            ("alpha", self.alpha),
            ("length", self.length),
            ("scale", self.scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModaneError::InvalidParams(format!("{name} = {v} must be > 0")));
            }
        }
        if self.mode_n == 0 {
            return Err(ModaneError::InvalidParams("mode_n must be >= 1".into()));
        }
        Ok(())
    }

    pub fn alpha_l(&self) -> f64 {
        self.alpha * self.length
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            length: self.length,
            mode_n: self.mode_n,
            scale: self.scale,
        }
    }

    /// Quality factor matching the phase slope at resonance, `π / (2·tanh αL)`.
    pub fn quality_factor(&self) -> f64 {
        PI / (2.0 * self.alpha_l().tanh())
    }

    /// Envelope time constant of ring-up and ring-down, `Q / (π·f_res)`.
    pub fn transient_time(&self) -> f64 {
        self.quality_factor() / (PI * self.f_res)
    }

    pub fn slope(&self) -> f64 {
        phase_slope(self.f_res, self.alpha, self.length)
    }
}

/// The part of a model that is known without measuring it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub length: f64,
    pub mode_n: u32,
    pub scale: f64,
}

impl Geometry {
    pub fn new(length: f64, mode_n: u32) -> Self {
        Self {
            length,
            mode_n,
            scale: 1.0,
        }
    }

    pub fn resonance_phase(&self) -> f64 {
        PI * self.mode_n as f64
    }
}

/// Affine setup correction: multiplicative on amplitude, additive on phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationParams {
    pub q0: f64,
    /// [1/Hz]
    pub q1: f64,
    /// [rad]
    pub p0: f64,
    /// [rad/Hz]
    pub p1: f64,
    /// Model fitted together with the correction at low amplitude.
    pub ref_model: ModaneParams,
    /// Lower edge of the band the correction is valid in [Hz].
    pub f_min: f64,
    /// Upper edge [Hz].
    pub f_max: f64,
}

impl CalibrationParams {
    /// Neutral correction over the model's validity window.
    pub fn identity(ref_model: ModaneParams) -> Self {
        Self {
            q0: 1.0,
            q1: 0.0,
            p0: 0.0,
            p1: 0.0,
            ref_model,
            f_min: ref_model.f_res * (1.0 - VALIDITY_HALF_WIDTH),
            f_max: ref_model.f_res * (1.0 + VALIDITY_HALF_WIDTH),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ref_model.validate()?;
        if !(self.f_min < self.f_max) {
            return Err(ModaneError::InvalidParams(format!(
                "calibration band [{}, {}] is empty",
                self.f_min, self.f_max
            )));
        }
        for f in [self.f_min, self.f_max] {
            let g = self.amplitude_gain(f);
            if !(g > 0.0) {
                return Err(ModaneError::CalibrationGain { f, gain: g });
            }
        }
        Ok(())
    }

    pub fn amplitude_gain(&self, f: f64) -> f64 {
        self.q0 + self.q1 * f
    }

    pub fn phase_offset(&self, f: f64) -> f64 {
        self.p0 + self.p1 * f
    }

    pub fn check_band(&self, f: f64) -> Result<()> {
        if f < self.f_min || f > self.f_max || !f.is_finite() {
            return Err(ModaneError::CalibrationBand {
                f,
                f_min: self.f_min,
                f_max: self.f_max,
            });
        }
        let gain = self.amplitude_gain(f);
        if gain <= 0.0 {
            return Err(ModaneError::CalibrationGain { f, gain });
        }
        Ok(())
    }
}

/// Normalized transfer magnitude and phase on the `n·π` branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponsePoint {
    pub amplitude: f64,
    pub phase: f64,
}

impl ResponsePoint {
    /// Complex transfer `Z` whose argument is `phase − n·π`.
    pub fn transfer(&self, mode_n: u32) -> Complex64 {
        Complex64::from_polar(self.amplitude, self.phase - PI * mode_n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionResult {
    pub f_res_est: f64,
    pub alpha_est: f64,
    /// Auxiliary quantity `r` of the closed-form inverse (diagnostic).
    pub r_intermediate: f64,
}

/// Observables after the setup correction has been removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedMeasurement {
    pub a: f64,
    pub phi: f64,
    pub delta_phi: f64,
}

impl CalibratedMeasurement {
    pub fn point(&self) -> ResponsePoint {
        ResponsePoint {
            amplitude: self.a,
            phase: self.phi,
        }
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_pi(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

fn check_window(f: f64, f_res: f64) -> Result<()> {
    if !(f.is_finite() && f > 0.0) || ((f / f_res) - 1.0).abs() > VALIDITY_HALF_WIDTH {
        return Err(ModaneError::OutsideValidity { f, f_res });
    }
    Ok(())
}

/// `(1/√(cosh²αL − cos²x), −arctan(tan x / tanh αL))` with `x = π f / f_res`.
fn shape(f: f64, f_res: f64, alpha_l: f64) -> (f64, f64) {
    // Both terms are π-periodic in x = π f / f_res; reduce before scaling by π
    // so that f = m·f_res lands exactly on x = 0.
    let ratio = f / f_res;
    let x = PI * (ratio - ratio.round());
    let (s, c) = x.sin_cos();
    // cosh² − cos² = sinh² + sin², which does not cancel near resonance.
    let denom = (alpha_l.sinh().powi(2) + s * s).sqrt();
    let phase = -(s / (c * alpha_l.tanh())).atan();
    (1.0 / denom, phase)
}

/// Steady-state amplitude and phase at drive frequency `f`.
///
/// With a calibration the source amplitude `U0` is replaced by `q0 + q1·f`
/// and the phase is offset by `p0 + p1·f`.
pub fn forward_response(f: f64, model: &ModaneParams, cal: Option<&CalibrationParams>) -> Result<ResponsePoint> {
    model.validate()?;
    check_window(f, model.f_res)?;
    let (norm, dphi) = shape(f, model.f_res, model.alpha_l());
    let base = PI * model.mode_n as f64;
    match cal {
        None => Ok(ResponsePoint {
            amplitude: model.scale * norm,
            phase: base + dphi,
        }),
        Some(cal) => {
            cal.check_band(f)?;
            Ok(ResponsePoint {
                amplitude: cal.amplitude_gain(f) * norm,
                phase: base + cal.phase_offset(f) + dphi,
            })
        }
    }
}

/// Complex transfer `Z(f)` a chain described by `cal` would deliver.
pub fn forward_transfer(f: f64, model: &ModaneParams, cal: Option<&CalibrationParams>) -> Result<Complex64> {
    forward_response(f, model, cal).map(|p| p.transfer(model.mode_n))
}

/// Closed-form estimate of `(f_res, α)` from one steady-state point.
pub fn invert_response(point: &ResponsePoint, f: f64, geometry: &Geometry) -> Result<InversionResult> {
    let a = point.amplitude;
    if !(a.is_finite() && a > 0.0) {
        return Err(ModaneError::DegenerateMeasurement(a));
    }
    if !(f.is_finite() && f > 0.0) {
        return Err(ModaneError::InvalidParams(format!("drive frequency {f}")));
    }
    let dphi = wrap_pi(point.phase - geometry.resonance_phase());
    if dphi.abs() >= FRAC_PI_2 {
        return Err(ModaneError::InconsistentMeasurement(format!(
            "phase deviation {dphi:.4} rad is off the near-resonance branch"
        )));
    }

    let u2 = (a / geometry.scale).powi(2);
    let (s2, c2) = (2.0 * dphi).sin_cos();
    let b = u2 + c2;
    let root = b.hypot(s2);
    // r = −u² − cos2φ + √(1 + u⁴ + 2u²cos2φ); rationalized when b > 0.
    let r = if b > 0.0 { s2 * s2 / (root + b) } else { root - b };
    if r < -NEGATIVE_ROOT_TOL {
        return Err(ModaneError::InconsistentMeasurement(format!("r = {r:e} < 0")));
    }
    let r = r.max(0.0);
    let (sin_p, cos_p) = dphi.sin_cos();
    let (tan2_detune, tanh2_damp) = if b > 0.0 {
        (2.0 * sin_p * sin_p / (root + b), 2.0 * cos_p * cos_p / (root + b))
    } else {
        (r / (2.0 * cos_p * cos_p), r / (2.0 * sin_p * sin_p))
    };

    if dphi.abs() < RESONANCE_PHASE_EPS {
        return Ok(InversionResult {
            f_res_est: f,
            alpha_est: (geometry.scale / a).asinh() / geometry.length,
            r_intermediate: r,
        });
    }

    if !(tanh2_damp < 1.0) || !tan2_detune.is_finite() {
        return Err(ModaneError::InconsistentMeasurement(format!(
            "tanh²(αL) = {tanh2_damp} outside [0, 1)"
        )));
    }
    let detune = tan2_detune.sqrt().atan();
    let f_res_est = f / (1.0 - dphi.signum() * detune / PI);
    let alpha_est = tanh2_damp.sqrt().atanh() / geometry.length;
    if !(f_res_est > 0.0 && alpha_est > 0.0) {
        return Err(ModaneError::InconsistentMeasurement(format!(
            "estimates f_res = {f_res_est}, alpha = {alpha_est}"
        )));
    }
    Ok(InversionResult {
        f_res_est,
        alpha_est,
        r_intermediate: r,
    })
}

/// Local phase–frequency slope at resonance, `−π / (f_res·tanh αL)` [rad/Hz].
pub fn phase_slope(f_res: f64, alpha: f64, length: f64) -> f64 {
    debug_assert!(f_res > 0.0 && alpha > 0.0 && length > 0.0);
    -PI / (f_res * (alpha * length).tanh())
}

/// Removes the setup correction from a measured transfer `Z`.
pub fn apply_calibration(z: Complex64, f: f64, cal: &CalibrationParams) -> Result<CalibratedMeasurement> {
    cal.check_band(f)?;
    let delta_phi = wrap_pi(z.arg() - cal.phase_offset(f));
    Ok(CalibratedMeasurement {
        a: z.norm() / cal.amplitude_gain(f),
        phi: delta_phi + PI * cal.ref_model.mode_n as f64,
        delta_phi,
    })
}
