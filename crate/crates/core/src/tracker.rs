//! Discrete-time resonance tracker: phase feedback through the local slope
//! `k`, amplitude feedforward through the learned coefficient `ℓ`, both
//! smoothed by exponential moving averages, plus ring-down inhibition.

use std::f64::consts::PI;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::modane::{invert_response, phase_slope, Geometry, ResponsePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingMode {
    /// Frequency never moves.
    Off,
    /// Feedback with the slope from the linear characterization.
    FixedK,
    /// Feedback with the slope re-estimated each iteration.
    AdaptiveK,
    /// Adaptive feedback plus amplitude feedforward.
    Full,
}

impl TrackingMode {
    pub const ALL: [TrackingMode; 4] = [Self::Off, Self::FixedK, Self::AdaptiveK, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Off => "off",
            Self::FixedK => "fixed_k",
            Self::AdaptiveK => "adaptive_k",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub beta: f64,
    pub beta_prime: f64,
    pub mode: TrackingMode,
    /// Iterations held after each downward amplitude step.
    pub inhibition_iters: u32,
    /// Initial slope [rad/Hz]; taken from the reference model when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_init: Option<f64>,
    /// Phase deviation the loop regulates to [rad].
    pub phi_target: f64,
    /// Use `− ℓ·ΔA` instead of `+ ℓ·ΔA` in the frequency update.
    pub subtract_feedforward: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            beta_prime: 0.5,
            mode: TrackingMode::Full,
            inhibition_iters: 2,
            k_init: None,
            phi_target: 0.0,
            subtract_feedforward: false,
        }
    }
}

impl TrackerConfig {
    pub fn with_mode(mut self, mode: TrackingMode) -> Self {
        self.mode = mode;
        self
    }

    /// Returns the offending field name and message on failure.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, v) in [("beta", self.beta), ("beta_prime", self.beta_prime)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err((name, format!("{v} outside (0, 1]")));
            }
        }
        if let Some(k) = self.k_init {
            if !(k < 0.0 && k.is_finite()) {
                return Err(("k_init", format!("{k} must be negative")));
            }
        }
        if !(self.phi_target.is_finite() && self.phi_target.abs() < PI / 2.0) {
            return Err(("phi_target", format!("{} outside (−π/2, π/2)", self.phi_target)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerState {
    pub i: u64,
    /// Drive frequency for the current iteration [Hz].
    pub f_i: f64,
    /// Drive amplitude for the current iteration [V].
    pub a_i: f64,
    pub k: Option<f64>,
    pub l: Option<f64>,
    /// Last valid resonance estimate and the drive amplitude it was taken at.
    pub f_res_prev: Option<f64>,
    pub a_prev: Option<f64>,
    pub inhibit_remaining: u32,
}

impl TrackerState {
    pub fn new(f_start: f64, a_start: f64, k_init: Option<f64>) -> Self {
        Self {
            i: 0,
            f_i: f_start,
            a_i: a_start,
            k: k_init,
            l: None,
            f_res_prev: None,
            a_prev: None,
            inhibit_remaining: 0,
        }
    }

    /// Holds frequency and coefficients for the next `n` iterations.
    pub fn inhibit(&mut self, n: u32) {
        self.inhibit_remaining = self.inhibit_remaining.max(n);
    }
}

/// Observables of one iteration after calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// Acquisition time [s].
    pub t: f64,
    pub a: f64,
    pub delta_phi: f64,
    pub strain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub i: u64,
    pub t: f64,
    pub f: f64,
    /// Drive amplitude [V].
    pub amplitude: f64,
    /// Calibrated response amplitude.
    pub a: f64,
    pub delta_phi: f64,
    pub f_res_est: Option<f64>,
    pub alpha_est: Option<f64>,
    pub k: Option<f64>,
    pub l: Option<f64>,
    pub strain: f64,
    pub inhibited: bool,
    /// The inversion rejected the measurement.
    pub inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: TrackerState,
    pub f_next: f64,
    pub record: IterationRecord,
}

pub fn update_phase_slope(k_prev: f64, f_res_est: f64, alpha_est: f64, length: f64, beta: f64) -> f64 {
    beta * phase_slope(f_res_est, alpha_est, length) + (1.0 - beta) * k_prev
}

pub fn update_amp_coeff(
    l_prev: Option<f64>,
    f_res_est: f64,
    f_res_prev: f64,
    a_i: f64,
    a_prev: f64,
    beta_prime: f64,
) -> Option<f64> {
    if a_i == a_prev {
        return l_prev;
    }
    let inst = (f_res_est - f_res_prev) / (a_i - a_prev);
    Some(match l_prev {
        None => inst,
        Some(l) => beta_prime * inst + (1.0 - beta_prime) * l,
    })
}

/// One tracker iteration on a measurement taken at `(state.f_i, state.a_i)`.
pub fn process_iteration(
    state: &TrackerState,
    cfg: &TrackerConfig,
    meas: &Measurement,
    geometry: &Geometry,
    next_a: f64,
) -> Step {
    let mut s = state.clone();
    let mut record = IterationRecord {
        i: state.i,
        t: meas.t,
        f: state.f_i,
        amplitude: state.a_i,
        a: meas.a,
        delta_phi: meas.delta_phi,
        f_res_est: None,
        alpha_est: None,
        k: state.k,
        l: state.l,
        strain: meas.strain,
        inhibited: false,
        inconsistent: false,
    };
    let hold = |mut s: TrackerState, record| {
        let f_next = s.f_i;
        s.i += 1;
        s.a_i = next_a;
        Step {
            state: s,
            f_next,
            record,
        }
    };

    if s.inhibit_remaining > 0 {
        s.inhibit_remaining -= 1;
        record.inhibited = true;
        return hold(s, record);
    }

    let point = ResponsePoint {
        amplitude: meas.a,
        phase: meas.delta_phi + geometry.resonance_phase(),
    };
    let inv = match invert_response(&point, state.f_i, geometry) {
        Ok(inv) => inv,
        Err(_) => {
            record.inconsistent = true;
            s.inhibit(1);
            return hold(s, record);
        }
    };
    record.f_res_est = Some(inv.f_res_est);
    record.alpha_est = Some(inv.alpha_est);

    let adaptive = matches!(cfg.mode, TrackingMode::AdaptiveK | TrackingMode::Full);
    s.k = match s.k {
        None => Some(phase_slope(inv.f_res_est, inv.alpha_est, geometry.length)),
        Some(k) if adaptive => Some(update_phase_slope(
            k,
            inv.f_res_est,
            inv.alpha_est,
            geometry.length,
            cfg.beta,
        )),
        keep => keep,
    };
    if cfg.mode == TrackingMode::Full {
        if let (Some(f_prev), Some(a_prev)) = (s.f_res_prev, s.a_prev) {
            s.l = update_amp_coeff(s.l, inv.f_res_est, f_prev, state.a_i, a_prev, cfg.beta_prime);
        }
    }
    s.f_res_prev = Some(inv.f_res_est);
    s.a_prev = Some(state.a_i);
    record.k = s.k;
    record.l = s.l;

    let k = s.k.expect("slope set above");
    let feedback = -(meas.delta_phi - cfg.phi_target) / k;
    let f_next = match cfg.mode {
        TrackingMode::Off => state.f_i,
        TrackingMode::FixedK | TrackingMode::AdaptiveK => state.f_i + feedback,
        TrackingMode::Full => {
            let sign = if cfg.subtract_feedforward { -1.0 } else { 1.0 };
            state.f_i + feedback + s.l.map_or(0.0, |l| sign * l * (next_a - state.a_i))
        }
    };
    s.i += 1;
    s.f_i = f_next;
    s.a_i = next_a;
    Step {
        state: s,
        f_next,
        record,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `i, t_s, f_hz, a_v, delta_phi_rad, f_res_hz, alpha_per_m, k_rad_per_hz, l_hz_per_v, strain`;
/// `a_v` is the drive amplitude and missing values are empty cells.
pub fn write_iterations_csv<W: Write>(w: W, records: &[IterationRecord]) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "i",
        "t_s",
        "f_hz",
        "a_v",
        "delta_phi_rad",
        "f_res_hz",
        "alpha_per_m",
        "k_rad_per_hz",
        "l_hz_per_v",
        "strain",
    ])?;
    for r in records {
        wtr.write_record([
            r.i.to_string(),
            r.t.to_string(),
            r.f.to_string(),
            r.amplitude.to_string(),
            r.delta_phi.to_string(),
            opt(r.f_res_est),
            opt(r.alpha_est),
            opt(r.k),
            opt(r.l),
            r.strain.to_string(),
        ])?;
    }
    wtr.flush()
}
