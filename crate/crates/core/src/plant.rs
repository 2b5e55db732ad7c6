//! Virtual nonlinear resonator driven at `(f, A)` and observed through the
//! synthetic acquisition chain.
//!
//! The resonance frequency and damping move with strain in two ways:
//!
//! * a fast share that follows the current steady-state strain immediately;
//! * a slow share scaled by the conditioning level `C = Σ w_r s_r` of a bank
//!   of first-order relaxators with log-uniformly spaced time constants.
//!
//! Each relaxator state `s_r` moves toward the normalized target
//! `c(ε) = min(1, δf_eq(ε) / δf_eq(ε_ref))`. Conditioning (target above the
//! state) runs `conditioning_rate_ratio` times faster than relaxation, which
//! is what leaves a log-time recovery after a conditioning phase of limited
//! length.
//!
//! The received signal is `Re{S·e^{jθ} + T}` where `S` is the calibrated
//! steady-state phasor at the drive, `θ` the continuous drive phase and `T`
//! a free transient rotating at the current resonance and decaying with
//! `τ_tr = Q / (π f_res)`. Whenever `S` changes, `T` absorbs the jump so the
//! signal stays continuous.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::WaveformWindow;
use crate::modane::{forward_transfer, CalibrationParams, ModaneError, ModaneParams};

/// Longest internal integration step [s].
pub const MAX_SUBSTEP: f64 = 1e-3;

const STRAIN_REL_TOL: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("invalid plant configuration: {0}")]
    Config(String),
    #[error("drive outside the plant's validity band: {0}")]
    Drive(#[from] ModaneError),
    #[error("invalid time step {0} s")]
    TimeStep(f64),
}

pub type Result<T, E = PlantError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxatorBank {
    /// Shortest time constant [s].
    pub tau_min: f64,
    /// Longest time constant [s].
    pub tau_max: f64,
    /// Relaxators per decade of time constant.
    pub per_decade: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relaxator {
    pub weight: f64,
    pub tau: f64,
}

impl RelaxatorBank {
    /// Equal weights, `τ` log-uniform over `[tau_min, tau_max]` inclusive.
    pub fn relaxators(&self) -> Vec<Relaxator> {
        let decades = (self.tau_max / self.tau_min).log10();
        let n = ((decades * self.per_decade as f64).round() as usize).max(1) + 1;
        let w = 1.0 / n as f64;
        (0..n)
            .map(|i| Relaxator {
                weight: w,
                tau: self.tau_min * 10f64.powf(decades * i as f64 / (n - 1).max(1) as f64),
            })
            .collect()
    }
}

impl Default for RelaxatorBank {
    fn default() -> Self {
        Self {
            tau_min: 3e-3,
            tau_max: 3e3,
            per_decade: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    /// Linear (zero-strain) mode.
    pub base_model: ModaneParams,
    /// Longitudinal wave speed [m/s].
    pub v_l: f64,
    /// Monitor amplitude per drive volt (tx = ratio · A).
    pub monitor_ratio: f64,
    /// `c_q` [Hz/strain²]; must equal `c_l / (2 ε_x)` when `ε_x > 0`.
    pub softening_quadratic: f64,
    /// `c_l` [Hz/strain].
    pub softening_linear: f64,
    /// `ε_x`; zero gives purely linear softening.
    pub crossover_strain: f64,
    /// `d_l` [(1/m)/strain].
    pub damping_gain: f64,
    /// Strain at which the conditioning target saturates.
    pub reference_strain: f64,
    /// Share of the equilibrium shift that follows strain instantly.
    pub fast_share: f64,
    /// Conditioning rate over relaxation rate for each relaxator.
    pub conditioning_rate_ratio: f64,
    pub relaxators: RelaxatorBank,
    /// Gaussian rx noise RMS relative to the steady rx amplitude.
    pub noise_rms: f64,
    /// Setup transfer embedded in the synthetic chain.
    pub true_cal: CalibrationParams,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let base_model = ModaneParams {
            f_res: 8500.0,
            alpha: 0.03 / 0.14,
            length: 0.14,
            mode_n: 1,
            scale: 1.0,
        };
        let softening_linear = 1.82e7;
        let crossover_strain = 2e-6;
        Self {
            base_model,
            v_l: 2.0 * base_model.length * base_model.f_res,
            monitor_ratio: 0.01,
            softening_quadratic: softening_linear / (2.0 * crossover_strain),
            softening_linear,
            crossover_strain,
            damping_gain: 5360.0,
            reference_strain: 6.5e-6,
            fast_share: 0.5,
            conditioning_rate_ratio: 30.0,
            relaxators: RelaxatorBank::default(),
            noise_rms: 0.01,
            true_cal: CalibrationParams {
                q0: 2.1e-4,
                q1: 2e-8,
                p0: 0.6,
                // 15 µs chain delay.
                p1: -2.0 * PI * 15e-6,
                ref_model: base_model,
                f_min: 0.75 * base_model.f_res,
                f_max: 1.25 * base_model.f_res,
            },
        }
    }
}

impl PlantConfig {
    /// Default chain with every nonlinear gain and the noise set to zero.
    pub fn linear() -> Self {
        Self {
            softening_quadratic: 0.0,
            softening_linear: 0.0,
            damping_gain: 0.0,
            noise_rms: 0.0,
            ..Self::default()
        }
    }

    /// Keeps the amplitude dependence but removes all memory.
    pub fn stationary(mut self) -> Self {
        self.fast_share = 1.0;
        self
    }

    pub fn noise_free(mut self) -> Self {
        self.noise_rms = 0.0;
        self
    }

    /// Linear softening `−c_l·ε` with no quadratic onset.
    pub fn with_linear_softening(mut self, c_l: f64) -> Self {
        self.softening_linear = c_l;
        self.softening_quadratic = 0.0;
        self.crossover_strain = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(PlantError::Config(m));
        self.base_model.validate()?;
        self.true_cal.validate()?;
        let non_negative = [
            ("softening_quadratic", self.softening_quadratic),
            ("softening_linear", self.softening_linear),
            ("crossover_strain", self.crossover_strain),
            ("damping_gain", self.damping_gain),
            ("noise_rms", self.noise_rms),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return cfg_err(format!("{name} = {v} must be >= 0"));
            }
        }
        for (name, v) in [
            ("v_l", self.v_l),
            ("monitor_ratio", self.monitor_ratio),
            ("reference_strain", self.reference_strain),
            ("conditioning_rate_ratio", self.conditioning_rate_ratio),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return cfg_err(format!("{name} = {v} must be > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.fast_share) {
            return cfg_err(format!("fast_share = {} outside [0, 1]", self.fast_share));
        }
        if self.crossover_strain > 0.0 {
            let c_l = 2.0 * self.softening_quadratic * self.crossover_strain;
            if (c_l - self.softening_linear).abs() > 1e-9 * self.softening_linear.max(f64::MIN_POSITIVE) {
                return cfg_err(format!(
                    "softening_linear = {} must equal 2·softening_quadratic·crossover_strain = {c_l}",
                    self.softening_linear
                ));
            }
        } else if self.softening_quadratic != 0.0 {
            return cfg_err("softening_quadratic requires crossover_strain > 0".into());
        }
        let b = &self.relaxators;
        if !(b.tau_min > 0.0 && b.tau_min < b.tau_max && b.tau_max.is_finite()) || b.per_decade == 0 {
            return cfg_err(format!(
                "relaxator bank needs 0 < tau_min < tau_max and per_decade >= 1, got {b:?}"
            ));
        }
        Ok(())
    }

    /// Strain per drive volt at the linear resonance.
    pub fn drive_to_strain(&self) -> f64 {
        let f = self.base_model.f_res;
        let z = forward_transfer(f, &self.base_model, Some(&self.true_cal)).map_or(0.0, |z| z.norm());
        self.monitor_ratio * z / self.v_l
    }
}

/// `(δf_eq, δα_eq)`: quadratic softening up to `ε_x`, linear beyond, C¹ at the joint.
pub fn equilibrium_targets(eps: f64, cfg: &PlantConfig) -> (f64, f64) {
    let ex = cfg.crossover_strain;
    let df = if eps <= ex {
        -cfg.softening_quadratic * eps * eps
    } else {
        -(cfg.softening_quadratic * ex * ex + cfg.softening_linear * (eps - ex))
    };
    (df, cfg.damping_gain * eps)
}

fn conditioning_target(eps: f64, cfg: &PlantConfig) -> f64 {
    let (df, _) = equilibrium_targets(eps, cfg);
    let (df_ref, _) = equilibrium_targets(cfg.reference_strain, cfg);
    if df_ref == 0.0 {
        return 0.0;
    }
    (df / df_ref).clamp(0.0, 1.0)
}

/// Drive command: frequency [Hz] and amplitude [V].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drive {
    pub f: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    /// Plant clock [s].
    pub t: f64,
    pub f_res_now: f64,
    pub alpha_now: f64,
    pub relaxator_states: Vec<f64>,
    pub drive: Drive,
    /// Steady-state strain under the current drive.
    pub strain: f64,
    /// Steady-state rx phasor `S` for the current drive and parameters.
    pub last_phasor: Complex64,
    /// Free transient `T` at time `t`.
    pub transient: Complex64,
    /// Drive phase `θ` at time `t`, kept in `[0, 2π)`.
    pub drive_phase: f64,
}

impl PlantState {
    /// Unconditioned and at rest, drive parked at the linear resonance.
    pub fn relaxed(cfg: &PlantConfig) -> Self {
        let n = cfg.relaxators.relaxators().len();
        Self {
            t: 0.0,
            f_res_now: cfg.base_model.f_res,
            alpha_now: cfg.base_model.alpha,
            relaxator_states: vec![0.0; n],
            drive: Drive {
                f: cfg.base_model.f_res,
                amplitude: 0.0,
            },
            strain: 0.0,
            last_phasor: Complex64::new(0.0, 0.0),
            transient: Complex64::new(0.0, 0.0),
            drive_phase: 0.0,
        }
    }

    /// `C = Σ w_r s_r`.
    pub fn conditioning_level(&self, bank: &[Relaxator]) -> f64 {
        bank.iter().zip(&self.relaxator_states).map(|(r, s)| r.weight * s).sum()
    }

    pub fn model(&self, cfg: &PlantConfig) -> ModaneParams {
        ModaneParams {
            f_res: self.f_res_now,
            alpha: self.alpha_now,
            ..cfg.base_model
        }
    }

    /// `τ_tr = Q / (π f_res)` at the current parameters.
    pub fn transient_time(&self, cfg: &PlantConfig) -> f64 {
        self.model(cfg).transient_time()
    }
}

struct Steady {
    strain: f64,
    f_res: f64,
    alpha: f64,
    phasor: Complex64,
}

fn parameters(cfg: &PlantConfig, eps: f64, level: f64) -> (f64, f64) {
    let (df, da) = equilibrium_targets(eps, cfg);
    let (df_ref, da_ref) = equilibrium_targets(cfg.reference_strain, cfg);
    let fast = cfg.fast_share;
    (
        cfg.base_model.f_res + fast * df + (1.0 - fast) * level * df_ref,
        cfg.base_model.alpha + fast * da + (1.0 - fast) * level * da_ref,
    )
}

/// Self-consistent steady state: strain sets the parameters, parameters set
/// the response amplitude, the amplitude sets the strain.
fn steady_state(cfg: &PlantConfig, drive: Drive, level: f64, eps_guess: f64) -> Result<Steady> {
    let tx = cfg.monitor_ratio * drive.amplitude;
    let eval = |eps: f64| -> Result<(f64, f64, f64, Complex64)> {
        let (f_res, alpha) = parameters(cfg, eps, level);
        let model = ModaneParams {
            f_res,
            alpha,
            ..cfg.base_model
        };
        let s = forward_transfer(drive.f, &model, Some(&cfg.true_cal))? * tx;
        Ok((s.norm() / cfg.v_l, f_res, alpha, s))
    };
    let finish = |eps: f64| -> Result<Steady> {
        let (_, f_res, alpha, phasor) = eval(eps)?;
        Ok(Steady {
            strain: eps,
            f_res,
            alpha,
            phasor,
        })
    };

    let mut eps = eps_guess.max(0.0);
    for _ in 0..100 {
        let next = eval(eps)?.0;
        if (next - eps).abs() <= STRAIN_REL_TOL * next.max(f64::MIN_POSITIVE) {
            return finish(next);
        }
        eps = next;
    }
    // Not contracting: bisect ε − F(ε), which is negative at 0 and positive at F's upper bound.
    let (mut lo, mut hi) = (0.0, 2.0 * eval(0.0)?.0.max(eps));
    while eval(hi)?.0 > hi {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)?.0 > mid {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= STRAIN_REL_TOL * hi {
            break;
        }
    }
    finish(0.5 * (lo + hi))
}

fn apply_steady(state: &mut PlantState, st: Steady) {
    // Keep the received signal continuous across the change of S.
    let rot = Complex64::from_polar(1.0, state.drive_phase);
    state.transient += (state.last_phasor - st.phasor) * rot;
    state.last_phasor = st.phasor;
    state.strain = st.strain;
    state.f_res_now = st.f_res;
    state.alpha_now = st.alpha;
}

/// Advances the plant by `dt` under `drive`; a changed command takes effect at the start.
pub fn advance(state: &PlantState, cfg: &PlantConfig, drive: Drive, dt: f64) -> Result<PlantState> {
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(PlantError::TimeStep(dt));
    }
    let bank = cfg.relaxators.relaxators();
    let mut s = state.clone();
    s.drive = drive;
    let st = steady_state(cfg, drive, s.conditioning_level(&bank), s.strain)?;
    apply_steady(&mut s, st);
    if dt == 0.0 {
        return Ok(s);
    }

    let n = (dt / MAX_SUBSTEP).ceil().max(1.0) as usize;
    let h = dt / n as f64;
    for _ in 0..n {
        // Transient and drive phase over the step at the parameters in force.
        let tau_tr = s.transient_time(cfg);
        let decay = Complex64::from_polar((-h / tau_tr).exp(), 2.0 * PI * s.f_res_now * h);
        s.transient *= decay;
        s.drive_phase = (s.drive_phase + 2.0 * PI * drive.f * h).rem_euclid(2.0 * PI);

        let target = conditioning_target(s.strain, cfg);
        for (r, x) in bank.iter().zip(s.relaxator_states.iter_mut()) {
            let rate = if target > *x {
                cfg.conditioning_rate_ratio / r.tau
            } else {
                1.0 / r.tau
            };
            *x = (target + (*x - target) * (-rate * h).exp()).clamp(0.0, 1.0);
        }
        let st = steady_state(cfg, drive, s.conditioning_level(&bank), s.strain)?;
        apply_steady(&mut s, st);
        s.t += h;
    }
    // Sum of substeps can differ from dt in the last bit.
    s.t = state.t + dt;
    Ok(s)
}

/// tx/rx windows of `duration` starting at the state's clock; the state is not advanced.
pub fn synthesize_window(
    state: &PlantState,
    cfg: &PlantConfig,
    duration: f64,
    fs: f64,
    seed: u64,
    stream: u64,
) -> (WaveformWindow, WaveformWindow) {
    let n = (duration * fs).round() as usize;
    let f = state.drive.f;
    let a_tx = cfg.monitor_ratio * state.drive.amplitude;
    let tau_tr = state.transient_time(cfg);
    let sigma = cfg.noise_rms * state.last_phasor.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut tx = Vec::with_capacity(n);
    let mut rx = Vec::with_capacity(n);
    for m in 0..n {
        let t = m as f64 / fs;
        let theta = state.drive_phase + 2.0 * PI * f * t;
        let e = Complex64::from_polar(1.0, theta);
        let free = state.transient * Complex64::from_polar((-t / tau_tr).exp(), 2.0 * PI * state.f_res_now * t);
        tx.push(a_tx * e.re);
        let mut y = (state.last_phasor * e + free).re;
        if sigma > 0.0 {
            y += sigma * noise.sample(&mut rng);
        }
        rx.push(y);
    }
    let wrap = |samples| WaveformWindow {
        samples,
        sample_rate: fs,
        start_time: state.t,
    };
    (wrap(tx), wrap(rx))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub f_res: f64,
    pub alpha: f64,
    pub conditioning_level: f64,
}

pub fn write_snapshots_csv<W: Write>(w: W, rows: &[Snapshot]) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t_s", "f_res_hz", "alpha_per_m", "conditioning_level"])?;
    for r in rows {
        wtr.write_record([
            r.t.to_string(),
            r.f_res.to_string(),
            r.alpha.to_string(),
            r.conditioning_level.to_string(),
        ])?;
    }
    wtr.flush()
}

/// Stateful handle: owns the configuration, the state and the noise stream counter.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    bank: Vec<Relaxator>,
    state: PlantState,
    seed: u64,
    windows: u64,
}

impl Plant {
    pub fn new(cfg: PlantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = PlantState::relaxed(&cfg);
        Ok(Self {
            bank: cfg.relaxators.relaxators(),
            cfg,
            state,
            seed,
            windows: 0,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn time(&self) -> f64 {
        self.state.t
    }

    pub fn conditioning_level(&self) -> f64 {
        self.state.conditioning_level(&self.bank)
    }

    pub fn transient_time(&self) -> f64 {
        self.state.transient_time(&self.cfg)
    }

    /// Changes the command without advancing time.
    pub fn command(&mut self, drive: Drive) -> Result<()> {
        self.advance(drive, 0.0)
    }

    pub fn advance(&mut self, drive: Drive, dt: f64) -> Result<()> {
        self.state = advance(&self.state, &self.cfg, drive, dt)?;
        Ok(())
    }

    /// Holds the current command for `dt`.
    pub fn hold(&mut self, dt: f64) -> Result<()> {
        self.advance(self.state.drive, dt)
    }

    /// Records a window at the current time, then advances through it.
    pub fn record(&mut self, duration: f64, fs: f64) -> Result<(WaveformWindow, WaveformWindow)> {
        let w = synthesize_window(&self.state, &self.cfg, duration, fs, self.seed, self.windows);
        self.windows += 1;
        self.hold(duration)?;
        Ok(w)
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            t: self.state.t,
            f_res: self.state.f_res_now,
            alpha: self.state.alpha_now,
            conditioning_level: self.conditioning_level(),
        }
    }
}
