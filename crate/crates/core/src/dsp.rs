//! Single-frequency projection of recorded windows and the tx→rx transfer.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;

use crate::modane::wrap_pi;

/// `|DFT(tx)|` below this is treated as no drive.
pub const ZERO_DRIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("frequency {f} Hz is at or above Nyquist ({nyquist} Hz)")]
    Aliasing { f: f64, nyquist: f64 },
    #[error("window of {len} samples holds fewer than 2 periods at {f} Hz")]
    ShortWindow { len: usize, f: f64 },
    #[error("invalid frequency {0} Hz")]
    InvalidFrequency(f64),
    #[error("tx and rx windows differ in length or sample rate")]
    Mismatch,
    #[error("drive amplitude {0:e} below noise floor")]
    ZeroDrive(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformWindow {
    pub samples: Vec<f64>,
    /// [samples/s]
    pub sample_rate: f64,
    /// [s]
    pub start_time: f64,
}

impl WaveformWindow {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexPhasor {
    pub magnitude: f64,
    /// In `(−π, π]`.
    pub phase: f64,
}

impl ComplexPhasor {
    pub fn from_complex(z: Complex64) -> Self {
        Self {
            magnitude: z.norm(),
            phase: wrap_pi(z.arg()),
        }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.phase)
    }
}

fn projection(win: &WaveformWindow, f: f64) -> Result<Complex64, DspError> {
    if !(f.is_finite() && f > 0.0) {
        return Err(DspError::InvalidFrequency(f));
    }
    let fs = win.sample_rate;
    if f >= fs / 2.0 {
        return Err(DspError::Aliasing { f, nyquist: fs / 2.0 });
    }
    let n = win.samples.len();
    if (n as f64) < 2.0 * fs / f {
        return Err(DspError::ShortWindow { len: n, f });
    }
    let w = 2.0 * PI * f / fs;
    // Phase is referenced to the first sample of the window.
    let mut acc = Complex64::new(0.0, 0.0);
    for (m, &x) in win.samples.iter().enumerate() {
        let (s, c) = (w * m as f64).sin_cos();
        acc += Complex64::new(x * c, -x * s);
    }
    Ok(acc * (2.0 / n as f64))
}

/// `(2/N)·Σ x[m]·e^{−j2πf m/fs}`, so a unit cosine reads as magnitude 1, phase 0.
pub fn single_bin_dft(win: &WaveformWindow, f: f64) -> Result<ComplexPhasor, DspError> {
    projection(win, f).map(ComplexPhasor::from_complex)
}

/// `Z = DFT(rx) / DFT(tx)` at `f`.
pub fn transfer_ratio(tx: &WaveformWindow, rx: &WaveformWindow, f: f64) -> Result<ComplexPhasor, DspError> {
    if tx.samples.len() != rx.samples.len() || tx.sample_rate != rx.sample_rate {
        return Err(DspError::Mismatch);
    }
    let t = projection(tx, f)?;
    if t.norm() < ZERO_DRIVE_FLOOR {
        return Err(DspError::ZeroDrive(t.norm()));
    }
    let r = projection(rx, f)?;
    Ok(ComplexPhasor::from_complex(r / t))
}

pub fn velocity_to_strain(v_amplitude: f64, v_l: f64) -> f64 {
    debug_assert!(v_l > 0.0);
    v_amplitude / v_l
}

/// Debug dump of a window pair as `time_s, tx, rx`.
pub fn write_window_csv<W: Write>(w: W, tx: &WaveformWindow, rx: &WaveformWindow) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["time_s", "tx", "rx"])?;
    for (m, (a, b)) in tx.samples.iter().zip(&rx.samples).enumerate() {
        let t = tx.start_time + m as f64 / tx.sample_rate;
        wtr.write_record([t.to_string(), a.to_string(), b.to_string()])?;
    }
    wtr.flush()
}
