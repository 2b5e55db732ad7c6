//! Joint amplitude/phase least-squares fit of the calibrated resonance model
//! to a low-amplitude frequency sweep.
//!
//! Residuals are `a_model − |Z|` and `|Z|·wrap(φ_model − arg Z)`, so the
//! phase term is weighted by the local amplitude and both halves share units.
//! The affine corrections are parametrized around the sweep centre `f_c`
//! internally and converted back to `q0 + q1·f`, `p0 + p1·f` on exit.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;

use super::{wrap_pi, CalibrationParams, Geometry, ModaneError, ModaneParams, Result};

pub const MIN_SWEEP_POINTS: usize = 20;
const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-10;

type Vec6 = SVector<f64, 6>;
type Mat6 = SMatrix<f64, 6, 6>;

/// One sweep sample: drive frequency and measured complex transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub f: f64,
    pub z: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFit {
    pub params: CalibrationParams,
    /// RMS of the stacked residual vector at the solution.
    pub residual_rms: f64,
    pub iterations: usize,
}

// x = [f_res, αL, Q0, q1, P0, p1] with q(f) = Q0 + q1 (f − f_c), φ0(f) = P0 + p1 (f − f_c).
struct Problem<'a> {
    sweep: &'a [SweepPoint],
    f_c: f64,
}

impl Problem<'_> {
    fn model(&self, x: &Vec6, f: f64) -> (f64, f64) {
        let (f_res, alpha_l) = (x[0], x[1]);
        let u = f - self.f_c;
        let xx = PI * f / f_res;
        let (s, c) = xx.sin_cos();
        let d = (alpha_l.sinh().powi(2) + s * s).sqrt();
        let q = x[2] + x[3] * u;
        let amp = q / d;
        let phase = x[4] + x[5] * u - (s / (c * alpha_l.tanh())).atan();
        (amp, phase)
    }

    fn residuals(&self, x: &Vec6) -> Vec<f64> {
        let mut r = Vec::with_capacity(2 * self.sweep.len());
        for p in self.sweep {
            let (amp, phase) = self.model(x, p.f);
            let m = p.z.norm();
            r.push(amp - m);
            r.push(m * wrap_pi(phase - p.z.arg()));
        }
        r
    }

    fn cost(&self, x: &Vec6) -> f64 {
        self.residuals(x).iter().map(|v| v * v).sum()
    }

    /// Normal equations `JᵀJ` and `Jᵀr` at `x`.
    fn normal(&self, x: &Vec6) -> (Mat6, Vec6, f64) {
        let (f_res, alpha_l) = (x[0], x[1]);
        let t = alpha_l.tanh();
        let sech2 = 1.0 - t * t;
        let (sh, ch) = (alpha_l.sinh(), alpha_l.cosh());
        let mut jtj = Mat6::zeros();
        let mut jtr = Vec6::zeros();
        let mut cost = 0.0;
        for p in self.sweep {
            let u = p.f - self.f_c;
            let xx = PI * p.f / f_res;
            let (s, c) = xx.sin_cos();
            let d2 = sh * sh + s * s;
            let d = d2.sqrt();
            let q = x[2] + x[3] * u;
            let dx_dfres = -PI * p.f / (f_res * f_res);
            let m = p.z.norm();

            let amp = q / d;
            let mut ja = Vec6::zeros();
            ja[0] = -q * s * c * dx_dfres / (d2 * d);
            ja[1] = -q * sh * ch / (d2 * d);
            ja[2] = 1.0 / d;
            ja[3] = u / d;

            let den = t * t * c * c + s * s;
            let phase = x[4] + x[5] * u - (s / (c * t)).atan();
            let mut jp = Vec6::zeros();
            jp[0] = -(t / den) * dx_dfres * m;
            jp[1] = (s * c / den) * sech2 * m;
            jp[4] = m;
            jp[5] = u * m;

            let ra = amp - m;
            let rp = m * wrap_pi(phase - p.z.arg());
            cost += ra * ra + rp * rp;
            jtj += ja * ja.transpose() + jp * jp.transpose();
            jtr += ja * ra + jp * rp;
        }
        (jtj, jtr, cost)
    }
}

fn linear_regression(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Half-power crossing on one side of the peak, interpolated linearly in power.
fn half_power_offset(sweep: &[SweepPoint], peak: usize, step: isize) -> Option<f64> {
    let p_max = sweep[peak].z.norm_sqr();
    let half = 0.5 * p_max;
    let mut i = peak as isize;
    loop {
        let j = i + step;
        if j < 0 || j as usize >= sweep.len() {
            return None;
        }
        let (pi, pj) = (sweep[i as usize].z.norm_sqr(), sweep[j as usize].z.norm_sqr());
        if pj <= half {
            let w = (pi - half) / (pi - pj);
            let (fi, fj) = (sweep[i as usize].f, sweep[j as usize].f);
            return Some((fi + w * (fj - fi) - sweep[peak].f).abs());
        }
        i = j;
    }
}

fn initial_guess(prob: &Problem, peak: usize) -> Vec6 {
    let sweep = prob.sweep;
    // Parabolic refinement of the amplitude peak.
    let (y0, y1, y2) = (sweep[peak - 1].z.norm(), sweep[peak].z.norm(), sweep[peak + 1].z.norm());
    let curv = y0 - 2.0 * y1 + y2;
    let df = 0.5 * (sweep[peak + 1].f - sweep[peak - 1].f);
    let shift = if curv < 0.0 {
        (0.5 * (y0 - y2) / curv).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let f_res = sweep[peak].f + shift * df;

    let half_width = match (half_power_offset(sweep, peak, -1), half_power_offset(sweep, peak, 1)) {
        (Some(a), Some(b)) => 0.5 * (a + b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.25 * (sweep[sweep.len() - 1].f - sweep[0].f),
    };
    // Half power where sin(π Δf / f_res) = sinh(αL).
    let alpha_l = (PI * half_width / f_res).sin().asinh().max(1e-6);

    let t = alpha_l.tanh();
    let sh = alpha_l.sinh();
    let mut us = Vec::with_capacity(sweep.len());
    let mut qs = Vec::with_capacity(sweep.len());
    let mut ps = Vec::with_capacity(sweep.len());
    let mut prev: Option<f64> = None;
    for p in sweep {
        let x = PI * p.f / f_res;
        let (s, c) = x.sin_cos();
        us.push(p.f - prob.f_c);
        qs.push(p.z.norm() * (sh * sh + s * s).sqrt());
        // Residual phase after removing the model shape, unwrapped along f.
        let mut ph = p.z.arg() + (s / (c * t)).atan();
        if let Some(last) = prev {
            ph = last + wrap_pi(ph - last);
        }
        prev = Some(ph);
        ps.push(ph);
    }
    let (q0, q1) = linear_regression(&us, &qs);
    let (p0, p1) = linear_regression(&us, &ps);
    Vec6::from([f_res, alpha_l, q0, q1, wrap_pi(p0), p1])
}

/// Fits `(f_res, α, q0, q1, p0, p1)` to a sweep spanning the resonance.
pub fn fit_calibration(sweep: &[SweepPoint], geometry: &Geometry) -> Result<CalibrationFit> {
    if sweep.len() < MIN_SWEEP_POINTS {
        return Err(ModaneError::TooFewPoints(sweep.len(), MIN_SWEEP_POINTS));
    }
    let mut sorted = sweep.to_vec();
    sorted.sort_by(|a, b| a.f.total_cmp(&b.f));
    let peak = sorted
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.z.norm().total_cmp(&b.1.z.norm()))
        .map(|(i, _)| i)
        .expect("non-empty sweep");
    if peak == 0 || peak == sorted.len() - 1 {
        return Err(ModaneError::NotBracketed { f: sorted[peak].f });
    }
    let (f_min, f_max) = (sorted[0].f, sorted[sorted.len() - 1].f);
    let prob = Problem {
        sweep: &sorted,
        f_c: 0.5 * (f_min + f_max),
    };

    let mut x = initial_guess(&prob, peak);
    let mut lambda = 1e-3;
    let (mut jtj, mut jtr, mut cost) = prob.normal(&x);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)].max(f64::MIN_POSITIVE);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-jtr));
            let trial = x + step;
            if trial[0] <= 0.0 || trial[1] <= 0.0 {
                lambda *= 10.0;
                continue;
            }
            let trial_cost = prob.cost(&trial);
            if trial_cost <= cost {
                // Scale-free step size: each component against its own curvature.
                let rel = (0..6).map(|i| (step[i] * jtj[(i, i)].sqrt()).abs()).fold(0.0, f64::max)
                    / (cost.sqrt() + (0..6).map(|i| (x[i] * jtj[(i, i)].sqrt()).abs()).fold(0.0, f64::max));
                x = trial;
                (jtj, jtr, cost) = prob.normal(&x);
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                if rel < STEP_TOL {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: stationary to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let residual_rms = (cost / (2 * sorted.len()) as f64).sqrt();
    if !converged {
        return Err(ModaneError::Convergence {
            iterations,
            residual_rms,
        });
    }

    let f_c = prob.f_c;
    let ref_model = ModaneParams {
        f_res: x[0],
        alpha: x[1] / geometry.length,
        length: geometry.length,
        mode_n: geometry.mode_n,
        scale: geometry.scale,
    };
    let params = CalibrationParams {
        q0: x[2] - x[3] * f_c,
        q1: x[3],
        p0: wrap_pi(x[4] - x[5] * f_c),
        p1: x[5],
        ref_model,
        f_min,
        f_max,
    };
    params.validate()?;
    Ok(CalibrationFit {
        params,
        residual_rms,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modane::forward_transfer;

    fn truth() -> CalibrationParams {
        let m = ModaneParams::from_alpha_l(8500.0, 0.03, 0.14, 1).unwrap();
        CalibrationParams {
            q0: 2.1e-4,
            q1: 2.0e-8,
            p0: 0.6,
            p1: -9.42e-5,
            ref_model: m,
            f_min: 7700.0,
            f_max: 9300.0,
        }
    }

    fn sweep(cal: &CalibrationParams, lo: f64, hi: f64, step: f64) -> Vec<SweepPoint> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n)
            .map(|i| {
                let f = lo + i as f64 * step;
                SweepPoint {
                    f,
                    z: forward_transfer(f, &cal.ref_model, Some(cal)).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_recovery() {
        let cal = truth();
        let fit = fit_calibration(&sweep(&cal, 7700.0, 9300.0, 8.0), &Geometry::new(0.14, 1)).unwrap();
        let p = fit.params;
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(p.ref_model.f_res, 8500.0) < 1e-8);
        assert!(rel(p.ref_model.alpha, cal.ref_model.alpha) < 1e-8);
        assert!(rel(p.q0, cal.q0) < 1e-8, "{} {}", p.q0, cal.q0);
        assert!(rel(p.q1, cal.q1) < 1e-8);
        assert!(rel(p.p0, cal.p0) < 1e-8);
        assert!(rel(p.p1, cal.p1) < 1e-8);
        assert!(fit.residual_rms < 1e-12);
    }

    #[test]
    fn not_bracketed() {
        let cal = truth();
        let err = fit_calibration(&sweep(&cal, 7700.0, 8400.0, 8.0), &Geometry::new(0.14, 1)).unwrap_err();
        assert!(matches!(err, ModaneError::NotBracketed { .. }));
    }

    #[test]
    fn too_few_points() {
        let cal = truth();
        let err = fit_calibration(&sweep(&cal, 8400.0, 8600.0, 20.0), &Geometry::new(0.14, 1)).unwrap_err();
        assert!(matches!(err, ModaneError::TooFewPoints(11, _)));
    }

    #[test]
    fn common_rotation_moves_only_p0() {
        let cal = truth();
        let g = Geometry::new(0.14, 1);
        let base = sweep(&cal, 7700.0, 9300.0, 8.0);
        let rot = Complex64::from_polar(1.0, 0.3);
        let rotated: Vec<_> = base.iter().map(|p| SweepPoint { f: p.f, z: p.z * rot }).collect();
        let a = fit_calibration(&base, &g).unwrap().params;
        let b = fit_calibration(&rotated, &g).unwrap().params;
        assert!((wrap_pi(b.p0 - a.p0) - 0.3).abs() < 1e-9);
        assert!((b.ref_model.f_res - a.ref_model.f_res).abs() < 1e-7);
        assert!((b.p1 - a.p1).abs() < 1e-12);
        assert!((b.q0 - a.q0).abs() < 1e-9 * a.q0);
    }
}
