//! Nonlinear indicators computed from protocol results.

use std::f64::consts::PI;

use super::{Branches, ProtocolError};

/// Shoelace area of `loading ++ reversed(unloading)`, absolute value.
/// Fewer than three vertices give zero.
pub fn loop_area(loading: &[(f64, f64)], unloading: &[(f64, f64)]) -> f64 {
    let poly: Vec<(f64, f64)> = loading.iter().chain(unloading.iter().rev()).copied().collect();
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % poly.len()];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

/// `(δf_res, δα)` of the loading-branch point at the highest amplitude.
pub fn endpoint(branches: &Branches) -> (f64, f64) {
    branches
        .loading
        .iter()
        .fold(None, |best: Option<&super::BranchPoint>, p| match best {
            Some(b) if b.amplitude >= p.amplitude => Some(b),
            _ => Some(p),
        })
        .map_or((0.0, 0.0), |p| (p.dfr_rel, p.dalpha_rel))
}

/// Gaussian kernel density on `grid_points` uniform points spanning the
/// samples ± 3 bandwidths, rescaled to unit trapezoidal integral on that grid.
pub fn detuning_kde(samples: &[f64], bandwidth: f64, grid_points: usize) -> Result<Vec<(f64, f64)>, ProtocolError> {
    if samples.len() < 2 {
        return Err(ProtocolError::NoData(format!(
            "density estimate needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) || grid_points < 2 {
        return Err(ProtocolError::Invalid(format!(
            "bandwidth {bandwidth} and grid of {grid_points} points"
        )));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * bandwidth;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * bandwidth;
    let dx = (hi - lo) / (grid_points - 1) as f64;
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    let mut curve: Vec<(f64, f64)> = (0..grid_points)
        .map(|i| {
            let x = lo + i as f64 * dx;
            let d: f64 = samples
                .iter()
                .map(|s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp())
                .sum();
            (x, d * norm)
        })
        .collect();
    let integral: f64 = curve.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * dx).sum();
    for p in &mut curve {
        p.1 /= integral;
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogTimeFit {
    /// Change of `y` per decade of time.
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

pub const MIN_LOGTIME_POINTS: usize = 10;

/// Ordinary least squares of `y` on `log10 t` over `t ∈ [t_lo, t_hi]`.
pub fn fit_logtime(series: &[(f64, f64)], t_lo: f64, t_hi: f64) -> Result<LogTimeFit, ProtocolError> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t > 0.0 && *t >= t_lo && *t <= t_hi)
        .map(|&(t, y)| (t.log10(), y))
        .collect();
    if pts.len() < MIN_LOGTIME_POINTS {
        return Err(ProtocolError::NoData(format!(
            "{} points in [{t_lo}, {t_hi}] s, at least {MIN_LOGTIME_POINTS} required",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(ProtocolError::NoData("all samples at one time".into()));
    }
    let slope = sxy / sxx;
    let ss_res = syy - slope * sxy;
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LogTimeFit {
        slope,
        intercept: my - slope * mx,
        r2,
        n: pts.len(),
    })
}

/// Interquartile range; `None` for an empty slice.
pub fn interquartile_range(samples: &[f64]) -> Option<f64> {
    Some(quantile(samples, 0.75)? - quantile(samples, 0.25)?)
}

/// Linear-interpolated quantile of the sorted samples.
pub fn quantile(samples: &[f64], q: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    let next = v[(i + 1).min(v.len() - 1)];
    Some(v[i] + frac * (next - v[i]))
}

pub fn median(samples: &[f64]) -> Option<f64> {
    quantile(samples, 0.5)
}
