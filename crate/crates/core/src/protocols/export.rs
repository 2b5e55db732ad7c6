//! Long-format CSV writers for protocol results.

use std::io::{self, Write};

use super::{Branches, CondRelaxResult, ModeAblation, SweepNrusResult};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_branches_csv<W: Write>(w: W, branches: &Branches) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "branch",
        "a_v",
        "strain",
        "f_res_hz",
        "alpha_per_m",
        "dfr_rel",
        "dalpha_rel",
    ])?;
    for (name, pts) in [("loading", &branches.loading), ("unloading", &branches.unloading)] {
        for p in pts {
            wtr.write_record([
                name.to_string(),
                p.amplitude.to_string(),
                p.strain.to_string(),
                p.f_res.to_string(),
                p.alpha.to_string(),
                p.dfr_rel.to_string(),
                p.dalpha_rel.to_string(),
            ])?;
        }
    }
    wtr.flush()
}

pub fn write_timeseries_csv<W: Write>(w: W, result: &CondRelaxResult) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "t_s",
        "phase",
        "a_v",
        "f_hz",
        "delta_phi_rad",
        "f_res_hz",
        "alpha_per_m",
    ])?;
    for p in &result.points {
        wtr.write_record([
            p.t.to_string(),
            p.phase.name().to_string(),
            p.amplitude.to_string(),
            p.f.to_string(),
            p.delta_phi.to_string(),
            opt(p.f_res),
            opt(p.alpha),
        ])?;
    }
    wtr.flush()
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[(String, f64)]) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["key", "value"])?;
    for (k, v) in metrics {
        wtr.write_record([k.clone(), v.to_string()])?;
    }
    wtr.flush()
}

/// Detuning densities of all modes in one file.
pub fn write_kde_csv<W: Write>(w: W, ablation: &ModeAblation) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["mode", "detuning_hz", "density"])?;
    for run in &ablation.runs {
        for (x, d) in &run.kde {
            wtr.write_record([run.mode.name().to_string(), x.to_string(), d.to_string()])?;
        }
    }
    wtr.flush()
}

/// Every measured point of every sweep curve.
pub fn write_sweep_curves_csv<W: Write>(w: W, result: &SweepNrusResult) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "a_v",
        "f_hz",
        "amplitude",
        "phase_rad",
        "delta_phi_rad",
        "strain",
        "peak",
        "flagged",
    ])?;
    for c in &result.curves {
        for (i, p) in c.points.iter().enumerate() {
            wtr.write_record([
                c.amplitude.to_string(),
                p.f.to_string(),
                p.a.to_string(),
                p.phi.to_string(),
                p.delta_phi.to_string(),
                p.strain.to_string(),
                u8::from(i == c.peak).to_string(),
                u8::from(c.flagged).to_string(),
            ])?;
        }
    }
    wtr.flush()
}
