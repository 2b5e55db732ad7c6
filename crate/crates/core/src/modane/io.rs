//! Sweep CSV (`f_hz, re_z, im_z`) and calibration parameter files
//! (`key=value`, one per line).

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{CalibrationParams, ModaneParams, SweepPoint};

#[derive(Serialize, Deserialize)]
struct SweepRow {
    f_hz: f64,
    re_z: f64,
    im_z: f64,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_sweep_csv<W: Write>(w: W, sweep: &[SweepPoint]) -> io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for p in sweep {
        wtr.serialize(SweepRow {
            f_hz: p.f,
            re_z: p.z.re,
            im_z: p.z.im,
        })
        .map_err(io::Error::other)?;
    }
    wtr.flush()
}

pub fn read_sweep_csv<R: Read>(r: R) -> io::Result<Vec<SweepPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    rdr.deserialize::<SweepRow>()
        .map(|row| {
            let row = row.map_err(|e| invalid(e.to_string()))?;
            Ok(SweepPoint {
                f: row.f_hz,
                z: Complex64::new(row.re_z, row.im_z),
            })
        })
        .collect()
}

/// Writes the calibration; `extra` lines (e.g. fit diagnostics) follow the parameters.
pub fn write_params<W: Write>(mut w: W, cal: &CalibrationParams, extra: &[(&str, f64)]) -> io::Result<()> {
    let m = &cal.ref_model;
    writeln!(w, "f_res_hz={}", m.f_res)?;
    writeln!(w, "alpha_per_m={}", m.alpha)?;
    writeln!(w, "length_m={}", m.length)?;
    writeln!(w, "mode_n={}", m.mode_n)?;
    writeln!(w, "scale={}", m.scale)?;
    writeln!(w, "q0={}", cal.q0)?;
    writeln!(w, "q1_per_hz={}", cal.q1)?;
    writeln!(w, "p0_rad={}", cal.p0)?;
    writeln!(w, "p1_rad_per_hz={}", cal.p1)?;
    writeln!(w, "f_min_hz={}", cal.f_min)?;
    writeln!(w, "f_max_hz={}", cal.f_max)?;
    for (k, v) in extra {
        writeln!(w, "{k}={v}")?;
    }
    Ok(())
}

/// Reads a parameter file; unknown keys are ignored, `#` starts a comment.
pub fn read_params<R: BufRead>(r: R) -> io::Result<CalibrationParams> {
    let mut map = BTreeMap::new();
    for line in r.lines() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected key=value, got `{line}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| invalid(format!("`{}` is not a number", v.trim())))?;
        map.insert(k.trim().to_string(), v);
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| invalid(format!("missing key `{k}`")));
    let mode_n = get("mode_n")?;
    if mode_n.fract() != 0.0 || mode_n < 1.0 {
        return Err(invalid(format!("mode_n = {mode_n} is not a positive integer")));
    }
    let cal = CalibrationParams {
        q0: get("q0")?,
        q1: get("q1_per_hz")?,
        p0: get("p0_rad")?,
        p1: get("p1_rad_per_hz")?,
        ref_model: ModaneParams {
            f_res: get("f_res_hz")?,
            alpha: get("alpha_per_m")?,
            length: get("length_m")?,
            mode_n: mode_n as u32,
            scale: map.get("scale").copied().unwrap_or(1.0),
        },
        f_min: get("f_min_hz")?,
        f_max: get("f_max_hz")?,
    };
    cal.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(cal)
}
