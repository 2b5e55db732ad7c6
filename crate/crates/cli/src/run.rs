//! Protocol dispatch and artifact writing.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use resotrack::modane::io::{read_params, write_params, write_sweep_csv};
use resotrack::modane::CalibrationParams;
use resotrack::plant::{Plant, PlantConfig};
use resotrack::protocols::metrics::fit_logtime;
use resotrack::protocols::{
    self, calibrate, duration_study, mode_ablation, run_cond_relax, run_sweep_nrus, run_tracking_nrus, Branches,
    ProtocolError,
};
use resotrack::tracker::write_iterations_csv;

use crate::config::{serialize_config, CalibrationSource, ConfigError, ProtocolConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Protocol(_) => 2,
            Self::Io { .. } => 3,
        }
    }

    /// Wraps an I/O error with what was being done.
    pub fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> Self {
        let context = context.into();
        move |source| Self::Io { context, source }
    }
}

/// What a finished run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// Paths relative to `run_dir`, in write order.
    pub files: Vec<String>,
    pub metrics: Vec<(String, f64)>,
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, rel: &str, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), RunError> {
        let path = self.dir.join(rel);
        let ctx = format!("writing {}", path.display());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(RunError::io(ctx.clone()))?;
        }
        let mut w = BufWriter::new(File::create(&path).map_err(RunError::io(ctx.clone()))?);
        f(&mut w).and_then(|_| w.flush()).map_err(RunError::io(ctx))?;
        self.files.push(rel.to_string());
        Ok(())
    }
}

/// Creates `<out>/<protocol>/<timestamp>/`, adding a suffix if it already exists.
fn create_run_dir(out: &Path, protocol: &str, started: &DateTime<Utc>) -> Result<PathBuf, RunError> {
    let parent = out.join(protocol);
    fs::create_dir_all(&parent).map_err(RunError::io(format!("creating {}", parent.display())))?;
    let stamp = started.format("%Y%m%dT%H%M%S%.3fZ").to_string();
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(RunError::io(format!("creating {}", dir.display()))(e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn resolve_calibration(
    src: &CalibrationSource,
    plant_cfg: &PlantConfig,
    seed: u64,
    art: &mut Artifacts,
) -> Result<CalibrationParams, RunError> {
    let cal = match &src.file {
        Some(path) => {
            let f = File::open(path).map_err(RunError::io(format!("reading {}", path.display())))?;
            read_params(BufReader::new(f)).map_err(RunError::io(format!("parsing {}", path.display())))?
        }
        None => {
            let mut plant = Plant::new(plant_cfg.clone(), seed).map_err(|e| ConfigError::Invalid {
                path: "plant".into(),
                message: e.to_string(),
            })?;
            calibrate(&mut plant, &src.sweep, src.sample_rate)?.fit.params
        }
    };
    art.write("calibration.txt", |w| write_params(w, &cal, &[]))?;
    Ok(cal)
}

fn new_plant(cfg: &RunConfig) -> Result<Plant, RunError> {
    Plant::new(cfg.plant.clone(), cfg.seed).map_err(|e| {
        RunError::Config(ConfigError::Invalid {
            path: "plant".into(),
            message: e.to_string(),
        })
    })
}

fn branch_metrics(prefix: &str, b: &Branches, out: &mut Vec<(String, f64)>) {
    let (df, da) = b.endpoint();
    out.push((format!("{prefix}area_f"), b.area_f()));
    out.push((format!("{prefix}area_alpha"), b.area_alpha()));
    out.push((format!("{prefix}endpoint_dfr_rel"), df));
    out.push((format!("{prefix}endpoint_dalpha_rel"), da));
    out.push((format!("{prefix}f_res_ref_hz"), b.f_res_ref));
    out.push((format!("{prefix}alpha_ref_per_m"), b.alpha_ref));
}

fn run_protocol(cfg: &RunConfig, art: &mut Artifacts) -> Result<Vec<(String, f64)>, RunError> {
    let mut m: Vec<(String, f64)> = Vec::new();
    match &cfg.protocol {
        ProtocolConfig::Calibrate(c) => {
            let mut plant = new_plant(cfg)?;
            let run = calibrate(&mut plant, &c.sweep, c.sample_rate)?;
            let fit = &run.fit;
            art.write("calibration.txt", |w| {
                write_params(
                    w,
                    &fit.params,
                    &[
                        ("residual_rms", fit.residual_rms),
                        ("iterations", fit.iterations as f64),
                    ],
                )
            })?;
            art.write("calibration_sweep.csv", |w| write_sweep_csv(w, &run.sweep))?;
            m.push(("residual_rms".into(), fit.residual_rms));
            m.push(("iterations".into(), fit.iterations as f64));
            m.push(("f_res_hz".into(), fit.params.ref_model.f_res));
            m.push(("alpha_l".into(), fit.params.ref_model.alpha_l()));
        }
        ProtocolConfig::TrackNrus(c) => {
            let cal = resolve_calibration(&c.calibration, &cfg.plant, cfg.seed, art)?;
            let res = run_tracking_nrus(
                &mut new_plant(cfg)?,
                &cfg.tracker,
                &cal,
                &c.schedule.build(),
                c.sample_rate,
            )?;
            art.write("iterations.csv", |w| write_iterations_csv(w, &res.records))?;
            art.write("branches.csv", |w| protocols::write_branches_csv(w, &res.branches))?;
            branch_metrics("", &res.branches, &mut m);
            m.push(("records".into(), res.records.len() as f64));
            m.push(("unsettled_records".into(), res.unsettled() as f64));
        }
        ProtocolConfig::SweepNrus(c) => {
            let cal = resolve_calibration(&c.calibration, &cfg.plant, cfg.seed, art)?;
            let res = run_sweep_nrus(&mut new_plant(cfg)?, &cal, &c.range, &c.schedule.build(), c.sample_rate)?;
            art.write("sweep_curves.csv", |w| protocols::write_sweep_curves_csv(w, &res))?;
            art.write("branches.csv", |w| protocols::write_branches_csv(w, &res.branches))?;
            branch_metrics("", &res.branches, &mut m);
            m.push(("curves".into(), res.curves.len() as f64));
            m.push(("flagged_curves".into(), res.flagged() as f64));
        }
        ProtocolConfig::CondRelax(c) => {
            let cal = resolve_calibration(&c.calibration, &cfg.plant, cfg.seed, art)?;
            let res = run_cond_relax(&mut new_plant(cfg)?, &cfg.tracker, &cal, &c.phases, c.sample_rate)?;
            art.write("timeseries.csv", |w| protocols::write_timeseries_csv(w, &res))?;
            art.write("iterations.csv", |w| write_iterations_csv(w, &res.records))?;
            let (lo, hi) = c.fit_window;
            for (name, series) in [
                ("relaxation", res.relaxation_series()),
                ("conditioning", res.conditioning_series()),
            ] {
                if let Ok(fit) = fit_logtime(&series, lo, hi) {
                    m.push((format!("{name}_slope_hz_per_decade"), fit.slope));
                    m.push((format!("{name}_intercept_hz"), fit.intercept));
                    m.push((format!("{name}_r2"), fit.r2));
                    m.push((format!("{name}_fit_points"), fit.n as f64));
                }
            }
            m.push(("records".into(), res.points.len() as f64));
            m.push(("unsettled_records".into(), res.unsettled() as f64));
        }
        ProtocolConfig::DurationStudy(c) => {
            let cal = resolve_calibration(&c.calibration, &cfg.plant, cfg.seed, art)?;
            let runs = duration_study(&c.study, &cfg.plant, &cfg.tracker, &cal, cfg.seed, c.sample_rate)?;
            for r in &runs {
                let sub = format!("T_{}s", r.duration);
                art.write(&format!("{sub}/iterations.csv"), |w| {
                    write_iterations_csv(w, &r.result.records)
                })?;
                art.write(&format!("{sub}/branches.csv"), |w| {
                    protocols::write_branches_csv(w, &r.result.branches)
                })?;
                branch_metrics(&format!("{sub}."), &r.result.branches, &mut m);
                m.push((format!("{sub}.unsettled_records"), r.result.unsettled() as f64));
            }
        }
        ProtocolConfig::ModeAblation(c) => {
            let cal = resolve_calibration(&c.calibration, &cfg.plant, cfg.seed, art)?;
            let ab = mode_ablation(
                &cfg.plant,
                &cfg.tracker,
                &cal,
                &c.schedule.build(),
                c.kde_bandwidth,
                cfg.seed,
                c.sample_rate,
            )?;
            for run in &ab.runs {
                let mode = run.mode.name();
                art.write(&format!("{mode}/iterations.csv"), |w| {
                    write_iterations_csv(w, &run.result.records)
                })?;
                art.write(&format!("{mode}/branches.csv"), |w| {
                    protocols::write_branches_csv(w, &run.result.branches)
                })?;
                let s = &run.summary;
                m.push((format!("{mode}.max_abs_delta_phi"), s.max_abs_delta_phi));
                if let Some(v) = s.post_learning_max_abs_delta_phi {
                    m.push((format!("{mode}.post_learning_max_abs_delta_phi"), v));
                }
                m.push((format!("{mode}.loading_median_delta_phi"), s.loading_median_delta_phi));
                m.push((
                    format!("{mode}.unloading_median_delta_phi"),
                    s.unloading_median_delta_phi,
                ));
                m.push((format!("{mode}.detuning_iqr_hz"), s.detuning_iqr));
                m.push((format!("{mode}.kde_bandwidth_hz"), s.bandwidth));
                m.push((format!("{mode}.unsettled_records"), run.result.unsettled() as f64));
            }
            art.write("kde.csv", |w| protocols::write_kde_csv(w, &ab))?;
        }
    }
    art.write("metrics.csv", |w| protocols::write_metrics_csv(w, &m))?;
    Ok(m)
}

#[derive(Serialize)]
struct ManifestMeta<'a> {
    protocol: &'a str,
    seed: u64,
    version: &'a str,
    started: String,
    finished: String,
    files: &'a [String],
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest: ManifestMeta<'a>,
    config: &'a RunConfig,
}

/// Runs the configured protocol and writes its artifacts plus `manifest.toml`.
pub fn execute(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let started = Utc::now();
    let protocol = cfg.protocol.name();
    let dir = create_run_dir(&cfg.output_dir, protocol, &started)?;
    let mut art = Artifacts { dir, files: Vec::new() };
    art.write("config.toml", |w| w.write_all(serialize_config(cfg).as_bytes()))?;
    let metrics = run_protocol(cfg, &mut art)?;

    let files = art.files.clone();
    let manifest = Manifest {
        manifest: ManifestMeta {
            protocol,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION"),
            started: started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            files: &files,
        },
        config: cfg,
    };
    let text = toml::to_string(&manifest).expect("manifest is always representable in TOML");
    art.write("manifest.toml", |w| w.write_all(text.as_bytes()))?;
    Ok(RunSummary {
        run_dir: art.dir,
        files: art.files,
        metrics,
    })
}
