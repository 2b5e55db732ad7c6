//! Run configuration: one TOML document per run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use resotrack::plant::PlantConfig;
use resotrack::protocols::{
    AmplitudeSchedule, CalibrationSweep, CondRelaxPhases, DurationStudy, ScheduleEntry, SweepRange, Timing,
    DEFAULT_SAMPLE_RATE,
};
use resotrack::tracker::TrackerConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("malformed document: {0}")]
    Syntax(String),
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending key, when known.
    pub fn path(&self) -> Option<&str> {
        match self {
            Self::Invalid { path, .. } => Some(path),
            Self::Syntax(_) => None,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    pub protocol: ProtocolConfig,
}

/// Exactly one protocol table, e.g. `[protocol.track_nrus]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolConfig {
    Calibrate(CalibrateConfig),
    TrackNrus(TrackNrusConfig),
    SweepNrus(SweepNrusConfig),
    CondRelax(CondRelaxConfig),
    DurationStudy(DurationStudyConfig),
    ModeAblation(ModeAblationConfig),
}

impl ProtocolConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Calibrate(_) => "calibrate",
            Self::TrackNrus(_) => "track_nrus",
            Self::SweepNrus(_) => "sweep_nrus",
            Self::CondRelax(_) => "cond_relax",
            Self::DurationStudy(_) => "duration_study",
            Self::ModeAblation(_) => "mode_ablation",
        }
    }
}

/// Where the setup corrections come from for protocols that need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSource {
    /// Params file from an earlier `calibrate` run; a fresh sweep when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub sweep: CalibrationSweep,
    /// [S/s]
    pub sample_rate: f64,
}

impl Default for CalibrationSource {
    fn default() -> Self {
        Self {
            file: None,
            sweep: CalibrationSweep::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

/// Symmetric up-and-down amplitude staircase, or an explicit amplitude list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub a_min: f64,
    pub a_max: f64,
    pub steps: usize,
    /// Overrides `a_min`, `a_max` and `steps` [V].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<Vec<f64>>,
    pub timing: Timing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            a_min: 0.5,
            a_max: 150.0,
            steps: 60,
            amplitudes: None,
            timing: Timing::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> AmplitudeSchedule {
        match &self.amplitudes {
            Some(list) => AmplitudeSchedule {
                entries: list
                    .iter()
                    .map(|&amplitude| ScheduleEntry {
                        amplitude,
                        timing: self.timing,
                    })
                    .collect(),
            },
            None => AmplitudeSchedule::symmetric(self.a_min, self.a_max, self.steps, self.timing),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateConfig {
    pub sweep: CalibrationSweep,
    pub sample_rate: f64,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            sweep: CalibrationSweep::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackNrusConfig {
    pub schedule: ScheduleConfig,
    pub sample_rate: f64,
    pub calibration: CalibrationSource,
}

impl Default for TrackNrusConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            calibration: CalibrationSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepNrusConfig {
    pub schedule: ScheduleConfig,
    pub range: SweepRange,
    pub sample_rate: f64,
    pub calibration: CalibrationSource,
}

impl Default for SweepNrusConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            range: SweepRange::default(),
            // About 19 000 records at the default grid.
            sample_rate: 2e5,
            calibration: CalibrationSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondRelaxConfig {
    pub phases: CondRelaxPhases,
    /// Log-time fit window on the relaxation series [s].
    pub fit_window: (f64, f64),
    pub sample_rate: f64,
    pub calibration: CalibrationSource,
}

impl Default for CondRelaxConfig {
    fn default() -> Self {
        Self {
            phases: CondRelaxPhases::default(),
            fit_window: (1.0, 300.0),
            // About 134 000 back-to-back records at the default phases.
            sample_rate: 5e4,
            calibration: CalibrationSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DurationStudyConfig {
    pub study: DurationStudy,
    pub sample_rate: f64,
    pub calibration: CalibrationSource,
}

impl Default for DurationStudyConfig {
    fn default() -> Self {
        Self {
            study: DurationStudy::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            calibration: CalibrationSource::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeAblationConfig {
    pub schedule: ScheduleConfig,
    /// Detuning KDE bandwidth [Hz]; Silverman's rule per mode when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kde_bandwidth: Option<f64>,
    pub sample_rate: f64,
    pub calibration: CalibrationSource,
}

impl Default for ModeAblationConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            kde_bandwidth: None,
            sample_rate: DEFAULT_SAMPLE_RATE,
            calibration: CalibrationSource::default(),
        }
    }
}

/// Parses and validates a run configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ConfigError::at(
            if path == "." { String::new() } else { path },
            inner.message().trim().to_string(),
        )
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Fully resolved document; `parse_config` of the output gives back `cfg`.
pub fn serialize_config(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run configuration is always representable in TOML")
}

#[derive(Deserialize)]
struct ManifestDoc {
    config: toml::Value,
}

/// Reads the `[config]` table of a run manifest.
pub fn parse_manifest(text: &str) -> Result<RunConfig, ConfigError> {
    let doc: ManifestDoc = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let inner = toml::to_string(&doc.config).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    parse_config(&inner)
}

fn check_positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("{v} must be > 0")))
    }
}

fn check_calibration(base: &str, c: &CalibrationSource) -> Result<(), ConfigError> {
    check_positive(&format!("{base}.calibration.sample_rate"), c.sample_rate)?;
    check_positive(&format!("{base}.calibration.sweep.amplitude"), c.sweep.amplitude)?;
    check_positive(&format!("{base}.calibration.sweep.step"), c.sweep.step)
}

fn check_schedule(path: &str, s: &ScheduleConfig) -> Result<(), ConfigError> {
    if s.amplitudes.is_none() && !(s.a_min <= s.a_max) {
        return Err(ConfigError::at(
            path,
            format!("a_min {} exceeds a_max {}", s.a_min, s.a_max),
        ));
    }
    s.build().validate().map_err(|e| ConfigError::at(path, e.to_string()))
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    cfg.plant
        .validate()
        .map_err(|e| ConfigError::at("plant", e.to_string()))?;
    cfg.tracker
        .validate()
        .map_err(|(field, msg)| ConfigError::at(format!("tracker.{field}"), msg))?;
    let base = format!("protocol.{}", cfg.protocol.name());
    let rate = |r: f64| check_positive(&format!("{base}.sample_rate"), r);
    match &cfg.protocol {
        ProtocolConfig::Calibrate(c) => {
            rate(c.sample_rate)?;
            check_positive(&format!("{base}.sweep.amplitude"), c.sweep.amplitude)?;
            check_positive(&format!("{base}.sweep.step"), c.sweep.step)?;
        }
        ProtocolConfig::TrackNrus(c) => {
            rate(c.sample_rate)?;
            check_schedule(&format!("{base}.schedule"), &c.schedule)?;
            check_calibration(&base, &c.calibration)?;
        }
        ProtocolConfig::SweepNrus(c) => {
            rate(c.sample_rate)?;
            check_schedule(&format!("{base}.schedule"), &c.schedule)?;
            c.range
                .validate()
                .map_err(|e| ConfigError::at(format!("{base}.range"), e.to_string()))?;
            check_calibration(&base, &c.calibration)?;
        }
        ProtocolConfig::CondRelax(c) => {
            rate(c.sample_rate)?;
            c.phases
                .validate()
                .map_err(|e| ConfigError::at(format!("{base}.phases"), e.to_string()))?;
            let (lo, hi) = c.fit_window;
            if !(lo > 0.0 && lo < hi) {
                return Err(ConfigError::at(
                    format!("{base}.fit_window"),
                    format!("need 0 < t_lo < t_hi, got ({lo}, {hi})"),
                ));
            }
            check_calibration(&base, &c.calibration)?;
        }
        ProtocolConfig::DurationStudy(c) => {
            rate(c.sample_rate)?;
            let path = format!("{base}.study");
            if c.study.durations.is_empty() {
                return Err(ConfigError::at(
                    format!("{path}.durations"),
                    "at least one duration required",
                ));
            }
            for &t in &c.study.durations {
                c.study
                    .schedule(t)
                    .validate()
                    .map_err(|e| ConfigError::at(format!("{path}.durations"), format!("{t} s: {e}")))?;
            }
            check_calibration(&base, &c.calibration)?;
        }
        ProtocolConfig::ModeAblation(c) => {
            rate(c.sample_rate)?;
            check_schedule(&format!("{base}.schedule"), &c.schedule)?;
            if let Some(bw) = c.kde_bandwidth {
                check_positive(&format!("{base}.kde_bandwidth"), bw)?;
            }
            check_calibration(&base, &c.calibration)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_track_nrus_uses_standard_schedule() {
        let cfg = parse_config("[protocol.track_nrus]\n").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.tracker, TrackerConfig::default());
        let ProtocolConfig::TrackNrus(p) = &cfg.protocol else {
            panic!("wrong protocol {cfg:?}");
        };
        assert_eq!(p.schedule.build(), AmplitudeSchedule::standard());
    }

    #[test]
    fn invariant_violation_names_the_field() {
        let err = parse_config("[tracker]\nbeta = 1.5\n[protocol.track_nrus]\n").unwrap_err();
        assert_eq!(err.path(), Some("tracker.beta"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_path() {
        let err = parse_config("[tracker]\nbetta = 0.5\n[protocol.track_nrus]\n").unwrap_err();
        assert!(err.path().unwrap().starts_with("tracker"), "{err}");
        let err = parse_config("[protocol.track_nrus.schedule]\nsteps = \"many\"\n").unwrap_err();
        assert_eq!(err.path(), Some("protocol.track_nrus.schedule.steps"), "{err}");
        let err = parse_config("[protocol.sweep_nrus.range]\nstep = -5.0\n").unwrap_err();
        assert_eq!(err.path(), Some("protocol.sweep_nrus.range"), "{err}");
    }

    #[test]
    fn missing_protocol_is_an_error() {
        let err = parse_config("seed = 3\n").unwrap_err();
        assert!(err.to_string().contains("protocol"), "{err}");
        assert!(parse_config("[protocol.track_nrus]\n[protocol.cond_relax]\n").is_err());
        assert!(parse_config("[protocol.warp_drive]\n").is_err());
    }

    #[test]
    fn serialize_parse_round_trip() {
        let doc = "seed = 11\n[tracker]\ninhibition_iters = 2\nsubtract_feedforward = true\n\
                   [protocol.mode_ablation]\nkde_bandwidth = 0.5\n";
        let cfg = parse_config(doc).unwrap();
        assert!(cfg.tracker.subtract_feedforward);
        let normalized = serialize_config(&cfg);
        let again = parse_config(&normalized).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(serialize_config(&again), normalized);
    }

    #[test]
    fn every_protocol_parses_with_defaults() {
        for name in [
            "calibrate",
            "track_nrus",
            "sweep_nrus",
            "cond_relax",
            "duration_study",
            "mode_ablation",
        ] {
            let cfg = parse_config(&format!("[protocol.{name}]\n")).unwrap();
            assert_eq!(cfg.protocol.name(), name);
            assert_eq!(parse_config(&serialize_config(&cfg)).unwrap(), cfg);
        }
    }
}
