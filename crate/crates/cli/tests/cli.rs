use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use resotrack::modane::io::read_params;
use resotrack::plant::PlantConfig;
use resotrack_cli::{execute, parse_manifest};

fn resotrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resotrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn only_run_dir(out: &Path, protocol: &str) -> PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(out.join(protocol))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn calibrate_writes_parameters_close_to_plant_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 4\n[protocol.calibrate]\nsample_rate = 200000.0\n");
    let out = tmp.path().join("out");
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(res.stdout.is_empty());

    let run = only_run_dir(&out, "calibrate");
    let cal = read_params(
        fs::File::open(run.join("calibration.txt"))
            .map(std::io::BufReader::new)
            .unwrap(),
    )
    .unwrap();
    let truth = PlantConfig::default().true_cal;
    assert!((cal.ref_model.f_res - truth.ref_model.f_res).abs() < 0.5);
    assert!((cal.ref_model.alpha_l() / truth.ref_model.alpha_l() - 1.0).abs() < 0.02);
    for f in ["config.toml", "calibration_sweep.csv", "metrics.csv", "manifest.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
}

#[test]
fn mode_ablation_writes_one_directory_per_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[protocol.mode_ablation]\nsample_rate = 200000.0\n\
         [protocol.mode_ablation.schedule]\nsteps = 10\n\
         [protocol.mode_ablation.calibration]\nsample_rate = 200000.0\n",
    );
    let out = tmp.path().join("out");
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("full.max_abs_delta_phi"), "{stdout}");

    let run = only_run_dir(&out, "mode_ablation");
    for mode in ["off", "fixed_k", "adaptive_k", "full"] {
        assert!(run.join(mode).join("iterations.csv").is_file(), "{mode}");
        assert!(run.join(mode).join("branches.csv").is_file(), "{mode}");
    }
    let kde = fs::read_to_string(run.join("kde.csv")).unwrap();
    assert!(kde.starts_with("mode,detuning_hz,density"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seed = 1\n[protocol.calibrate]\nsample_rate = 200000.0\n");
    let out = tmp.path().join("out");
    let res = resotrack(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "77",
        "--quiet",
    ]);
    assert!(res.status.success());
    let manifest = fs::read_to_string(only_run_dir(&out, "calibrate").join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 77"), "{manifest}");
}

#[test]
fn invalid_config_exits_with_1_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[tracker]\nbeta = 1.5\n[protocol.calibrate]\n");
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("tracker.beta"));
}

#[test]
fn protocol_failure_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    // A sweep too narrow to bracket the resonance cannot be fitted.
    let cfg = write_config(
        tmp.path(),
        "[protocol.calibrate]\nsample_rate = 200000.0\n[protocol.calibrate.sweep]\nspan = 160.0\ncenter = 7900.0\n",
    );
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn unwritable_output_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[protocol.calibrate]\n");
    // A regular file where the output directory should go.
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", blocker.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn missing_config_file_exits_with_3() {
    let res = resotrack(&["run", "/nonexistent/run.toml"]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn manifest_reruns_to_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "seed = 9\n[protocol.track_nrus]\nsample_rate = 200000.0\n\
         [protocol.track_nrus.schedule]\nsteps = 8\n\
         [protocol.track_nrus.calibration]\nsample_rate = 200000.0\n",
    );
    let out = tmp.path().join("out");
    let res = resotrack(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(res.status.success());
    let first = only_run_dir(&out, "track_nrus");

    let manifest = fs::read_to_string(first.join("manifest.toml")).unwrap();
    let rerun = execute(&parse_manifest(&manifest).unwrap()).unwrap();
    assert_ne!(rerun.run_dir, first);
    for f in ["iterations.csv", "branches.csv", "metrics.csv", "calibration.txt"] {
        assert_eq!(
            fs::read(first.join(f)).unwrap(),
            fs::read(rerun.run_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}
