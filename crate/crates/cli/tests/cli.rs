use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spinlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinlab"))
        .args(args)
        .env_remove("SPINLAB_THREADS")
        .output()
        .expect("spawn spinlab")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bundled_configs() -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    v.sort();
    v
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn meta(csv: &str) -> BTreeMap<String, String> {
    csv.lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// `fit.param.name=value` lines printed by `spinlab fit`.
fn printed_params(stdout: &str) -> BTreeMap<String, f64> {
    stdout
        .lines()
        .filter_map(|l| {
            let (k, v) = l.strip_prefix("fit.param.")?.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect()
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    v.sort();
    v
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("test.cfg");
    fs::write(&p, body).unwrap();
    p
}

const T1_CFG: &str = "\
[experiment]
protocol = t1
name = t1

[system]
t1 = 5.84 us

[sweep]
start = 10 ns
stop = 30 us
n = 60
scale = log

[sim]
n_traj = 1

[fit]
model = monoexp
";

#[test]
fn list_protocols_names_every_protocol() {
    let out = spinlab(&["list-protocols"]);
    assert!(out.status.success());
    let s = text(&out.stdout);
    let ids: Vec<&str> = s.lines().filter_map(|l| l.split_whitespace().next()).collect();
    for p in ["odmr", "rabi", "t1", "echo", "cpmg", "xy8", "spinlock", "dressed-rabi", "casr", "eseem"] {
        assert!(ids.contains(&p), "missing {p} in\n{s}");
    }
}

#[test]
fn validate_accepts_every_bundled_config() {
    let configs = bundled_configs();
    assert!(configs.len() >= 16);
    for c in configs {
        let out = spinlab(&["validate", c.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", c.display(), text(&out.stderr));
    }
}

#[test]
fn empty_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &T1_CFG.replace("n = 60", "n = 0"));
    let cfg = cfg.to_str().unwrap();
    for args in [vec!["validate", cfg], vec!["run", cfg, "--out", dir.path().to_str().unwrap()]] {
        let out = spinlab(&args);
        assert_eq!(out.status.code(), Some(2));
        let err = text(&out.stderr);
        assert!(err.contains("line 11") && err.contains("sweep.n"), "{err}");
    }
    assert!(csv_files(dir.path()).is_empty());
}

#[test]
fn unknown_key_reports_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &T1_CFG.replace("n_traj = 1", "n_traj = 1\nn_trajs = 4"));
    let out = spinlab(&["validate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("line 16") && err.contains("sim.n_trajs"), "{err}");
}

#[test]
fn bad_override_is_reported_as_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), T1_CFG);
    let out = spinlab(&["validate", cfg.to_str().unwrap(), "--set", "sim.n_traj=many"]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("command line") && err.contains("sim.n_traj"), "{err}");
}

#[test]
fn fit_recovers_t1_from_engine_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &T1_CFG.replace("[fit]\nmodel = monoexp\n", ""));
    let out = spinlab(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = dir.path().join("t1.csv");
    assert!(!meta(&fs::read_to_string(&csv).unwrap()).contains_key("fit.model"));
    let out = spinlab(&["fit", csv.to_str().unwrap(), "--model", "monoexp"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let p = printed_params(&text(&out.stdout));
    let t1 = p["t1"];
    assert!((t1 / 5.84e-6 - 1.0).abs() < 0.01, "t1 = {t1:e}");
}

#[test]
fn identical_seed_gives_identical_bytes_across_threads() {
    let cfg = configs_dir().join("fig1h_echo.cfg");
    let mut runs = Vec::new();
    for threads in ["1", "2", "1", "3"] {
        let dir = tempfile::tempdir().unwrap();
        let out = spinlab(&[
            "run",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
            "--threads",
            threads,
            "--seed",
            "7",
            "--set",
            "sim.n_traj=300",
        ]);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let files: Vec<(String, Vec<u8>)> = csv_files(dir.path())
            .into_iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
            .collect();
        assert!(!files.is_empty());
        runs.push(files);
    }
    for r in &runs[1..] {
        assert_eq!(r, &runs[0]);
    }
}

#[test]
fn threads_fall_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), T1_CFG);
    let out = Command::new(env!("CARGO_BIN_EXE_spinlab"))
        .args(["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .env("SPINLAB_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(text(&out.stderr).contains("on 2 threads"), "{}", text(&out.stderr));
}

#[test]
fn svg_output_is_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), T1_CFG);
    let out = spinlab(&["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--svg"]);
    assert!(out.status.success());
    let svg = fs::read_to_string(dir.path().join("t1.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

/// Runs a bundled config, then refits every CSV that carries a fit block
/// with only `--model` and checks the parameters agree.
fn round_trip(name: &str, extra: &[&str]) -> (PathBuf, tempfile::TempDir) {
    let cfg = configs_dir().join(format!("{name}.cfg"));
    let dir = tempfile::tempdir().unwrap();
    let out = spinlab(&["validate", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{name}: {}", text(&out.stderr));
    let mut args = vec!["run", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = spinlab(&args);
    assert!(out.status.success(), "{name}: {}", text(&out.stderr));
    let mut fitted = 0;
    for csv in csv_files(dir.path()) {
        let m = meta(&fs::read_to_string(&csv).unwrap());
        let Some(model) = m.get("fit.model") else { continue };
        let out = spinlab(&["fit", csv.to_str().unwrap(), "--model", model]);
        assert!(out.status.success(), "{}: {}", csv.display(), text(&out.stderr));
        let refit = printed_params(&text(&out.stdout));
        for (k, v) in &m {
            let Some(p) = k.strip_prefix("fit.param.") else { continue };
            let v: f64 = v.parse().unwrap();
            let err: f64 = m[&format!("fit.stderr.{p}")].parse().unwrap();
            let r = refit[p];
            assert!((r - v).abs() <= 1e-6 * v.abs() + 0.05 * err, "{}: {p} {r:e} vs {v:e}", csv.display());
        }
        fitted += 1;
    }
    assert!(fitted > 0, "{name}: nothing to fit");
    (dir.path().to_path_buf(), dir)
}

#[test]
fn round_trip_fast_configs() {
    for name in [
        "fig1e_odmr",
        "fig1f_rabi",
        "fig1g_t1",
        "fig1h_echo",
        "fig2c_t1rho",
        "fig3b_xy8",
        "fig3c_xy8n",
        "figS2_rabi_lock",
        "figS3_dressed_rabi",
        "figS4_amp_sweep",
    ] {
        round_trip(name, &[]);
    }
}

#[test]
fn round_trip_spin_lock_sensing() {
    round_trip("fig3e_spinlock", &["--set", "sim.n_traj=8"]);
    round_trip("fig3f_spinlock_tsl", &["--set", "sim.n_traj=8"]);
}

#[test]
fn round_trip_eseem() {
    let (dir, _keep) = round_trip("figS1_eseem", &["--set", "protocol.n_theta=8", "--set", "protocol.n_phi=8"]);
    let m = meta(&fs::read_to_string(dir.join("figS1_spectrum.csv")).unwrap());
    let peak: f64 = m["peak.frequency"].parse().unwrap();
    assert!((peak - 45e6).abs() < 3e6, "peak {peak:e}");
}

#[test]
fn cpmg_power_law_and_curve_count() {
    let (dir, _keep) = round_trip("fig2a_cpmg", &[]);
    let curves = csv_files(&dir).iter().filter(|p| p.to_string_lossy().contains("fig2a_n")).count();
    assert_eq!(curves, 8);
    let m = meta(&fs::read_to_string(dir.join("fig2a_t2.csv")).unwrap());
    let s: f64 = m["fit.param.s"].parse().unwrap();
    assert!((0.55..=0.70).contains(&s), "s = {s}");
    round_trip("fig2b_power_law", &["--set", "sim.n_traj=150"]);
}

#[test]
fn casr_trace_and_sub_hertz_peak() {
    let (dir, _keep) = round_trip("fig3h_casr", &[]);
    let trace = fs::read_to_string(dir.join("fig3h.csv")).unwrap();
    let last: f64 = trace.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(last > 1.99 && last <= 2.0, "trace ends at {last}");
    let m = meta(&fs::read_to_string(dir.join("fig3h_spectrum.csv")).unwrap());
    let fwhm: f64 = m["peak.fwhm"].parse().unwrap();
    let f: f64 = m["peak.frequency"].parse().unwrap();
    assert!(fwhm <= 1.0, "FWHM {fwhm}");
    assert!((f - 1000.0).abs() < 1.0, "peak {f}");
}
