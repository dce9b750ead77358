//! Protocol registry: turns a parsed configuration into a [`Plan`] of
//! simulation jobs, runs it and renders the output files.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use spinlab::analysis::{
    baseline_subtract, evaluate, fft_peak, fit, fit_power_law, model_by_id, FitResult, Model, ModelSpec,
    StretchedExpCos, Window, MODEL_IDS,
};
use spinlab::constants::GAMMA_ELECTRON;
use spinlab::engine::{
    run_casr, run_dressed_rabi, run_experiment, run_rf_sweep, DressedRelaxation, NoiseModel, ReadoutMode,
    ReadoutModel, SimConfig, SweepResult,
};
use spinlab::eseem::{eseem_spectrum, simulate_two_pulse_eseem, EseemConfig, Orientation};
use spinlab::hamiltonian::{transition_frequencies, triplet_hamiltonian, DriveParams, ZeemanParams, ZfsParams};
use spinlab::noise::{analytic_t2, EnsembleModel, NoisePsd, OuParams};
use spinlab::sequence::{
    build_casr, build_cpmg, build_odmr, build_rabi, build_spin_echo, build_spinlock, build_t1, build_xy8, casr_dt,
    CasrSchedule, RfSignal, Sequence, SpinlockVariant,
};

use crate::config::{parse_quantity, ConfigError, Ini, Reader, Unit};
use crate::plot::{line_plot, Axis, Series};

pub struct ProtocolInfo {
    pub id: &'static str,
    pub summary: &'static str,
    /// Keys accepted in `[protocol]`.
    pub keys: &'static [&'static str],
}

pub const PROTOCOLS: &[ProtocolInfo] = &[
    ProtocolInfo {
        id: "odmr",
        summary: "pulsed ODMR, fixed MW pulse stepped in frequency",
        keys: &["center", "mw_duration"],
    },
    ProtocolInfo {
        id: "rabi",
        summary: "Rabi nutation vs MW pulse length, one curve per Rabi frequency",
        keys: &["rabi"],
    },
    ProtocolInfo {
        id: "t1",
        summary: "longitudinal relaxation, optional pi-prepared reference",
        keys: &["pi_reference"],
    },
    ProtocolInfo {
        id: "echo",
        summary: "Hahn echo vs edge-to-edge tau",
        keys: &[],
    },
    ProtocolInfo {
        id: "cpmg",
        summary: "CPMG-N decay vs total free evolution, one curve per N",
        keys: &["pulses"],
    },
    ProtocolInfo {
        id: "xy8",
        summary: "XY8-M response vs RF frequency",
        keys: &["m", "tau"],
    },
    ProtocolInfo {
        id: "spinlock",
        summary: "spin-lock: T1rho decay, RF sensing or lock-amplitude sweep",
        keys: &["variant", "t_sl", "lock_rabi"],
    },
    ProtocolInfo {
        id: "dressed-rabi",
        summary: "dressed-state Rabi oscillation under a resonant RF field",
        keys: &["lock_rabi", "rf_phase"],
    },
    ProtocolInfo {
        id: "casr",
        summary: "synchronised readout train and its spectrum",
        keys: &["nu_dd", "delta_nu", "t_m", "steps_per_period", "spectrum_max"],
    },
    ProtocolInfo {
        id: "eseem",
        summary: "two-pulse echo envelope modulation and its spectrum",
        keys: &[
            "mw_freq",
            "bandwidth",
            "t2",
            "orientation",
            "n_theta",
            "n_phi",
            "theta",
            "phi",
            "refocusing_pulses",
        ],
    },
];

const COMMON: &[(&str, &[&str])] = &[
    ("experiment", &["protocol", "name", "description"]),
    ("system", &["d", "e", "b0", "gamma", "rabi", "drive_phase", "detuning", "t1"]),
    ("ensemble", &["septet_spacing", "septet_hwhm", "rabi_spread"]),
    ("noise", &["b", "tc", "echo_t2"]),
    ("sweep", &["start", "stop", "n", "scale", "unit"]),
    ("rf", &["b", "nu", "phase"]),
    ("sim", &["dt", "n_traj", "seed", "ideal_pulses", "randomize_rf_phase", "dressed_relaxation"]),
    ("readout", &["mode", "contrast0", "photons"]),
    ("fit", &["model", "lines", "fix", "release", "lw", "tau", "k", "baseline", "baseline_width", "power_law"]),
    ("output", &["dir", "svg"]),
];

pub fn protocol(id: &str) -> Option<&'static ProtocolInfo> {
    PROTOCOLS.iter().find(|p| p.id == id)
}

/// Accepted sections and keys for one protocol.
pub fn schema(p: &ProtocolInfo) -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut s: BTreeMap<&str, Vec<&str>> = COMMON.iter().map(|(k, v)| (*k, v.to_vec())).collect();
    s.insert("protocol", p.keys.to_vec());
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    None,
    /// Straight line through the outer `baseline_width` of the axis.
    Edges,
    /// The same sequence run without the RF field.
    NoRf,
}

#[derive(Debug, Clone)]
pub struct FitPlan {
    pub model: String,
    pub lines: usize,
    pub fixed: BTreeMap<String, f64>,
    pub release: Vec<String>,
    pub lw: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<f64>,
    pub baseline: BaselineKind,
    pub baseline_width: f64,
    /// Fit `t2 = a N^s` over the per-curve results (CPMG).
    pub power_law: bool,
}

impl FitPlan {
    /// `None` for the closed-form power law.
    pub fn model(&self, job_tau: Option<f64>) -> Result<Option<Box<dyn Model>>, String> {
        if self.model == "stretched-exp-cos" {
            if let Some(k) = self.k {
                return Ok(Some(Box::new(StretchedExpCos { k })));
            }
        }
        let mut construct = BTreeMap::new();
        if let Some(lw) = self.lw {
            construct.insert("lw".to_string(), lw);
        }
        if let Some(tau) = self.tau.or(job_tau) {
            construct.insert("tau".to_string(), tau);
        }
        model_by_id(&self.model, self.lines, &construct).map_err(|e| e.to_string())
    }

    pub fn spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(&self.model);
        for (k, v) in &self.fixed {
            spec = spec.fix(k, *v);
        }
        for k in &self.release {
            spec = spec.release(k);
        }
        spec
    }

    fn check(&self, job_tau: Option<f64>) -> Result<(), String> {
        if let Some(m) = self.model(job_tau)? {
            let names: Vec<String> = m.params().into_iter().map(|p| p.name).collect();
            self.spec().validate(&names).map_err(|e| e.to_string())?;
        } else if !self.fixed.is_empty() || !self.release.is_empty() {
            return Err("power-law takes no fixed or released parameters".into());
        }
        Ok(())
    }

    /// Metadata that lets `spinlab fit` repeat this fit on the written CSV.
    pub fn options_meta(&self, job_tau: Option<f64>) -> Vec<(String, String)> {
        let mut m = vec![("fit.opt.lines".to_string(), self.lines.to_string())];
        if !self.fixed.is_empty() {
            let fix: Vec<String> = self.fixed.iter().map(|(k, v)| format!("{k}={v:e}")).collect();
            m.push(("fit.opt.fix".into(), fix.join(",")));
        }
        if !self.release.is_empty() {
            m.push(("fit.opt.release".into(), self.release.join(",")));
        }
        for (key, v) in [("lw", self.lw), ("tau", self.tau.or(job_tau)), ("k", self.k)] {
            if let Some(v) = v {
                m.push((format!("fit.opt.{key}"), format!("{v:e}")));
            }
        }
        m
    }

    pub fn run(&self, model: Option<&dyn Model>, x: &[f64], y: &[f64]) -> Result<FitResult, String> {
        match model {
            Some(m) => fit(m, x, y, &self.spec()),
            None => fit_power_law(x, y),
        }
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone)]
pub enum Work {
    Sweep { seqs: Vec<Sequence>, rf: Option<RfSignal> },
    RfSweep { seq: Sequence, signals: Vec<RfSignal> },
    DressedRabi { seqs: Vec<Sequence>, rf: RfSignal },
    Casr { schedule: Box<CasrSchedule>, rf: RfSignal, spectrum_max: f64 },
    Eseem(Box<EseemConfig>),
}

#[derive(Debug, Clone)]
pub struct Job {
    /// File-name suffix; empty for single-curve runs.
    pub label: String,
    pub work: Work,
    pub meta: Vec<(String, String)>,
    /// Replacement axis `(name, unit, values)`.
    pub axis: Option<(String, String, Vec<f64>)>,
    /// τ handed to the `sinc2` model.
    pub tau: Option<f64>,
    /// CPMG pulse count, the abscissa of the power-law fit.
    pub pulses: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub name: String,
    pub protocol: &'static str,
    pub description: String,
    /// SHA-256 of the canonical configuration (without `[output]`).
    pub config_hash: String,
    pub sim: SimConfig,
    pub noise: NoiseModel,
    pub readout: ReadoutModel,
    pub jobs: Vec<Job>,
    pub fit: Option<FitPlan>,
    pub log_x: bool,
    pub out_dir: String,
    pub svg: bool,
}

impl Plan {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Plan, ConfigError> {
        let mut ini = Ini::parse(text)?;
        for o in overrides {
            ini.set(o)?;
        }
        Plan::from_ini(&ini)
    }

    pub fn from_ini(ini: &Ini) -> Result<Plan, ConfigError> {
        let r = Reader::new(ini);
        let id = r.require("experiment", "protocol")?;
        let info = protocol(&id.value).ok_or_else(|| {
            let ids: Vec<&str> = PROTOCOLS.iter().map(|p| p.id).collect();
            r.error_at("experiment", "protocol", format!("unknown protocol (known: {})", ids.join(", ")))
        })?;
        ini.check_schema(&schema(info))?;
        let name = r.text("experiment", "name").unwrap_or(info.id).to_string();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) {
            return Err(r.error_at("experiment", "name", "use letters, digits, `_`, `-` and `.` only"));
        }
        let ctx = Ctx::new(r, info.id)?;
        let mut plan = Plan {
            name,
            protocol: info.id,
            description: r.text("experiment", "description").unwrap_or("").to_string(),
            config_hash: hex(&Sha256::digest(ini.canonical("output").as_bytes())),
            sim: ctx.sim.clone(),
            noise: ctx.noise.clone(),
            readout: ctx.readout,
            jobs: Vec::new(),
            fit: ctx.fit_plan()?,
            log_x: false,
            out_dir: r.text("output", "dir").unwrap_or("out").to_string(),
            svg: r.flag("output", "svg", false)?,
        };
        ctx.build(&mut plan)?;
        plan.preflight()?;
        Ok(plan)
    }

    /// Engine-level checks of every job, so `validate` catches what `run`
    /// would reject.
    fn preflight(&self) -> Result<(), ConfigError> {
        let fail = |e: String| ConfigError::Invalid(format!("{}: {e}", self.protocol));
        self.sim.validate().map_err(|e| fail(e.to_string()))?;
        self.noise.validate().map_err(|e| fail(e.to_string()))?;
        self.readout.validate().map_err(|e| fail(e.to_string()))?;
        let spread = 1.0 + 5.0 * self.noise.ensemble.rabi_spread;
        let check = |s: &Sequence, rf: Option<&RfSignal>| -> Result<(), ConfigError> {
            s.validate().map_err(|e| fail(e.to_string()))?;
            self.sim.check_resolution(s.max_rabi() * spread, rf).map_err(|e| fail(e.to_string()))
        };
        for job in &self.jobs {
            match &job.work {
                Work::Sweep { seqs, rf } => seqs.iter().try_for_each(|s| check(s, rf.as_ref()))?,
                Work::RfSweep { seq, signals } => signals.iter().try_for_each(|rf| check(seq, Some(rf)))?,
                Work::DressedRabi { seqs, rf } => seqs.iter().try_for_each(|s| check(s, Some(rf)))?,
                Work::Casr { schedule, rf, .. } => check(&schedule.block, Some(rf))?,
                Work::Eseem(cfg) => cfg.validate().map_err(|e| fail(e.to_string()))?,
            }
            if let Some(f) = &self.fit {
                f.check(job.tau).map_err(|e| ConfigError::Invalid(format!("fit: {e}")))?;
            }
        }
        Ok(())
    }

    /// Number of simulated points over all jobs.
    pub fn points(&self) -> usize {
        self.jobs
            .iter()
            .map(|j| match &j.work {
                Work::Sweep { seqs, .. } | Work::DressedRabi { seqs, .. } => seqs.len(),
                Work::RfSweep { signals, .. } => signals.len(),
                Work::Casr { schedule, .. } => schedule.n_blocks,
                Work::Eseem(cfg) => cfg.tau_grid.len(),
            })
            .sum()
    }

    fn file_stem(&self, job: &Job) -> String {
        if job.label.is_empty() {
            self.name.clone()
        } else {
            format!("{}_{}", self.name, job.label)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// `amp_a, t_a, amp_b, t_b` with time units on the two time constants.
fn parse_dressed(value: &str) -> Result<DressedRelaxation, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    let [a, ta, b, tb] = parts[..] else {
        return Err(format!("expected `amp_a, t_a, amp_b, t_b`, got `{value}`"));
    };
    let d = DressedRelaxation {
        amp_a: parse_quantity(a, Unit::None)?,
        t_a: parse_quantity(ta, Unit::Time)?,
        amp_b: parse_quantity(b, Unit::None)?,
        t_b: parse_quantity(tb, Unit::Time)?,
    };
    if d.amp_a < 0.0 || d.amp_b < 0.0 || d.amp_a + d.amp_b > 1.0 + 1e-9 || d.t_a <= 0.0 || d.t_b <= 0.0 {
        return Err("amplitudes must be >= 0 with a sum <= 1, times > 0".into());
    }
    Ok(d)
}

/// Compact label text: `13`, `2.5`, `0.125`.
fn num_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.replace('.', "p")
}

struct Ctx<'a> {
    r: Reader<'a>,
    protocol: &'static str,
    drive: DriveParams,
    zfs: ZfsParams,
    zeeman: ZeemanParams,
    sim: SimConfig,
    noise: NoiseModel,
    readout: ReadoutModel,
}

struct Grid {
    values: Vec<f64>,
    log: bool,
    /// Values are multiples of the analytic coherence time.
    in_t2: bool,
}

impl<'a> Ctx<'a> {
    fn new(r: Reader<'a>, protocol: &'static str) -> Result<Self, ConfigError> {
        let positive = |v: f64| v > 0.0;
        let zfs = ZfsParams {
            d: r.quantity_or("system", "d", Unit::Frequency, ZfsParams::BORON_VACANCY.d)?,
            e: r.quantity_or("system", "e", Unit::Frequency, ZfsParams::BORON_VACANCY.e)?,
        };
        zfs.validate().map_err(|e| r.error_at("system", "d", e.to_string()))?;
        let gamma = r.checked("system", "gamma", Unit::None, Some(GAMMA_ELECTRON), positive, "must be > 0")?;
        let zeeman = ZeemanParams {
            gamma,
            b0: [0.0, 0.0, r.quantity_or("system", "b0", Unit::Field, 8e-3)?],
        };
        let drive = DriveParams {
            rabi: r.checked("system", "rabi", Unit::Frequency, Some(67e6), positive, "must be > 0")?,
            phase: r.quantity_or("system", "drive_phase", Unit::Angle, 0.0)?,
            detuning: r.quantity_or("system", "detuning", Unit::Frequency, 0.0)?,
        };
        let dressed = match r.entry("sim", "dressed_relaxation") {
            Some(e) if e.value.contains(',') => Some(parse_dressed(&e.value).map_err(|m| e.error(m))?),
            _ => match r.choice("sim", "dressed_relaxation", &["none", "boron-vacancy"], "none")? {
                "boron-vacancy" => Some(DressedRelaxation::BORON_VACANCY),
                _ => None,
            },
        };
        let defaults = SimConfig::default();
        let sim = SimConfig {
            dt: r.checked("sim", "dt", Unit::Time, Some(defaults.dt), positive, "must be > 0")?,
            n_traj: match r.count("sim", "n_traj")? {
                Some(0) => return Err(r.error_at("sim", "n_traj", "must be >= 1")),
                Some(n) => n,
                None => defaults.n_traj,
            },
            seed: match r.entry("sim", "seed") {
                Some(e) => e
                    .value
                    .parse::<u64>()
                    .map_err(|_| r.error_at("sim", "seed", format!("expected an unsigned integer, got `{}`", e.value)))?,
                None => defaults.seed,
            },
            t1: r.checked("system", "t1", Unit::Time, Some(defaults.t1), positive, "must be > 0")?,
            dressed_relaxation: dressed,
            ideal_pulses: r.flag("sim", "ideal_pulses", false)?,
            randomize_rf_phase: r.flag("sim", "randomize_rf_phase", false)?,
            gamma,
        };
        let noise = NoiseModel {
            ou: Self::ou(&r)?,
            ensemble: Self::ensemble(&r)?,
        };
        let default_mode = match protocol {
            "odmr" | "rabi" => "mw_on_off",
            "t1" if r.flag("protocol", "pi_reference", true)? => "pi_ref",
            "t1" => "mw_on_off",
            _ => "pi2_3pi2",
        };
        let mode = r.choice("readout", "mode", &["mw_on_off", "pi2_3pi2", "pi_ref"], default_mode)?;
        let readout = ReadoutModel {
            contrast0: r.checked("readout", "contrast0", Unit::None, Some(0.065), |c| c > 0.0 && c <= 1.0, "must be in (0, 1]")?,
            mode: ReadoutMode::parse(mode).expect("listed mode"),
            photons: r
                .quantity("readout", "photons", Unit::None)?
                .map(|n| if n > 0.0 { Ok(n) } else { Err(r.error_at("readout", "photons", "must be > 0")) })
                .transpose()?,
        };
        Ok(Ctx {
            r,
            protocol,
            drive,
            zfs,
            zeeman,
            sim,
            noise,
            readout,
        })
    }

    fn ou(r: &Reader) -> Result<Option<OuParams>, ConfigError> {
        if !r.ini.has_section("noise") {
            return Ok(None);
        }
        let positive = |v: f64| v > 0.0;
        let tc = r.checked("noise", "tc", Unit::Time, None, positive, "must be > 0")?;
        let p = match (r.entry("noise", "b"), r.entry("noise", "echo_t2")) {
            (Some(_), Some(_)) => return Err(r.error_at("noise", "echo_t2", "give either `b` or `echo_t2`, not both")),
            (Some(_), None) => {
                OuParams::new(r.checked("noise", "b", Unit::Frequency, None, positive, "must be > 0")?, tc)
                    .map_err(|e| r.error_at("noise", "b", e.to_string()))?
            }
            (None, Some(_)) => {
                let t2 = r.checked("noise", "echo_t2", Unit::Time, None, positive, "must be > 0")?;
                OuParams::calibrated_for_echo(t2, tc).map_err(|e| r.error_at("noise", "echo_t2", e.to_string()))?
            }
            (None, None) => return Err(ConfigError::Missing("noise.b or noise.echo_t2".into())),
        };
        Ok(Some(p))
    }

    fn ensemble(r: &Reader) -> Result<EnsembleModel, ConfigError> {
        let spread = r.checked("ensemble", "rabi_spread", Unit::None, Some(0.0), |v| (0.0..1.0).contains(&v), "must be in [0, 1)")?;
        match r.quantity("ensemble", "septet_spacing", Unit::Frequency)? {
            Some(spacing) => {
                let hwhm = r.checked("ensemble", "septet_hwhm", Unit::Frequency, None, |v| v > 0.0, "must be > 0")?;
                EnsembleModel::hyperfine_septet(spacing, hwhm, spread)
                    .map_err(|e| r.error_at("ensemble", "septet_spacing", e.to_string()))
            }
            None => {
                if r.entry("ensemble", "septet_hwhm").is_some() {
                    return Err(r.error_at("ensemble", "septet_hwhm", "needs `septet_spacing`"));
                }
                Ok(EnsembleModel {
                    rabi_spread: spread,
                    ..EnsembleModel::homogeneous()
                })
            }
        }
    }

    fn fit_plan(&self) -> Result<Option<FitPlan>, ConfigError> {
        let r = &self.r;
        if !r.ini.has_section("fit") {
            return Ok(None);
        }
        if matches!(self.protocol, "casr" | "eseem") {
            return Err(ConfigError::Invalid(format!(
                "[fit] is not used by `{}`; its spectrum analysis is built in",
                self.protocol
            )));
        }
        let model = r.require("fit", "model")?;
        if !MODEL_IDS.contains(&model.value.as_str()) {
            return Err(r.error_at("fit", "model", format!("unknown model (known: {})", MODEL_IDS.join(", "))));
        }
        let baseline = match r.choice("fit", "baseline", &["none", "edges", "no-rf"], "none")? {
            "edges" => BaselineKind::Edges,
            "no-rf" => BaselineKind::NoRf,
            _ => BaselineKind::None,
        };
        let rf_sweep = matches!(self.protocol, "xy8")
            || (self.protocol == "spinlock" && self.r.text("protocol", "variant") == Some("sensing"));
        if baseline == BaselineKind::NoRf && !rf_sweep {
            return Err(r.error_at("fit", "baseline", "`no-rf` needs an RF-frequency sweep"));
        }
        let power_law = r.flag("fit", "power_law", false)?;
        if power_law && self.protocol != "cpmg" {
            return Err(r.error_at("fit", "power_law", "only CPMG runs have a pulse-count axis"));
        }
        let lines = match r.count("fit", "lines")? {
            Some(0) => return Err(r.error_at("fit", "lines", "must be >= 1")),
            Some(n) => n,
            None => 1,
        };
        let release = r
            .text("fit", "release")
            .map(|s| s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect())
            .unwrap_or_default();
        Ok(Some(FitPlan {
            model: model.value.clone(),
            lines,
            fixed: r.assignments("fit", "fix")?,
            release,
            lw: r.quantity("fit", "lw", Unit::Frequency)?,
            tau: r.quantity("fit", "tau", Unit::Time)?,
            k: r.quantity("fit", "k", Unit::None)?,
            baseline,
            baseline_width: r.checked("fit", "baseline_width", Unit::None, Some(0.1), |w| w > 0.0 && w < 0.5, "must be in (0, 0.5)")?,
            power_law,
        }))
    }

    fn grid(&self, unit: Unit, allow_t2: bool) -> Result<Grid, ConfigError> {
        let r = &self.r;
        if !r.ini.has_section("sweep") {
            return Err(ConfigError::Missing("[sweep] section".into()));
        }
        let in_t2 = match r.text("sweep", "unit") {
            None | Some("abs") => false,
            Some("t2") if allow_t2 => true,
            Some(other) => {
                let allowed = if allow_t2 { "abs, t2" } else { "abs" };
                return Err(r.error_at("sweep", "unit", format!("expected one of {allowed}, got `{other}`")));
            }
        };
        let unit = if in_t2 { Unit::None } else { unit };
        let n = r.count("sweep", "n")?.ok_or_else(|| ConfigError::Missing("sweep.n".into()))?;
        if n == 0 {
            return Err(r.error_at("sweep", "n", "sweep needs at least one point"));
        }
        let start = r.quantity("sweep", "start", unit)?.ok_or_else(|| ConfigError::Missing("sweep.start".into()))?;
        let stop = match r.quantity("sweep", "stop", unit)? {
            Some(v) => v,
            None if n == 1 => start,
            None => return Err(ConfigError::Missing("sweep.stop".into())),
        };
        if n > 1 && !(stop > start) {
            return Err(r.error_at("sweep", "stop", format!("must exceed start ({start:e})")));
        }
        let log = r.choice("sweep", "scale", &["lin", "log"], "lin")? == "log";
        if log && !(start > 0.0) {
            return Err(r.error_at("sweep", "start", "log sweeps need start > 0"));
        }
        let values = (0..n)
            .map(|k| {
                if n == 1 {
                    start
                } else if log {
                    start * (stop / start).powf(k as f64 / (n - 1) as f64)
                } else {
                    start + (stop - start) * k as f64 / (n - 1) as f64
                }
            })
            .collect();
        Ok(Grid { values, log, in_t2 })
    }

    /// RF signal from `[rf]`; `nu` is taken from the config unless given.
    fn rf(&self, nu: Option<f64>) -> Result<RfSignal, ConfigError> {
        let r = &self.r;
        if !r.ini.has_section("rf") {
            return Err(ConfigError::Missing("[rf] section".into()));
        }
        let b = r.checked("rf", "b", Unit::Field, None, |b| b >= 0.0, "must be >= 0")?;
        let phase = r.quantity_or("rf", "phase", Unit::Angle, 0.0)?;
        let nu = match (nu, r.entry("rf", "nu")) {
            (Some(_), Some(_)) => return Err(r.error_at("rf", "nu", format!("set by the `{}` protocol", self.protocol))),
            (Some(v), None) => v,
            (None, _) => r.checked("rf", "nu", Unit::Frequency, None, |v| v > 0.0, "must be > 0")?,
        };
        RfSignal::new(b, nu, phase).map_err(|e| r.error_at("rf", "b", e.to_string()))
    }

    fn no_rf(&self) -> Result<(), ConfigError> {
        match self.r.ini.sections.iter().find(|(s, _)| s == "rf") {
            Some(_) => Err(ConfigError::Invalid(format!("[rf] is not used by this `{}` run", self.protocol))),
            None => Ok(()),
        }
    }

    fn rf_signals(&self, grid: &Grid) -> Result<Vec<RfSignal>, ConfigError> {
        let base = self.rf(Some(1.0))?;
        grid.values
            .iter()
            .map(|&nu| RfSignal::new(base.b_rf, nu, base.phase).map_err(|e| self.r.error_at("sweep", "start", e.to_string())))
            .collect()
    }

    fn invalid(&self, key: &str, e: impl ToString) -> ConfigError {
        self.r.error_at("protocol", key, e.to_string())
    }

    fn build(&self, plan: &mut Plan) -> Result<(), ConfigError> {
        let r = &self.r;
        let job = |label: String, work: Work| Job {
            label,
            work,
            meta: Vec::new(),
            axis: None,
            tau: None,
            pulses: None,
        };
        match self.protocol {
            "odmr" => {
                self.no_rf()?;
                let g = self.grid(Unit::Frequency, false)?;
                let center = match r.quantity("protocol", "center", Unit::Frequency)? {
                    Some(c) => c,
                    None => self.lower_transition()?,
                };
                let duration = r.checked(
                    "protocol",
                    "mw_duration",
                    Unit::Time,
                    Some(self.drive.pi_duration()),
                    |v| v > 0.0,
                    "must be > 0",
                )?;
                let seqs = build_odmr(&g.values, center, duration, &self.drive).map_err(|e| self.invalid("center", e))?;
                let mut j = job(String::new(), Work::Sweep { seqs, rf: None });
                j.meta.push(("center".into(), format!("{center:e}")));
                plan.jobs.push(j);
                plan.log_x = g.log;
            }
            "rabi" => {
                self.no_rf()?;
                let g = self.grid(Unit::Time, false)?;
                let list = r.list("protocol", "rabi", Unit::Frequency)?;
                let rabis = list.clone().unwrap_or(vec![self.drive.rabi]);
                for rabi in rabis {
                    if !(rabi > 0.0) {
                        return Err(self.invalid("rabi", "Rabi frequencies must be > 0"));
                    }
                    let drive = DriveParams { rabi, ..self.drive };
                    let seqs = build_rabi(&g.values, &drive).map_err(|e| self.invalid("rabi", e))?;
                    let label = if list.is_some() { format!("rabi{}MHz", num_label(rabi * 1e-6)) } else { String::new() };
                    let mut j = job(label, Work::Sweep { seqs, rf: None });
                    j.meta.push(("rabi".into(), format!("{rabi:e}")));
                    plan.jobs.push(j);
                }
                plan.log_x = g.log;
            }
            "t1" => {
                self.no_rf()?;
                let g = self.grid(Unit::Time, false)?;
                let pi_ref = r.flag("protocol", "pi_reference", true)?;
                let seqs = build_t1(&g.values, &self.drive, pi_ref).map_err(|e| self.invalid("pi_reference", e))?;
                let mut j = job(String::new(), Work::Sweep { seqs, rf: None });
                j.meta.push(("t1".into(), format!("{:e}", self.sim.t1)));
                plan.jobs.push(j);
                plan.log_x = g.log;
            }
            "echo" => {
                self.no_rf()?;
                let g = self.grid(Unit::Time, false)?;
                let seqs = build_spin_echo(&g.values, &self.drive, PI / 2.0)
                    .map_err(|e| ConfigError::Invalid(format!("echo: {e}")))?;
                plan.jobs.push(job(String::new(), Work::Sweep { seqs, rf: None }));
                plan.log_x = g.log;
            }
            "cpmg" => {
                self.no_rf()?;
                let g = self.grid(Unit::Time, true)?;
                let pulses = r.count_list("protocol", "pulses")?.unwrap_or(vec![1]);
                let psd = self.noise.ou.map(NoisePsd::lorentzian);
                for n in pulses {
                    let t2 = psd.as_ref().map(|p| analytic_t2(p, n, 1e-9, 1e-2)).transpose().map_err(|e| self.invalid("pulses", e))?;
                    let t_s: Vec<f64> = if g.in_t2 {
                        let t2 = t2.ok_or_else(|| r.error_at("sweep", "unit", "`t2` needs a [noise] bath"))?;
                        g.values.iter().map(|v| v * t2).collect()
                    } else {
                        g.values.clone()
                    };
                    let taus: Vec<f64> = t_s.iter().map(|t| t / (2.0 * n as f64)).collect();
                    let seqs = build_cpmg(n, &taus, &self.drive).map_err(|e| self.invalid("pulses", e))?;
                    let mut j = job(format!("n{n}"), Work::Sweep { seqs, rf: None });
                    j.meta.push(("pulses".into(), n.to_string()));
                    if let Some(t2) = t2 {
                        j.meta.push(("analytic_t2".into(), format!("{t2:e}")));
                    }
                    j.axis = Some(("t_s".into(), "s".into(), t_s));
                    j.pulses = Some(n);
                    plan.jobs.push(j);
                }
                plan.log_x = g.log;
            }
            "xy8" => {
                let g = self.grid(Unit::Frequency, false)?;
                let signals = self.rf_signals(&g)?;
                let ms = r.count_list("protocol", "m")?.unwrap_or(vec![1]);
                let taus = r.list("protocol", "tau", Unit::Time)?.ok_or_else(|| ConfigError::Missing("protocol.tau".into()))?;
                for &m in &ms {
                    for &tau in &taus {
                        let seq = build_xy8(m, tau, &self.drive).map_err(|e| self.invalid("tau", e))?;
                        let label = if ms.len() * taus.len() > 1 {
                            format!("m{m}_tau{}ns", num_label(tau * 1e9))
                        } else {
                            String::new()
                        };
                        let mut j = job(label, Work::RfSweep { seq, signals: signals.clone() });
                        j.meta.push(("m".into(), m.to_string()));
                        j.meta.push(("tau".into(), format!("{tau:e}")));
                        j.meta.push(("b_rf".into(), format!("{:e}", signals[0].b_rf)));
                        j.tau = Some(tau);
                        plan.jobs.push(j);
                    }
                }
            }
            "spinlock" => self.build_spinlock(plan)?,
            "dressed-rabi" => {
                let g = self.grid(Unit::Time, false)?;
                let lock = r.checked("protocol", "lock_rabi", Unit::Frequency, None, |v| v > 0.0, "must be > 0")?;
                let rf = self.rf(None)?;
                let phases = r.list("protocol", "rf_phase", Unit::Angle)?;
                for &phase in phases.as_deref().unwrap_or(&[rf.phase]) {
                    let rf = RfSignal::new(rf.b_rf, rf.nu_rf, phase).map_err(|e| self.invalid("rf_phase", e))?;
                    let seqs = g
                        .values
                        .iter()
                        .map(|&t| build_spinlock(t, lock / self.drive.rabi, &self.drive, SpinlockVariant::DressedRabi))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| self.invalid("lock_rabi", e))?;
                    let label = if phases.is_some() { format!("phase{}deg", num_label(phase * 180.0 / PI)) } else { String::new() };
                    let mut j = job(label, Work::DressedRabi { seqs, rf });
                    j.meta.push(("lock_rabi".into(), format!("{lock:e}")));
                    j.meta.push(("rf_phase".into(), format!("{phase:e}")));
                    j.meta.push(("value".into(), "sigma_z".into()));
                    plan.jobs.push(j);
                }
                plan.log_x = g.log;
            }
            "casr" => {
                if r.ini.has_section("sweep") {
                    return Err(ConfigError::Invalid("casr runs have no [sweep]; the length is `protocol.t_m`".into()));
                }
                if r.entry("sim", "dt").is_some() {
                    return Err(r.error_at("sim", "dt", "casr derives dt from `protocol.steps_per_period`"));
                }
                let positive = |v: f64| v > 0.0;
                let nu_dd = r.checked("protocol", "nu_dd", Unit::Frequency, None, positive, "must be > 0")?;
                let delta = r.quantity("protocol", "delta_nu", Unit::Frequency)?.ok_or_else(|| ConfigError::Missing("protocol.delta_nu".into()))?;
                let t_m = r.checked("protocol", "t_m", Unit::Time, None, positive, "must be > 0")?;
                let steps = match r.count("protocol", "steps_per_period")? {
                    Some(0) => return Err(self.invalid("steps_per_period", "must be >= 1")),
                    Some(s) => s as u64,
                    None => 75,
                };
                let dt = casr_dt(nu_dd, steps);
                let schedule = build_casr(nu_dd, delta, t_m, &self.drive, dt).map_err(|e| self.invalid("t_m", e))?;
                let rf = self.rf(Some(schedule.nu_rf))?;
                let spectrum_max = r.checked(
                    "protocol",
                    "spectrum_max",
                    Unit::Frequency,
                    Some((2.0 * delta.abs()).max(10.0)),
                    positive,
                    "must be > 0",
                )?;
                plan.sim.dt = dt;
                let mut j = job(String::new(), Work::Casr { schedule: Box::new(schedule), rf, spectrum_max });
                j.meta.push(("nu_dd".into(), format!("{nu_dd:e}")));
                j.meta.push(("delta_nu".into(), format!("{delta:e}")));
                plan.jobs.push(j);
            }
            "eseem" => {
                self.no_rf()?;
                let g = self.grid(Unit::Time, false)?;
                if g.log {
                    return Err(r.error_at("sweep", "scale", "the ESEEM spectrum needs a uniform (lin) grid"));
                }
                let base = EseemConfig::boron_vacancy();
                let orientation = match r.choice("protocol", "orientation", &["powder", "single"], "powder")? {
                    "single" => Orientation::Single,
                    _ => {
                        let count = |key: &str, default: usize| -> Result<usize, ConfigError> {
                            match r.count("protocol", key)? {
                                Some(0) => Err(self.invalid(key, "must be >= 1")),
                                Some(n) => Ok(n),
                                None => Ok(default),
                            }
                        };
                        Orientation::Powder { n_theta: count("n_theta", 16)?, n_phi: count("n_phi", 16)? }
                    }
                };
                let cfg = EseemConfig {
                    zfs: self.zfs,
                    field: self.zeeman.b0[2],
                    field_angles: (
                        r.quantity_or("protocol", "theta", Unit::Angle, 0.0)?,
                        r.quantity_or("protocol", "phi", Unit::Angle, 0.0)?,
                    ),
                    orientation,
                    gamma: self.zeeman.gamma,
                    tensors: base.tensors.clone(),
                    mw_freq: r.quantity_or("protocol", "mw_freq", Unit::Frequency, base.mw_freq)?,
                    excitation_bandwidth: r.quantity_or("protocol", "bandwidth", Unit::Frequency, base.excitation_bandwidth)?,
                    tau_grid: g.values,
                    t1: self.sim.t1,
                    t2: r.checked("protocol", "t2", Unit::Time, Some(base.t2), |v| v > 0.0, "must be > 0")?,
                    refocusing_pulses: match r.count("protocol", "refocusing_pulses")? {
                        Some(0) => return Err(self.invalid("refocusing_pulses", "must be >= 1")),
                        Some(n) => n,
                        None => 1,
                    },
                };
                cfg.validate().map_err(|e| ConfigError::Invalid(format!("eseem: {e}")))?;
                plan.jobs.push(job(String::new(), Work::Eseem(Box::new(cfg))));
            }
            other => unreachable!("protocol `{other}` is registered but not planned"),
        }
        Ok(())
    }

    fn build_spinlock(&self, plan: &mut Plan) -> Result<(), ConfigError> {
        let r = &self.r;
        let variant = r.choice("protocol", "variant", &["t1rho", "sensing", "amp-sweep"], "t1rho")?;
        let rabi = self.drive.rabi;
        let fraction = |lock: f64| -> Result<f64, ConfigError> {
            if lock > 0.0 && lock <= rabi {
                Ok(lock / rabi)
            } else {
                Err(self.invalid("lock_rabi", format!("lock Rabi frequency {lock:e} Hz must be in (0, system.rabi]")))
            }
        };
        let locks = || -> Result<Vec<f64>, ConfigError> {
            r.list("protocol", "lock_rabi", Unit::Frequency)?.ok_or_else(|| ConfigError::Missing("protocol.lock_rabi".into()))
        };
        let mk = |label: String, work: Work, meta: Vec<(String, String)>| Job {
            label,
            work,
            meta,
            axis: None,
            tau: None,
            pulses: None,
        };
        match variant {
            "t1rho" => {
                self.no_rf()?;
                if r.entry("protocol", "t_sl").is_some() {
                    return Err(self.invalid("t_sl", "the t1rho variant sweeps t_sl in [sweep]"));
                }
                let g = self.grid(Unit::Time, false)?;
                let locks = locks()?;
                for &lock in &locks {
                    let f = fraction(lock)?;
                    let seqs = g
                        .values
                        .iter()
                        .map(|&t| build_spinlock(t, f, &self.drive, SpinlockVariant::T1rho))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| self.invalid("lock_rabi", e))?;
                    let label = if locks.len() > 1 { format!("lock{}MHz", num_label(lock * 1e-6)) } else { String::new() };
                    plan.jobs.push(mk(label, Work::Sweep { seqs, rf: None }, vec![("lock_rabi".into(), format!("{lock:e}"))]));
                }
                plan.log_x = g.log;
            }
            "sensing" => {
                let g = self.grid(Unit::Frequency, false)?;
                let signals = self.rf_signals(&g)?;
                let locks = locks()?;
                let t_sls = r.list("protocol", "t_sl", Unit::Time)?.ok_or_else(|| ConfigError::Missing("protocol.t_sl".into()))?;
                for &lock in &locks {
                    for &t_sl in &t_sls {
                        let seq = build_spinlock(t_sl, fraction(lock)?, &self.drive, SpinlockVariant::Sensing)
                            .map_err(|e| self.invalid("t_sl", e))?;
                        let mut parts = Vec::new();
                        if locks.len() > 1 {
                            parts.push(format!("lock{}MHz", num_label(lock * 1e-6)));
                        }
                        if t_sls.len() > 1 {
                            parts.push(format!("tsl{}ns", num_label(t_sl * 1e9)));
                        }
                        let meta = vec![
                            ("lock_rabi".into(), format!("{lock:e}")),
                            ("t_sl".into(), format!("{t_sl:e}")),
                            ("b_rf".into(), format!("{:e}", signals[0].b_rf)),
                        ];
                        plan.jobs.push(mk(parts.join("_"), Work::RfSweep { seq, signals: signals.clone() }, meta));
                    }
                }
            }
            _ => {
                let g = self.grid(Unit::Frequency, false)?;
                let t_sl = r.checked("protocol", "t_sl", Unit::Time, None, |v| v > 0.0, "must be > 0")?;
                if r.entry("protocol", "lock_rabi").is_some() {
                    return Err(self.invalid("lock_rabi", "the amp-sweep variant sweeps the lock Rabi frequency in [sweep]"));
                }
                let rf = self.rf(None)?;
                let seqs = g
                    .values
                    .iter()
                    .map(|&lock| build_spinlock(t_sl, fraction(lock)?, &self.drive, SpinlockVariant::AmpSweep).map_err(|e| self.invalid("t_sl", e)))
                    .collect::<Result<Vec<_>, _>>()?;
                let meta = vec![("t_sl".into(), format!("{t_sl:e}")), ("nu_rf".into(), format!("{:e}", rf.nu_rf))];
                let mut j = mk(String::new(), Work::Sweep { seqs, rf: Some(rf) }, meta);
                j.axis = Some(("lock_rabi".into(), "Hz".into(), g.values.clone()));
                plan.jobs.push(j);
                plan.log_x = g.log;
            }
        }
        Ok(())
    }

    /// `|0⟩ ↔ |−1⟩` line: the lower of the two transitions above D/2.
    fn lower_transition(&self) -> Result<f64, ConfigError> {
        let h = triplet_hamiltonian(&self.zfs, &self.zeeman).map_err(|e| self.r.error_at("system", "b0", e.to_string()))?;
        let f = transition_frequencies(&h).map_err(|e| self.r.error_at("system", "b0", e.to_string()))?;
        f.into_iter()
            .filter(|&v| v > 0.5 * self.zfs.d)
            .reduce(f64::min)
            .ok_or_else(|| ConfigError::Invalid("no |0> <-> |-1> transition found".into()))
    }
}

/// One output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub file: String,
    pub contents: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub artifacts: Vec<Artifact>,
    /// One line per result, deterministic.
    pub summary: Vec<String>,
    /// Fit or analysis failures; the run still writes its data.
    pub failures: Vec<String>,
}

struct Curve {
    stem: String,
    result: SweepResult,
    /// Fitted curve on the data axis, including the subtracted baseline.
    overlay: Option<Vec<(f64, f64)>>,
}

/// Runs every job of `plan`.
pub fn execute(plan: &Plan) -> Result<RunOutput, String> {
    let mut out = RunOutput::default();
    let mut curves = Vec::new();
    let mut t2_points: Vec<(usize, f64, f64)> = Vec::new();
    for job in &plan.jobs {
        let stem = plan.file_stem(job);
        let mut result = match &job.work {
            Work::Sweep { seqs, rf } => {
                run_experiment(seqs, rf.as_ref(), &plan.noise, &plan.sim, &plan.readout).map_err(|e| e.to_string())?
            }
            Work::RfSweep { seq, signals } => {
                run_rf_sweep(seq, signals, &plan.noise, &plan.sim, &plan.readout).map_err(|e| e.to_string())?
            }
            Work::DressedRabi { seqs, rf } => run_dressed_rabi(seqs, rf, &plan.sim).map_err(|e| e.to_string())?,
            Work::Casr { schedule, rf, spectrum_max } => {
                casr_outputs(plan, job, &stem, schedule, rf, *spectrum_max, &mut out)?;
                continue;
            }
            Work::Eseem(cfg) => {
                eseem_outputs(plan, job, &stem, cfg, &mut out)?;
                continue;
            }
        };
        if let Some((name, unit, values)) = &job.axis {
            result.axis_name = name.clone();
            result.axis_unit = unit.clone();
            result.axis = values.clone();
        }
        if result.axis_unit.is_empty() {
            result.axis_unit = axis_unit(&result.axis_name).to_string();
        }
        stamp(plan, job, &mut result);
        let mut overlay = None;
        if let Some(fp) = &plan.fit {
            match fit_curve(plan, fp, job, &mut result) {
                Ok((fit, o)) => {
                    out.summary.push(format!("{stem}: {}", describe_fit(&fit)));
                    if !fit.converged {
                        out.failures.push(format!("{stem}: fit did not converge"));
                    }
                    if let (Some(n), Some(t2)) = (job.pulses, fit.value("t2")) {
                        if fit.converged {
                            t2_points.push((n, t2, fit.stderr("t2").unwrap_or(0.0)));
                        }
                    }
                    overlay = Some(o);
                }
                Err(e) => {
                    result.set_meta("fit.error", &e);
                    out.failures.push(format!("{stem}: fit failed: {e}"));
                }
            }
        } else {
            out.summary.push(format!("{stem}: {} points", result.len()));
        }
        curves.push(Curve { stem, result, overlay });
    }
    for c in &curves {
        out.artifacts.push(Artifact { file: format!("{}.csv", c.stem), contents: c.result.to_csv() });
        if plan.svg {
            let mut series = vec![Series::markers("data", &c.result.axis, &c.result.contrast)];
            if let Some(o) = &c.overlay {
                let (x, y): (Vec<f64>, Vec<f64>) = o.iter().copied().unzip();
                series.push(Series::line("fit", &x, &y));
            }
            let x_axis = Axis::new(&axis_title(&c.result), plan.log_x);
            let y_axis = Axis::new(plan.jobs[0].meta_value("value").unwrap_or("contrast"), false);
            out.artifacts.push(Artifact { file: format!("{}.svg", c.stem), contents: line_plot(&c.stem, &x_axis, &y_axis, &series) });
        }
    }
    if plan.fit.as_ref().is_some_and(|f| f.power_law) {
        power_law_outputs(plan, &t2_points, &mut out);
    }
    Ok(out)
}

impl Job {
    fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn axis_unit(name: &str) -> &'static str {
    match name {
        "tp" | "tau" | "t_sl" | "t_s" => "s",
        "f" | "nu_rf" | "lock_rabi" => "Hz",
        _ => "",
    }
}

fn axis_title(r: &SweepResult) -> String {
    if r.axis_unit.is_empty() {
        r.axis_name.clone()
    } else {
        format!("{} ({})", r.axis_name, r.axis_unit)
    }
}

fn stamp(plan: &Plan, job: &Job, r: &mut SweepResult) {
    r.set_meta("name", &plan.name);
    if !job.label.is_empty() {
        r.set_meta("label", &job.label);
    }
    r.set_meta("config_sha256", &plan.config_hash);
    for (k, v) in &job.meta {
        r.set_meta(k, v);
    }
}

fn describe_fit(f: &FitResult) -> String {
    let mut parts: Vec<String> = f.params.iter().filter(|p| !p.fixed).map(|p| format!("{}={:.6e}", p.name, p.value)).collect();
    parts.push(format!("R2={:.4}", f.r_squared));
    if !f.converged {
        parts.push("NOT CONVERGED".into());
    }
    parts.join(" ")
}

/// Fits `r` according to `fp`, writes the fit block into its metadata and
/// returns the fit and its overlay on a dense grid.
fn fit_curve(plan: &Plan, fp: &FitPlan, job: &Job, r: &mut SweepResult) -> Result<(FitResult, Vec<(f64, f64)>), String> {
    let x = r.axis.clone();
    let (lo, hi) = (x[0], x[x.len() - 1]);
    let baseline: Box<dyn Fn(f64) -> f64> = match fp.baseline {
        BaselineKind::None => Box::new(|_| 0.0),
        BaselineKind::Edges => {
            let w = fp.baseline_width * (hi - lo);
            let b = baseline_subtract(&x, &r.contrast, &[(lo, lo + w), (hi - w, hi)]).map_err(|e| e.to_string())?;
            for (k, w) in b.warnings.iter().enumerate() {
                r.set_meta(&format!("baseline.warning.{k}"), w);
            }
            r.set_meta("baseline.slope", format!("{:e}", b.slope));
            r.set_meta("baseline.intercept", format!("{:e}", b.intercept));
            Box::new(move |x| b.intercept + b.slope * x)
        }
        BaselineKind::NoRf => {
            let Work::RfSweep { seq, .. } = &job.work else {
                return Err("`no-rf` baseline needs an RF sweep".into());
            };
            let off = run_experiment(std::slice::from_ref(seq), None, &plan.noise, &plan.sim, &plan.readout)
                .map_err(|e| e.to_string())?
                .contrast[0];
            r.set_meta("baseline.no_rf", format!("{off:e}"));
            Box::new(move |_| off)
        }
    };
    let y: Vec<f64> = x.iter().zip(&r.contrast).map(|(&x, &y)| y - baseline(x)).collect();
    for (k, v) in fp.options_meta(job.tau) {
        r.set_meta(&k, v);
    }
    let model = fp.model(job.tau)?;
    let fit = fp.run(model.as_deref(), &x, &y)?;
    for (k, v) in fit.to_kv() {
        r.set_meta(&k, v);
    }
    let dense: Vec<f64> = (0..400)
        .map(|k| {
            let u = k as f64 / 399.0;
            if plan.log_x && lo > 0.0 {
                lo * (hi / lo).powf(u)
            } else {
                lo + (hi - lo) * u
            }
        })
        .collect();
    let fitted = match &model {
        Some(m) => evaluate(m.as_ref(), &fit.values(), &dense),
        None => {
            let (a, s) = (fit.value("a").unwrap_or(f64::NAN), fit.value("s").unwrap_or(f64::NAN));
            dense.iter().map(|x| a * x.powf(s)).collect()
        }
    };
    let overlay = dense.iter().zip(fitted).map(|(&x, y)| (x, y + baseline(x))).collect();
    Ok((fit, overlay))
}

fn power_law_outputs(plan: &Plan, points: &[(usize, f64, f64)], out: &mut RunOutput) {
    let stem = format!("{}_t2", plan.name);
    let mut r = SweepResult::new("pulses", "");
    for &(n, t2, e) in points {
        r.push(n as f64, t2, e);
    }
    r.set_meta("protocol", plan.protocol);
    r.set_meta("name", &plan.name);
    r.set_meta("config_sha256", &plan.config_hash);
    r.set_meta("value", "t2");
    let ns: Vec<f64> = r.axis.clone();
    match fit_power_law(&ns, &r.contrast) {
        Ok(f) => {
            out.summary.push(format!("{stem}: {}", describe_fit(&f)));
            for (k, v) in f.to_kv() {
                r.set_meta(&k, v);
            }
            if plan.svg {
                let (a, s) = (f.value("a").unwrap_or(0.0), f.value("s").unwrap_or(0.0));
                let (lo, hi) = (ns[0], ns[ns.len() - 1]);
                let x: Vec<f64> = (0..200).map(|k| lo * (hi / lo).powf(k as f64 / 199.0)).collect();
                let y: Vec<f64> = x.iter().map(|x| a * x.powf(s)).collect();
                let series = [Series::markers("T2", &r.axis, &r.contrast), Series::line("a N^s", &x, &y)];
                out.artifacts.push(Artifact {
                    file: format!("{stem}.svg"),
                    contents: line_plot(&stem, &Axis::new("pulses N", true), &Axis::new("T2 (s)", true), &series),
                });
            }
        }
        Err(e) => {
            r.set_meta("fit.error", e.to_string());
            out.failures.push(format!("{stem}: power-law fit failed: {e}"));
        }
    }
    out.artifacts.insert(0, Artifact { file: format!("{stem}.csv"), contents: r.to_csv() });
}

fn casr_outputs(
    plan: &Plan,
    job: &Job,
    stem: &str,
    schedule: &CasrSchedule,
    rf: &RfSignal,
    spectrum_max: f64,
    out: &mut RunOutput,
) -> Result<(), String> {
    let points = run_casr(schedule, rf, &plan.noise, &plan.sim, &plan.readout).map_err(|e| e.to_string())?;
    let mut trace = SweepResult::new("time", "s");
    for p in &points {
        trace.push(p.time, p.contrast, 0.0);
    }
    trace.set_meta("protocol", "casr");
    trace.set_meta("readout", plan.readout.mode.name());
    trace.set_meta("seed", plan.sim.seed);
    trace.set_meta("block_period", format!("{:e}", schedule.block_period()));
    trace.set_meta("dt", format!("{:e}", schedule.dt));
    trace.set_meta("nu_rf", format!("{:e}", schedule.nu_rf));
    stamp(plan, job, &mut trace);
    let values: Vec<f64> = trace.contrast.clone();
    let mut spectrum = SweepResult::new("frequency", "Hz");
    spectrum.set_meta("protocol", "casr");
    stamp(plan, job, &mut spectrum);
    spectrum.set_meta("value", "magnitude");
    match fft_peak(&values, schedule.block_period(), Window::None) {
        Ok(peak) => {
            for (&f, &m) in peak.spectrum.frequency.iter().zip(&peak.spectrum.magnitude) {
                if f <= spectrum_max {
                    spectrum.push(f, m, 0.0);
                }
            }
            spectrum.set_meta("peak.frequency", format!("{:e}", peak.frequency));
            spectrum.set_meta("peak.fwhm", format!("{:e}", peak.fwhm));
            let half = 3.0 * peak.fwhm;
            peak_fit_meta(&mut spectrum, peak.frequency - half, peak.frequency + half, peak.fwhm / 2.0, &peak.fit);
            out.summary.push(format!(
                "{stem}: {} readouts, peak {:.4} Hz, FWHM {:.4} Hz",
                points.len(),
                peak.frequency,
                peak.fwhm
            ));
        }
        Err(e) => out.failures.push(format!("{stem}: no spectral peak: {e}")),
    }
    push_pair(plan, stem, trace, spectrum, out);
    Ok(())
}

fn eseem_outputs(plan: &Plan, job: &Job, stem: &str, cfg: &EseemConfig, out: &mut RunOutput) -> Result<(), String> {
    let mut echo = simulate_two_pulse_eseem(cfg).map_err(|e| e.to_string())?;
    stamp(plan, job, &mut echo);
    echo.set_meta("value", "echo");
    let mut spectrum = SweepResult::new("frequency", "Hz");
    spectrum.set_meta("protocol", "eseem");
    stamp(plan, job, &mut spectrum);
    spectrum.set_meta("value", "magnitude");
    match eseem_spectrum(&echo.axis, &echo.contrast) {
        Ok(s) => {
            for (&f, &m) in s.frequency.iter().zip(&s.magnitude) {
                spectrum.push(f, m, 0.0);
            }
            match s.peak {
                Some(p) => {
                    spectrum.set_meta("peak.frequency", format!("{p:e}"));
                    let (lo, hi) = (p - ESEEM_PEAK_WINDOW, p + ESEEM_PEAK_WINDOW);
                    match lorentzian_peak(&spectrum, lo, hi, p) {
                        Ok(f) => peak_fit_meta(&mut spectrum, lo, hi, ESEEM_PEAK_WINDOW / 4.0, &f),
                        Err(e) => out.failures.push(format!("{stem}: peak fit failed: {e}")),
                    }
                    out.summary.push(format!("{stem}: dominant modulation {:.3} MHz", p * 1e-6));
                }
                None => out.failures.push(format!("{stem}: no modulation peak")),
            }
        }
        Err(e) => out.failures.push(format!("{stem}: spectrum failed: {e}")),
    }
    push_pair(plan, stem, echo, spectrum, out);
    Ok(())
}

/// Half width of the window fitted around the ESEEM modulation peak, Hz.
const ESEEM_PEAK_WINDOW: f64 = 6e6;

/// Single Lorentzian with a free width over `[lo, hi]` of a spectrum.
fn lorentzian_peak(spectrum: &SweepResult, lo: f64, hi: f64, center: f64) -> Result<FitResult, String> {
    let (x, y): (Vec<f64>, Vec<f64>) =
        spectrum.axis.iter().zip(&spectrum.contrast).filter(|(&f, _)| f >= lo && f <= hi).map(|(&f, &m)| (f, m)).unzip();
    let lw = (hi - lo) / 8.0;
    let mut construct = BTreeMap::new();
    construct.insert("lw".to_string(), lw);
    let model = model_by_id("lorentzian-sum", 1, &construct).map_err(|e| e.to_string())?.ok_or("no model")?;
    let spec = ModelSpec::new("lorentzian-sum").release("lw").start("f1", center).start("lw", lw);
    fit(model.as_ref(), &x, &y, &spec).map_err(|e| e.to_string())
}

/// Records a spectral peak fit together with the options that repeat it.
fn peak_fit_meta(spectrum: &mut SweepResult, lo: f64, hi: f64, lw: f64, f: &FitResult) {
    spectrum.set_meta("fit.opt.lines", "1");
    spectrum.set_meta("fit.opt.lw", format!("{lw:e}"));
    spectrum.set_meta("fit.opt.release", "lw");
    spectrum.set_meta("fit.opt.range", format!("{lo:e},{hi:e}"));
    for (k, v) in f.to_kv() {
        spectrum.set_meta(&k, v);
    }
}

fn push_pair(plan: &Plan, stem: &str, trace: SweepResult, spectrum: SweepResult, out: &mut RunOutput) {
    for (suffix, r) in [("", &trace), ("_spectrum", &spectrum)] {
        let file = format!("{stem}{suffix}");
        out.artifacts.push(Artifact { file: format!("{file}.csv"), contents: r.to_csv() });
        if plan.svg && !r.is_empty() {
            let y = r.meta_value("value").unwrap_or("contrast").to_string();
            let series = [Series::line("data", &r.axis, &r.contrast)];
            out.artifacts.push(Artifact {
                file: format!("{file}.svg"),
                contents: line_plot(&file, &Axis::new(&axis_title(r), false), &Axis::new(&y, false), &series),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(body: &str) -> String {
        format!("[experiment]\nprotocol = t1\n[sweep]\nstart = 0\nstop = 20 us\nn = 5\n{body}")
    }

    #[test]
    fn every_protocol_has_a_planner() {
        for p in PROTOCOLS {
            let text = format!("[experiment]\nprotocol = {}\n", p.id);
            // Missing keys are fine here; an unplanned protocol would panic.
            let _ = Plan::parse(&text, &[]);
        }
    }

    #[test]
    fn t1_plan_defaults() {
        let p = Plan::parse(&cfg(""), &[]).unwrap();
        assert_eq!(p.jobs.len(), 1);
        assert_eq!(p.readout.mode, ReadoutMode::PiRef);
        assert_eq!(p.points(), 5);
        assert_eq!(p.config_hash.len(), 64);
    }

    #[test]
    fn output_section_does_not_change_hash() {
        let a = Plan::parse(&cfg(""), &[]).unwrap();
        let b = Plan::parse(&cfg("[output]\ndir = elsewhere\n"), &[]).unwrap();
        let c = Plan::parse(&cfg(""), &["sim.seed=9".into()]).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
    }

    #[test]
    fn protocol_keys_are_scoped() {
        let e = Plan::parse(&cfg("[protocol]\npulses = 4\n"), &[]).unwrap_err();
        match e {
            ConfigError::Value { line, key, .. } => {
                assert_eq!(line, 8);
                assert_eq!(key, "protocol.pulses");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_sweep_rejected() {
        let e = Plan::parse(&cfg("").replace("n = 5", "n = 0"), &[]).unwrap_err();
        assert!(e.to_string().contains("sweep.n"), "{e}");
    }

    #[test]
    fn coarse_dt_caught_at_planning() {
        let text = "[experiment]\nprotocol = rabi\n[sweep]\nstart = 0\nstop = 100 ns\nn = 3\n[sim]\ndt = 1 ns\n";
        assert!(Plan::parse(text, &[]).unwrap_err().to_string().contains("too coarse"));
    }

    #[test]
    fn odmr_centre_is_lower_transition() {
        let text = "[experiment]\nprotocol = odmr\n[system]\nb0 = 0\ne = 0\n[sweep]\nstart = 3.3 GHz\nstop = 3.6 GHz\nn = 3\n";
        let p = Plan::parse(text, &[]).unwrap();
        let c: f64 = p.jobs[0].meta_value("center").unwrap().parse().unwrap();
        assert!((c - 3.47e9).abs() < 1.0);
    }

    #[test]
    fn labels_are_file_safe() {
        assert_eq!(num_label(13.0), "13");
        assert_eq!(num_label(2.5), "2p5");
    }
}
