//! Monte-Carlo propagation of the two-level sensing transition through
//! pulse sequences.
//!
//! Each trajectory carries a spinor `|ψ⟩` and a polarisation factor `p`;
//! the ensemble state at readout is `ρ = p |ψ⟩⟨ψ| + (1 − p) I/2`. Both
//! longitudinal relaxation (towards `I/2`) and the dressed-state envelope
//! during spin locking act only on `p`, since depolarisation commutes with
//! every unitary.
//!
//! * MW elements are cut into slices no longer than `dt`; within a slice the
//!   generator is frozen at the slice midpoint and exponentiated in closed
//!   form. Elements with a constant generator take a single step.
//! * Delays are exact: the phase from the static detuning, the RF term
//!   (integrated analytically) and the OU noise (its exact time integral) is
//!   accumulated in one diagonal step.
//! * With `ideal_pulses` every MW element becomes an instantaneous rotation
//!   at its centre, with free evolution for the rest of its duration.
//!
//! Random numbers come from ChaCha streams keyed by the trajectory index,
//! so every sweep point sees the same noise realisations and results do not
//! depend on the number of threads.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::constants::GAMMA_ELECTRON;
use crate::noise::{trajectory_rng, EnsembleModel, NoiseError, OuParams, OuProcess};
use crate::sequence::{CasrSchedule, PulseElement, RfSignal, Sequence, SequenceError};
use crate::spin::{DensityMatrix, Operator};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("dt = {dt:.3e} s is too coarse; at most {required:.3e} s is needed")]
    DtTooCoarse { dt: f64, required: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid readout model: {0}")]
    InvalidReadout(String),
    #[error("sequence has no signal shot")]
    NoSignalShot,
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("CSV: {0}")]
    Csv(String),
}

/// Bi-exponential decay `amp_a e^{−t/t_a} + amp_b e^{−t/t_b}` of the locked
/// magnetisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DressedRelaxation {
    pub amp_a: f64,
    pub t_a: f64,
    pub amp_b: f64,
    pub t_b: f64,
}

impl DressedRelaxation {
    pub const BORON_VACANCY: DressedRelaxation = DressedRelaxation {
        amp_a: 0.95,
        t_a: 1.6e-7,
        amp_b: 0.05,
        t_b: 1.5e-6,
    };

    pub fn envelope(&self, t: f64) -> f64 {
        self.amp_a * (-t / self.t_a).exp() + self.amp_b * (-t / self.t_b).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Largest integration step, s.
    pub dt: f64,
    pub n_traj: usize,
    pub seed: u64,
    /// Longitudinal relaxation time, s (`f64::INFINITY` disables it).
    pub t1: f64,
    pub dressed_relaxation: Option<DressedRelaxation>,
    /// Treat MW pulses as instantaneous rotations.
    pub ideal_pulses: bool,
    /// Draw the RF phase per trajectory (stratified over `[0, 2π)`).
    pub randomize_rf_phase: bool,
    /// Electron gyromagnetic ratio, Hz/T.
    pub gamma: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.1e-9,
            n_traj: 200,
            seed: 1,
            t1: 5.84e-6,
            dressed_relaxation: None,
            ideal_pulses: false,
            randomize_rf_phase: false,
            gamma: GAMMA_ELECTRON,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        if self.n_traj == 0 {
            return bad("n_traj must be >= 1");
        }
        if !(self.t1 > 0.0) {
            return bad("t1 must be > 0");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be > 0");
        }
        if let Some(d) = self.dressed_relaxation {
            if !(d.t_a > 0.0 && d.t_b > 0.0 && d.amp_a >= 0.0 && d.amp_b >= 0.0) {
                return bad("dressed relaxation needs positive times and amplitudes");
            }
        }
        Ok(())
    }

    /// Refuses a step that does not resolve the fastest frequency:
    /// `dt ≤ 1/(20 max(Ω, ν_RF))`.
    pub fn check_resolution(&self, max_rabi: f64, rf: Option<&RfSignal>) -> Result<(), EngineError> {
        let rabi = if self.ideal_pulses { 0.0 } else { max_rabi };
        let fastest = rabi.max(rf.map(|r| r.nu_rf).unwrap_or(0.0));
        if fastest > 0.0 {
            let required = 1.0 / (20.0 * fastest);
            if self.dt > required * (1.0 + 1e-12) {
                return Err(EngineError::DtTooCoarse { dt: self.dt, required });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// `1 − c0 (P0_ref − P0_sig)`; the reference is the MW-off shot.
    MwOnOff,
    /// `c0 (P0_ref − P0_sig)`; the reference ends with a 3π/2 pulse.
    Pi2ThreePi2,
    /// `c0 (P0_sig − P0_ref)`; the reference is π-prepared.
    PiRef,
}

impl ReadoutMode {
    pub fn name(self) -> &'static str {
        match self {
            ReadoutMode::MwOnOff => "mw_on_off",
            ReadoutMode::Pi2ThreePi2 => "pi2_3pi2",
            ReadoutMode::PiRef => "pi_ref",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mw_on_off" => Some(ReadoutMode::MwOnOff),
            "pi2_3pi2" => Some(ReadoutMode::Pi2ThreePi2),
            "pi_ref" => Some(ReadoutMode::PiRef),
            _ => None,
        }
    }
}

/// Maps `|0⟩` populations of the signal and reference shots to contrast.
/// The `|0⟩` state is the bright one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutModel {
    pub contrast0: f64,
    pub mode: ReadoutMode,
    /// Mean detected photons per readout; enables Poisson shot noise.
    pub photons: Option<f64>,
}

impl ReadoutModel {
    pub fn new(contrast0: f64, mode: ReadoutMode) -> Result<Self, EngineError> {
        let r = ReadoutModel {
            contrast0,
            mode,
            photons: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.contrast0 > 0.0 && self.contrast0 <= 1.0) {
            return Err(EngineError::InvalidReadout(format!("contrast0 = {}", self.contrast0)));
        }
        if let Some(n) = self.photons {
            if !(n > 0.0 && n.is_finite()) {
                return Err(EngineError::InvalidReadout(format!("photons = {n}")));
            }
        }
        Ok(())
    }

    /// Relative fluorescence of a shot with `|0⟩` population `p0`.
    pub fn brightness(&self, p0: f64) -> f64 {
        1.0 - self.contrast0 * (1.0 - p0)
    }

    /// Contrast from the signal population and the optional reference
    /// population. Without a reference shot the MW-off mode assumes a bright
    /// reference (`P0 = 1`) and the other modes a fully mixed one (`P0 = ½`).
    pub fn value(&self, p0_sig: f64, p0_ref: Option<f64>) -> f64 {
        let c = self.contrast0;
        match self.mode {
            ReadoutMode::MwOnOff => 1.0 - c * (p0_ref.unwrap_or(1.0) - p0_sig),
            ReadoutMode::Pi2ThreePi2 => c * (p0_ref.unwrap_or(0.5) - p0_sig),
            ReadoutMode::PiRef => c * (p0_sig - p0_ref.unwrap_or(0.5)),
        }
    }
}

impl Default for ReadoutModel {
    fn default() -> Self {
        ReadoutModel {
            contrast0: 0.065,
            mode: ReadoutMode::MwOnOff,
            photons: None,
        }
    }
}

/// Bath plus static inhomogeneity.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub ou: Option<OuParams>,
    pub ensemble: EnsembleModel,
}

impl NoiseModel {
    pub fn quiet() -> Self {
        NoiseModel {
            ou: None,
            ensemble: EnsembleModel::homogeneous(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if let Some(ou) = &self.ou {
            ou.validate()?;
        }
        self.ensemble.validate()?;
        Ok(())
    }
}

/// Everything random about one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    /// Static detuning, Hz.
    pub detuning: f64,
    pub rabi_scale: f64,
    /// Added to the RF phase.
    pub rf_phase: f64,
    pub ou: Option<OuParams>,
    /// `(seed, stream)` of the OU noise.
    pub stream: (u64, u64),
}

impl NoiseDraw {
    pub fn quiet() -> Self {
        NoiseDraw {
            detuning: 0.0,
            rabi_scale: 1.0,
            rf_phase: 0.0,
            ou: None,
            stream: (0, 0),
        }
    }

    pub fn with_detuning(detuning: f64) -> Self {
        NoiseDraw {
            detuning,
            ..NoiseDraw::quiet()
        }
    }

    /// Draw `index` of a run: static offsets from stream `index`, OU noise
    /// from a disjoint stream.
    pub fn for_trajectory(noise: &NoiseModel, cfg: &SimConfig, index: u64) -> Self {
        let mut rng = trajectory_rng(cfg.seed, index);
        let (detuning, rabi_scale) = noise.ensemble.sample(&mut rng);
        let rf_phase = if cfg.randomize_rf_phase {
            let u: f64 = rng.random();
            TAU * ((index % cfg.n_traj as u64) as f64 + u) / cfg.n_traj as f64
        } else {
            0.0
        };
        NoiseDraw {
            detuning,
            rabi_scale,
            rf_phase,
            ou: noise.ou,
            stream: (cfg.seed, index | 1 << 63),
        }
    }
}

type Spinor = [C64; 2];

/// `exp(−i (h·σ) t)` applied to `psi`.
fn su2_apply(h: [f64; 3], t: f64, psi: &mut Spinor) {
    let norm = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
    if norm * t == 0.0 {
        return;
    }
    let (s, c) = (norm * t).sin_cos();
    let k = s / norm;
    let (nx, ny, nz) = (k * h[0], k * h[1], k * h[2]);
    let u00 = C64::new(c, -nz);
    let u01 = C64::new(-ny, -nx);
    let u10 = C64::new(ny, -nx);
    let u11 = C64::new(c, nz);
    let (a, b) = (psi[0], psi[1]);
    psi[0] = u00 * a + u01 * b;
    psi[1] = u10 * a + u11 * b;
}

/// Diagonal phase `exp(−i φ σz)`.
fn phase_apply(phi: f64, psi: &mut Spinor) {
    let e = C64::from_polar(1.0, -phi);
    psi[0] *= e;
    psi[1] *= e.conj();
}

/// `∫_{t0}^{t1} cos(2π ν t + φ) dt`.
fn cos_integral(nu: f64, phase: f64, t0: f64, t1: f64) -> f64 {
    let w = TAU * nu;
    ((w * t1 + phase).sin() - (w * t0 + phase).sin()) / w
}

struct Propagator<'a> {
    rf: Option<RfSignal>,
    draw: &'a NoiseDraw,
    cfg: &'a SimConfig,
    ou: Option<(OuProcess, ChaCha8Rng)>,
    psi: Spinor,
    p: f64,
    t: f64,
}

impl<'a> Propagator<'a> {
    fn new(rf: Option<&RfSignal>, draw: &'a NoiseDraw, cfg: &'a SimConfig) -> Self {
        let rf = rf.map(|r| RfSignal {
            phase: r.phase + draw.rf_phase,
            ..*r
        });
        Propagator {
            rf,
            draw,
            cfg,
            ou: None,
            psi: [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            p: 1.0,
            t: 0.0,
        }
    }

    fn init(&mut self) {
        self.psi = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
        self.p = 1.0;
        self.t = 0.0;
        self.ou = self.draw.ou.filter(|o| o.b > 0.0).map(|o| {
            let mut rng = trajectory_rng(self.draw.stream.0, self.draw.stream.1);
            (OuProcess::new(o, &mut rng), rng)
        });
    }

    /// Advances the OU process by `h` and returns its integral.
    fn noise_integral(&mut self, h: f64) -> f64 {
        match &mut self.ou {
            Some((proc, rng)) => proc.advance_with_integral(h, rng).1,
            None => 0.0,
        }
    }

    fn rf_integral(&self, t0: f64, t1: f64) -> f64 {
        self.rf
            .map(|r| self.cfg.gamma * r.b_rf * cos_integral(r.nu_rf, r.phase, t0, t1))
            .unwrap_or(0.0)
    }

    fn relax(&mut self, duration: f64) {
        if self.cfg.t1.is_finite() {
            self.p *= (-duration / self.cfg.t1).exp();
        }
    }

    fn delay(&mut self, d: f64) {
        if d <= 0.0 {
            return;
        }
        let t0 = self.t;
        let phi = PI * (self.draw.detuning * d + self.noise_integral(d) + self.rf_integral(t0, t0 + d));
        phase_apply(phi, &mut self.psi);
        self.t += d;
        self.relax(d);
    }

    fn mw(&mut self, d: f64, rabi: f64, phase: f64, detuning: f64) {
        let rabi = rabi * self.draw.rabi_scale;
        if self.cfg.ideal_pulses {
            // instantaneous rotation at the pulse centre, free evolution around it
            self.delay(0.5 * d);
            su2_apply([phase.cos(), phase.sin(), 0.0], PI * rabi * d, &mut self.psi);
            self.delay(0.5 * d);
            return;
        }
        if d <= 0.0 {
            return;
        }
        let hx = PI * rabi * phase.cos();
        let hy = PI * rabi * phase.sin();
        let static_z = detuning + self.draw.detuning;
        if self.rf.is_none() && self.ou.is_none() {
            su2_apply([hx, hy, PI * static_z], d, &mut self.psi);
        } else {
            let n = (d / self.cfg.dt).ceil().max(1.0) as usize;
            let h = d / n as f64;
            for k in 0..n {
                let t0 = self.t + k as f64 * h;
                let noise = self.noise_integral(h) / h;
                let rf = self
                    .rf
                    .map(|r| self.cfg.gamma * r.b_rf * (TAU * r.nu_rf * (t0 + 0.5 * h) + r.phase).cos())
                    .unwrap_or(0.0);
                su2_apply([hx, hy, PI * (static_z + noise + rf)], h, &mut self.psi);
            }
        }
        self.t += d;
        self.relax(d);
    }

    fn element(&mut self, e: &PulseElement) {
        match *e {
            PulseElement::LaserInit { .. } => self.init(),
            PulseElement::LaserReadout { .. } => {}
            PulseElement::Delay { duration } => self.delay(duration),
            PulseElement::MwPulse {
                duration,
                rabi,
                phase,
                detuning,
            } => self.mw(duration, rabi, phase, detuning),
            PulseElement::SpinLock {
                duration,
                rabi,
                phase,
                detuning,
            } => {
                self.mw(duration, rabi, phase, detuning);
                if let Some(d) = self.cfg.dressed_relaxation {
                    self.p *= d.envelope(duration);
                }
            }
        }
    }

    fn p0(&self) -> f64 {
        self.p * self.psi[0].norm_sqr() + 0.5 * (1.0 - self.p)
    }

    fn density(&self) -> DensityMatrix {
        let [a, b] = self.psi;
        let p = self.p;
        let mix = 0.5 * (1.0 - p);
        let m = [
            C64::new(p * a.norm_sqr() + mix, 0.0),
            a * b.conj() * p,
            b * a.conj() * p,
            C64::new(p * b.norm_sqr() + mix, 0.0),
        ];
        DensityMatrix::from_trusted(Operator::from_row_major(&m).expect("2x2"))
    }
}

/// Propagates one shot (`init … readout`) and returns the final two-level
/// density matrix. Time zero, the origin of the RF phase, is the end of the
/// initialising laser pulse.
pub fn propagate_shot(
    shot: &[PulseElement],
    rf: Option<&RfSignal>,
    draw: &NoiseDraw,
    cfg: &SimConfig,
) -> Result<DensityMatrix, EngineError> {
    cfg.validate()?;
    let max_rabi = shot.iter().filter_map(|e| e.drive().map(|d| d.0)).fold(0.0, f64::max) * draw.rabi_scale;
    cfg.check_resolution(max_rabi, rf)?;
    let mut prop = Propagator::new(rf, draw, cfg);
    prop.init();
    for e in shot {
        prop.element(e);
    }
    Ok(prop.density())
}

fn shot_p0(shot: &[PulseElement], rf: Option<&RfSignal>, draw: &NoiseDraw, cfg: &SimConfig) -> f64 {
    let mut prop = Propagator::new(rf, draw, cfg);
    prop.init();
    for e in shot {
        prop.element(e);
    }
    prop.p0()
}

/// Pairwise summation in a fixed order.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `(mean, standard error)` with the standard error `sd / √n`.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = pairwise_sum(x) / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A one-dimensional experiment curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis_name: String,
    pub axis_unit: String,
    pub axis: Vec<f64>,
    pub contrast: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Ordered key/value metadata written to the CSV header.
    pub meta: Vec<(String, String)>,
}

impl SweepResult {
    pub fn new(axis_name: &str, axis_unit: &str) -> Self {
        SweepResult {
            axis_name: axis_name.to_string(),
            axis_unit: axis_unit.to_string(),
            axis: Vec::new(),
            contrast: Vec::new(),
            stderr: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn push(&mut self, axis: f64, contrast: f64, stderr: f64) {
        self.axis.push(axis);
        self.contrast.push(contrast);
        self.stderr.push(stderr);
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// `# key=value` header lines, a column header and one row per point.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# axis_name={}", self.axis_name);
        let _ = writeln!(s, "# axis_unit={}", self.axis_unit);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("axis,contrast,stderr\n");
        for i in 0..self.len() {
            let _ = writeln!(s, "{:e},{:e},{:e}", self.axis[i], self.contrast[i], self.stderr[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, EngineError> {
        let mut r = SweepResult::new("", "");
        let mut header = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(m) = line.strip_prefix('#') {
                let (k, v) = m
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| EngineError::Csv(format!("line {}: bad metadata", i + 1)))?;
                match k {
                    "axis_name" => r.axis_name = v.to_string(),
                    "axis_unit" => r.axis_unit = v.to_string(),
                    _ => r.meta.push((k.to_string(), v.to_string())),
                }
                continue;
            }
            if !header {
                if line != "axis,contrast,stderr" {
                    return Err(EngineError::Csv(format!("line {}: expected column header", i + 1)));
                }
                header = true;
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match vals {
                Ok(v) if v.len() == 3 => r.push(v[0], v[1], v[2]),
                _ => return Err(EngineError::Csv(format!("line {}: expected three numbers", i + 1))),
            }
        }
        if !header {
            return Err(EngineError::Csv("missing column header".into()));
        }
        Ok(r)
    }
}

fn check_run(sequences: &[Sequence], rf: Option<&RfSignal>, noise: &NoiseModel, cfg: &SimConfig) -> Result<(), EngineError> {
    cfg.validate()?;
    noise.validate()?;
    let spread = 1.0 + 5.0 * noise.ensemble.rabi_spread;
    for s in sequences {
        s.validate()?;
        cfg.check_resolution(s.max_rabi() * spread, rf)?;
    }
    Ok(())
}

fn point_values(
    seq: &Sequence,
    rf: Option<&RfSignal>,
    noise: &NoiseModel,
    cfg: &SimConfig,
    readout: &ReadoutModel,
) -> Result<Vec<f64>, EngineError> {
    let signal = seq.signal_shot().ok_or(EngineError::NoSignalShot)?;
    let reference = seq.reference_shot();
    Ok((0..cfg.n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let draw = NoiseDraw::for_trajectory(noise, cfg, i);
            let p_sig = shot_p0(signal.elements, rf, &draw, cfg);
            let p_ref = reference.map(|r| shot_p0(r.elements, rf, &draw, cfg));
            readout.value(p_sig, p_ref)
        })
        .collect())
}

/// Runs every sequence of a sweep and averages over `n_traj` trajectories.
/// The axis is each sequence's sweep value.
pub fn run_experiment(
    sequences: &[Sequence],
    rf: Option<&RfSignal>,
    noise: &NoiseModel,
    cfg: &SimConfig,
    readout: &ReadoutModel,
) -> Result<SweepResult, EngineError> {
    readout.validate()?;
    check_run(sequences, rf, noise, cfg)?;
    let first = sequences.first().map(|s| s.meta.clone()).unwrap_or_default();
    let mut out = SweepResult::new(&first.sweep_name, "");
    out.set_meta("protocol", &first.protocol);
    out.set_meta("readout", readout.mode.name());
    out.set_meta("n_traj", cfg.n_traj);
    out.set_meta("seed", cfg.seed);
    for seq in sequences {
        let values = point_values(seq, rf, noise, cfg, readout)?;
        let (m, e) = mean_stderr(&values);
        out.push(seq.meta.sweep_value, m, e);
    }
    Ok(out)
}

/// Runs the same sequence for each RF signal in `signals` (an RF-frequency
/// sweep); the axis is the RF frequency.
pub fn run_rf_sweep(
    seq: &Sequence,
    signals: &[RfSignal],
    noise: &NoiseModel,
    cfg: &SimConfig,
    readout: &ReadoutModel,
) -> Result<SweepResult, EngineError> {
    readout.validate()?;
    let mut out = SweepResult::new("nu_rf", "Hz");
    out.set_meta("protocol", &seq.meta.protocol);
    out.set_meta("readout", readout.mode.name());
    out.set_meta("n_traj", cfg.n_traj);
    out.set_meta("seed", cfg.seed);
    for rf in signals {
        check_run(std::slice::from_ref(seq), Some(rf), noise, cfg)?;
        let values = point_values(seq, Some(rf), noise, cfg, readout)?;
        let (m, e) = mean_stderr(&values);
        out.push(rf.nu_rf, m, e);
    }
    Ok(out)
}

/// One readout of a synchronised-readout train.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CasrPoint {
    pub index: usize,
    /// Block start, s.
    pub time: f64,
    pub contrast: f64,
}

/// Runs every block of a CASR schedule. The RF phase seen by block `k` is
/// the phase at its absolute start time, so the signal evolves continuously
/// across blocks.
pub fn run_casr(
    schedule: &CasrSchedule,
    rf: &RfSignal,
    noise: &NoiseModel,
    cfg: &SimConfig,
    readout: &ReadoutModel,
) -> Result<Vec<CasrPoint>, EngineError> {
    readout.validate()?;
    check_run(std::slice::from_ref(&schedule.block), Some(rf), noise, cfg)?;
    let shot = schedule.block.signal_shot().ok_or(EngineError::NoSignalShot)?;
    let n_traj = cfg.n_traj as u64;
    let points = (0..schedule.n_blocks)
        .into_par_iter()
        .map(|k| {
            let start = schedule.block_start(k);
            let local = rf.shifted(start + schedule.mw_offset);
            let values: Vec<f64> = (0..n_traj)
                .map(|j| {
                    let draw = NoiseDraw::for_trajectory(noise, cfg, k as u64 * n_traj + j);
                    readout.value(shot_p0(shot.elements, Some(&local), &draw, cfg), None)
                })
                .collect();
            let mut contrast = pairwise_sum(&values) / values.len() as f64;
            if let Some(photons) = readout.photons {
                let mut rng = trajectory_rng(cfg.seed ^ 0x7068_6f74_6f6e_7321, k as u64);
                let mean_counts = photons * (1.0 + contrast);
                let counts = Poisson::new(mean_counts.max(1e-12)).map(|d| d.sample(&mut rng)).unwrap_or(0.0);
                contrast = counts / photons - 1.0;
            }
            CasrPoint {
                index: k,
                time: start,
                contrast,
            }
        })
        .collect();
    Ok(points)
}

/// Bloch vector `(⟨σx⟩, ⟨σy⟩, ⟨σz⟩)` of a two-level state.
pub fn bloch_vector(rho: &DensityMatrix) -> [f64; 3] {
    let m = rho.op();
    let r01 = m.get(0, 1);
    [2.0 * r01.re, -2.0 * r01.im, (m.get(0, 0) - m.get(1, 1)).re]
}

/// Dressed-state Rabi trace: `⟨σz⟩` at the end of each (dressed-Rabi
/// variant) spin-lock sequence, without ensemble averaging.
pub fn run_dressed_rabi(sequences: &[Sequence], rf: &RfSignal, cfg: &SimConfig) -> Result<SweepResult, EngineError> {
    check_run(sequences, Some(rf), &NoiseModel::quiet(), cfg)?;
    let mut out = SweepResult::new("t_sl", "s");
    out.set_meta("protocol", "dressed_rabi");
    let draw = NoiseDraw::quiet();
    let values: Vec<Result<(f64, f64), EngineError>> = sequences
        .par_iter()
        .map(|s| {
            let shot = s.signal_shot().ok_or(EngineError::NoSignalShot)?;
            let rho = propagate_shot(shot.elements, Some(rf), &draw, cfg)?;
            Ok((s.meta.sweep_value, bloch_vector(&rho)[2]))
        })
        .collect();
    for v in values {
        let (t, z) = v?;
        out.push(t, z, 0.0);
    }
    Ok(out)
}

/// `a/2 [sin(x)/x]²` with `x = 2π τ N (ν − ν_RF)`.
pub fn analytic_xy8_lineshape(a: f64, tau: f64, n: f64, nu_grid: &[f64], nu_rf: f64) -> Vec<f64> {
    nu_grid
        .iter()
        .map(|&nu| {
            let x = TAU * tau * n * (nu - nu_rf);
            let sinc = if x.abs() < 1e-8 { 1.0 - x * x / 6.0 } else { x.sin() / x };
            0.5 * a * sinc * sinc
        })
        .collect()
}
