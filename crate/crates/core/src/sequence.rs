//! Pulse sequences: the element model, builders for each protocol, a
//! schema validator and a line-oriented text form.
//!
//! A [`Sequence`] holds one or two *shots*. A shot starts with a laser
//! initialisation and ends with a laser readout; a second shot flagged as
//! reference provides the normalisation measurement (3π/2 readout, MW-off or
//! π-prepared shot depending on the protocol).
//!
//! Timing conventions:
//!
//! * spin echo and CPMG: `τ` is the free evolution between pulse edges, the
//!   recorded free-evolution time is `t_s = 2Nτ`;
//! * XY8 and CASR: `τ` is half the spacing between π-pulse centres, so the
//!   sequence is resonant with a signal at `1/(4τ)` regardless of the pulse
//!   width.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use thiserror::Error;

use crate::hamiltonian::DriveParams;

/// Laser pulse length used for initialisation and readout.
pub const LASER_DURATION: f64 = 5e-6;
/// Gap between the π/2 pulses and the spin-lock pulse.
pub const SPINLOCK_GAP: f64 = 2e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("sweep grid is not ascending")]
    NotAscending,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error(
        "timing not representable on the dt grid: 1/nu_dd = {period:.6e} s is not a multiple of dt = {dt:.6e} s \
         (nearest achievable: dt = {nearest_dt:.9e} s, or nu_dd = {nearest_nu_dd:.6} Hz)"
    )]
    OffGrid {
        period: f64,
        dt: f64,
        nearest_dt: f64,
        nearest_nu_dd: f64,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Classical RF test field `B(t) = b_rf cos(2π ν_rf t + phase)` along the
/// quantisation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfSignal {
    /// Tesla.
    pub b_rf: f64,
    /// Hz.
    pub nu_rf: f64,
    /// rad.
    pub phase: f64,
}

impl RfSignal {
    pub fn new(b_rf: f64, nu_rf: f64, phase: f64) -> Result<Self, SequenceError> {
        if !(b_rf >= 0.0) || !(nu_rf > 0.0) || !phase.is_finite() {
            return Err(SequenceError::InvalidParameter(format!(
                "rf b = {b_rf}, nu = {nu_rf}, phase = {phase}"
            )));
        }
        Ok(RfSignal { b_rf, nu_rf, phase })
    }

    /// Same signal observed from a time origin shifted by `t`.
    pub fn shifted(&self, t: f64) -> RfSignal {
        let cycles = self.nu_rf * t;
        let frac = cycles - cycles.floor();
        RfSignal {
            phase: (self.phase + 2.0 * PI * frac).rem_euclid(2.0 * PI),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseElement {
    MwPulse {
        duration: f64,
        rabi: f64,
        phase: f64,
        detuning: f64,
    },
    /// A long continuous MW pulse used for spin locking. Physically the same
    /// as `MwPulse`, but the engine applies the dressed-state relaxation
    /// envelope only here.
    SpinLock {
        duration: f64,
        rabi: f64,
        phase: f64,
        detuning: f64,
    },
    Delay {
        duration: f64,
    },
    LaserInit {
        duration: f64,
    },
    LaserReadout {
        duration: f64,
        reference: bool,
    },
}

impl PulseElement {
    pub fn mw(duration: f64, drive: &DriveParams, phase: f64) -> Self {
        PulseElement::MwPulse {
            duration,
            rabi: drive.rabi,
            phase,
            detuning: drive.detuning,
        }
    }

    pub fn delay(duration: f64) -> Self {
        PulseElement::Delay { duration }
    }

    pub fn duration(&self) -> f64 {
        match *self {
            PulseElement::MwPulse { duration, .. }
            | PulseElement::SpinLock { duration, .. }
            | PulseElement::Delay { duration }
            | PulseElement::LaserInit { duration }
            | PulseElement::LaserReadout { duration, .. } => duration,
        }
    }

    pub fn is_mw(&self) -> bool {
        matches!(self, PulseElement::MwPulse { .. } | PulseElement::SpinLock { .. })
    }

    /// `(rabi, phase, detuning)` of a MW element.
    pub fn drive(&self) -> Option<(f64, f64, f64)> {
        match *self {
            PulseElement::MwPulse {
                rabi, phase, detuning, ..
            }
            | PulseElement::SpinLock {
                rabi, phase, detuning, ..
            } => Some((rabi, phase, detuning)),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            PulseElement::MwPulse { .. } => "mw",
            PulseElement::SpinLock { .. } => "lock",
            PulseElement::Delay { .. } => "delay",
            PulseElement::LaserInit { .. } => "init",
            PulseElement::LaserReadout { reference: false, .. } => "readout",
            PulseElement::LaserReadout { reference: true, .. } => "readout_ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceMeta {
    pub protocol: String,
    pub sweep_name: String,
    pub sweep_value: f64,
    /// Free-evolution time `t_s` used as the plotting axis for DD protocols.
    pub free_evolution: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub elements: Vec<PulseElement>,
    pub meta: SequenceMeta,
}

/// A borrowed init … readout run within a sequence.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub elements: &'a [PulseElement],
    pub reference: bool,
}

impl Sequence {
    fn new(protocol: &str, sweep_name: &str, sweep_value: f64) -> Self {
        Sequence {
            elements: Vec::new(),
            meta: SequenceMeta {
                protocol: protocol.to_string(),
                sweep_name: sweep_name.to_string(),
                sweep_value,
                free_evolution: 0.0,
            },
        }
    }

    fn push_shot(&mut self, body: &[PulseElement], reference: bool) {
        self.elements.push(PulseElement::LaserInit {
            duration: LASER_DURATION,
        });
        self.elements.extend(body.iter().copied().filter(|e| e.duration() > 0.0 || e.is_mw()));
        self.elements.push(PulseElement::LaserReadout {
            duration: LASER_DURATION,
            reference,
        });
    }

    /// Splits into shots. Assumes a valid sequence.
    pub fn shots(&self) -> Vec<Shot<'_>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, e) in self.elements.iter().enumerate() {
            if let PulseElement::LaserReadout { reference, .. } = e {
                out.push(Shot {
                    elements: &self.elements[start..=i],
                    reference: *reference,
                });
                start = i + 1;
            }
        }
        out
    }

    pub fn signal_shot(&self) -> Option<Shot<'_>> {
        self.shots().into_iter().find(|s| !s.reference)
    }

    pub fn reference_shot(&self) -> Option<Shot<'_>> {
        self.shots().into_iter().find(|s| s.reference)
    }

    pub fn duration(&self) -> f64 {
        self.elements.iter().map(PulseElement::duration).sum()
    }

    /// Total MW time of the signal shot.
    pub fn mw_time(&self) -> f64 {
        self.signal_shot()
            .map(|s| s.elements.iter().filter(|e| e.is_mw()).map(|e| e.duration()).sum())
            .unwrap_or(0.0)
    }

    /// Largest Rabi frequency of any MW element.
    pub fn max_rabi(&self) -> f64 {
        self.elements
            .iter()
            .filter_map(|e| e.drive().map(|d| d.0))
            .fold(0.0, f64::max)
    }

    /// Phases of the MW pulses in the signal shot, in order.
    pub fn mw_phases(&self) -> Vec<f64> {
        self.signal_shot()
            .map(|s| s.elements.iter().filter_map(|e| e.drive().map(|d| d.1)).collect())
            .unwrap_or_default()
    }

    /// Checks the schema: non-negative finite durations, every shot opens
    /// with a laser initialisation before any MW element and closes with
    /// exactly one readout, one signal shot and at most one reference shot.
    pub fn validate(&self) -> Result<(), SequenceError> {
        let invalid = |m: String| Err(SequenceError::Invalid(m));
        if self.elements.is_empty() {
            return invalid("no elements".into());
        }
        let mut in_shot = false;
        let (mut signal, mut reference) = (0, 0);
        for (i, e) in self.elements.iter().enumerate() {
            let d = e.duration();
            if !(d >= 0.0) || !d.is_finite() {
                return invalid(format!("element {i}: duration {d}"));
            }
            if let Some((rabi, phase, detuning)) = e.drive() {
                if !(rabi >= 0.0) || !phase.is_finite() || !detuning.is_finite() {
                    return invalid(format!("element {i}: bad drive"));
                }
            }
            match e {
                PulseElement::LaserInit { .. } => {
                    if in_shot {
                        return invalid(format!("element {i}: init inside an open shot"));
                    }
                    in_shot = true;
                }
                PulseElement::LaserReadout { reference: r, .. } => {
                    if !in_shot {
                        return invalid(format!("element {i}: readout without init"));
                    }
                    in_shot = false;
                    if *r {
                        reference += 1;
                    } else {
                        signal += 1;
                    }
                }
                _ => {
                    if !in_shot {
                        return invalid(format!("element {i}: {} outside a shot", e.kind()));
                    }
                }
            }
        }
        if in_shot {
            return invalid("last shot has no readout".into());
        }
        if signal != 1 || reference > 1 {
            return invalid(format!("{signal} signal and {reference} reference readouts"));
        }
        Ok(())
    }

    /// One element per line: `kind duration rabi phase detuning`, preceded by
    /// `# key=value` metadata lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.meta;
        let _ = writeln!(s, "# protocol={}", m.protocol);
        let _ = writeln!(s, "# sweep={}", m.sweep_name);
        let _ = writeln!(s, "# value={:e}", m.sweep_value);
        let _ = writeln!(s, "# free_evolution={:e}", m.free_evolution);
        for e in &self.elements {
            let (rabi, phase, detuning) = e.drive().unwrap_or((0.0, 0.0, 0.0));
            let _ = writeln!(s, "{} {:e} {:e} {:e} {:e}", e.kind(), e.duration(), rabi, phase, detuning);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, SequenceError> {
        let mut seq = Sequence::new("", "", 0.0);
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: String| SequenceError::Parse { line, message };
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            if let Some(meta) = raw.strip_prefix('#') {
                let (k, v) = meta
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| err("metadata must be key=value".into()))?;
                let num = || v.parse::<f64>().map_err(|e| err(format!("{k}: {e}")));
                match k {
                    "protocol" => seq.meta.protocol = v.to_string(),
                    "sweep" => seq.meta.sweep_name = v.to_string(),
                    "value" => seq.meta.sweep_value = num()?,
                    "free_evolution" => seq.meta.free_evolution = num()?,
                    _ => return Err(err(format!("unknown metadata key '{k}'"))),
                }
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(format!("expected 5 fields, found {}", fields.len())));
            }
            let mut nums = [0.0; 4];
            for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|e| err(format!("'{f}': {e}")))?;
            }
            let [duration, rabi, phase, detuning] = nums;
            let e = match fields[0] {
                "mw" => PulseElement::MwPulse {
                    duration,
                    rabi,
                    phase,
                    detuning,
                },
                "lock" => PulseElement::SpinLock {
                    duration,
                    rabi,
                    phase,
                    detuning,
                },
                "delay" => PulseElement::Delay { duration },
                "init" => PulseElement::LaserInit { duration },
                "readout" => PulseElement::LaserReadout {
                    duration,
                    reference: false,
                },
                "readout_ref" => PulseElement::LaserReadout {
                    duration,
                    reference: true,
                },
                other => return Err(err(format!("unknown element kind '{other}'"))),
            };
            seq.elements.push(e);
        }
        seq.validate()?;
        Ok(seq)
    }
}

fn check_grid(grid: &[f64]) -> Result<(), SequenceError> {
    if grid.is_empty() {
        return Err(SequenceError::EmptyGrid);
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(SequenceError::InvalidParameter("non-finite grid value".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(SequenceError::NotAscending);
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<(), SequenceError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(SequenceError::InvalidParameter(format!("{name} = {v}")))
    }
}

const X: f64 = 0.0;
const Y: f64 = FRAC_PI_2;

/// Rabi nutation: `init - MW(tp) - readout` with an MW-off reference shot.
pub fn build_rabi(tp_grid: &[f64], drive: &DriveParams) -> Result<Vec<Sequence>, SequenceError> {
    check_grid(tp_grid)?;
    tp_grid
        .iter()
        .map(|&tp| {
            check_nonneg("tp", tp)?;
            let mut s = Sequence::new("rabi", "tp", tp);
            s.meta.free_evolution = tp;
            let body: Vec<PulseElement> = if tp > 0.0 {
                vec![PulseElement::mw(tp, drive, drive.phase)]
            } else {
                vec![]
            };
            s.push_shot(&body, false);
            s.push_shot(&[], true);
            Ok(s)
        })
        .collect()
}

/// Pulsed ODMR: a fixed-length MW pulse stepped through `f_grid`; the drive
/// detuning of each point is `f − center`.
pub fn build_odmr(
    f_grid: &[f64],
    center: f64,
    mw_duration: f64,
    drive: &DriveParams,
) -> Result<Vec<Sequence>, SequenceError> {
    check_grid(f_grid)?;
    check_nonneg("mw_duration", mw_duration)?;
    Ok(f_grid
        .iter()
        .map(|&f| {
            let mut s = Sequence::new("odmr", "f", f);
            let d = DriveParams {
                detuning: f - center,
                ..*drive
            };
            s.push_shot(&[PulseElement::mw(mw_duration, &d, d.phase)], false);
            s.push_shot(&[], true);
            s
        })
        .collect())
}

/// Longitudinal relaxation: `init - τ - readout`. With `with_pi_reference`
/// the reference shot inserts a π pulse after initialisation.
pub fn build_t1(tau_grid: &[f64], drive: &DriveParams, with_pi_reference: bool) -> Result<Vec<Sequence>, SequenceError> {
    check_grid(tau_grid)?;
    tau_grid
        .iter()
        .map(|&tau| {
            check_nonneg("tau", tau)?;
            let mut s = Sequence::new("t1", "tau", tau);
            s.meta.free_evolution = tau;
            s.push_shot(&[PulseElement::delay(tau)], false);
            if with_pi_reference {
                s.push_shot(
                    &[
                        PulseElement::mw(drive.pi_duration(), drive, X),
                        PulseElement::delay(tau),
                    ],
                    true,
                );
            }
            Ok(s)
        })
        .collect()
}

fn readout_phases(readout_phase: f64) -> Result<(f64, f64), SequenceError> {
    // Returns (signal, reference) phases of the final π/2 pulse. A 3π/2
    // readout is a π/2 pulse with the phase advanced by π.
    if (readout_phase - FRAC_PI_2).abs() < 1e-9 {
        Ok((X, X + PI))
    } else if (readout_phase - 3.0 * FRAC_PI_2).abs() < 1e-9 {
        Ok((X + PI, X))
    } else {
        Err(SequenceError::InvalidParameter(format!(
            "readout phase must be π/2 or 3π/2, got {readout_phase}"
        )))
    }
}

fn cpmg_body(n: usize, tau: f64, drive: &DriveParams, final_phase: f64) -> Vec<PulseElement> {
    let mut body = vec![PulseElement::mw(drive.half_pi_duration(), drive, X)];
    for _ in 0..n {
        body.push(PulseElement::delay(tau));
        body.push(PulseElement::mw(drive.pi_duration(), drive, Y));
        body.push(PulseElement::delay(tau));
    }
    body.push(PulseElement::mw(drive.half_pi_duration(), drive, final_phase));
    body
}

fn cpmg_like(
    protocol: &str,
    n: usize,
    tau_grid: &[f64],
    drive: &DriveParams,
    readout_phase: f64,
) -> Result<Vec<Sequence>, SequenceError> {
    check_grid(tau_grid)?;
    if n == 0 {
        return Err(SequenceError::InvalidParameter("N must be >= 1".into()));
    }
    let (sig, reference) = readout_phases(readout_phase)?;
    tau_grid
        .iter()
        .map(|&tau| {
            check_nonneg("tau", tau)?;
            let mut s = Sequence::new(protocol, "tau", tau);
            s.meta.free_evolution = 2.0 * n as f64 * tau;
            s.push_shot(&cpmg_body(n, tau, drive, sig), false);
            s.push_shot(&cpmg_body(n, tau, drive, reference), true);
            Ok(s)
        })
        .collect()
}

/// Hahn echo `(π/2)x - τ - (π)y - τ - (π/2)x`, with the 3π/2-readout
/// reference shot (or the mirror image when `readout_phase = 3π/2`).
pub fn build_spin_echo(tau_grid: &[f64], drive: &DriveParams, readout_phase: f64) -> Result<Vec<Sequence>, SequenceError> {
    cpmg_like("echo", 1, tau_grid, drive, readout_phase)
}

/// CPMG `(π/2)x [- τ - (π)y - τ]_N - (π/2)x`; `meta.free_evolution = 2Nτ`.
pub fn build_cpmg(n: usize, tau_grid: &[f64], drive: &DriveParams) -> Result<Vec<Sequence>, SequenceError> {
    cpmg_like("cpmg", n, tau_grid, drive, FRAC_PI_2)
}

/// π-pulse phases of XY8-M: `[x, y, x, y, y, x, y, x]` repeated `M` times.
pub fn xy8_phases(m: usize) -> Vec<f64> {
    const CYCLE: [f64; 8] = [X, Y, X, Y, Y, X, Y, X];
    (0..m).flat_map(|_| CYCLE).collect()
}

fn xy8_body(m: usize, tau: f64, drive: &DriveParams, final_phase: f64) -> Result<Vec<PulseElement>, SequenceError> {
    let t_pi = drive.pi_duration();
    let t_half = drive.half_pi_duration();
    let edge = tau - 0.5 * t_pi - 0.5 * t_half;
    let inner = 2.0 * tau - t_pi;
    if edge < 0.0 || inner < 0.0 {
        return Err(SequenceError::InvalidParameter(format!(
            "tau = {tau:e} s is shorter than the pulses (π = {t_pi:e} s)"
        )));
    }
    let phases = xy8_phases(m);
    let mut body = vec![PulseElement::mw(t_half, drive, X), PulseElement::delay(edge)];
    for (k, &p) in phases.iter().enumerate() {
        body.push(PulseElement::mw(t_pi, drive, p));
        body.push(PulseElement::delay(if k + 1 == phases.len() { edge } else { inner }));
    }
    body.push(PulseElement::mw(t_half, drive, final_phase));
    Ok(body)
}

/// XY8-M with π-pulse centres spaced by `2τ`; resonant with `1/(4τ)`.
pub fn build_xy8(m: usize, tau: f64, drive: &DriveParams) -> Result<Sequence, SequenceError> {
    if m == 0 {
        return Err(SequenceError::InvalidParameter("M must be >= 1".into()));
    }
    check_nonneg("tau", tau)?;
    let mut s = Sequence::new("xy8", "tau", tau);
    s.meta.free_evolution = 16.0 * m as f64 * tau;
    s.push_shot(&xy8_body(m, tau, drive, X)?, false);
    s.push_shot(&xy8_body(m, tau, drive, X + PI)?, true);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinlockVariant {
    T1rho,
    Sensing,
    DressedRabi,
    AmpSweep,
}

impl SpinlockVariant {
    fn name(self) -> &'static str {
        match self {
            SpinlockVariant::T1rho => "spinlock",
            SpinlockVariant::Sensing => "spinlock_sensing",
            SpinlockVariant::DressedRabi => "dressed_rabi",
            SpinlockVariant::AmpSweep => "spinlock_amp",
        }
    }
}

/// `(π/2)x - d - (SL)y - d - (π/2)x` with the spin-lock amplitude a
/// fraction of the π/2 amplitude. The dressed-Rabi variant omits the final
/// π/2 pulse and has no reference shot.
pub fn build_spinlock(
    t_sl: f64,
    amp_fraction: f64,
    drive: &DriveParams,
    variant: SpinlockVariant,
) -> Result<Sequence, SequenceError> {
    check_nonneg("t_sl", t_sl)?;
    if !(amp_fraction > 0.0 && amp_fraction <= 1.0) {
        return Err(SequenceError::InvalidParameter(format!("amp_fraction = {amp_fraction}")));
    }
    let (sweep_name, sweep_value) = match variant {
        SpinlockVariant::AmpSweep => ("amp_fraction", amp_fraction),
        _ => ("t_sl", t_sl),
    };
    let mut s = Sequence::new(variant.name(), sweep_name, sweep_value);
    s.meta.free_evolution = t_sl;
    let lock = PulseElement::SpinLock {
        duration: t_sl,
        rabi: amp_fraction * drive.rabi,
        phase: drive.phase + Y,
        detuning: drive.detuning,
    };
    let head = [
        PulseElement::mw(drive.half_pi_duration(), drive, drive.phase + X),
        PulseElement::delay(SPINLOCK_GAP),
        lock,
    ];
    if variant == SpinlockVariant::DressedRabi {
        s.push_shot(&head, false);
        return Ok(s);
    }
    for (final_phase, reference) in [(X, false), (X + PI, true)] {
        let mut body = head.to_vec();
        body.push(PulseElement::delay(SPINLOCK_GAP));
        body.push(PulseElement::mw(drive.half_pi_duration(), drive, drive.phase + final_phase));
        s.push_shot(&body, reference);
    }
    Ok(s)
}

/// Train of identical readout blocks clocked against the DD frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct CasrSchedule {
    /// One block: init - XY8-2 - readout (signal shot only).
    pub block: Sequence,
    pub dt: f64,
    /// Simulation steps per DD period `1/ν_DD`.
    pub steps_per_period: u64,
    /// DD periods per block.
    pub periods_per_block: u64,
    pub n_blocks: usize,
    pub nu_dd: f64,
    pub nu_rf: f64,
    /// Offset from block start to the first MW element.
    pub mw_offset: f64,
}

impl CasrSchedule {
    pub fn block_steps(&self) -> u64 {
        self.steps_per_period * self.periods_per_block
    }

    pub fn block_period(&self) -> f64 {
        self.block_steps() as f64 * self.dt
    }

    /// Start of block `k`, an exact integer number of grid steps.
    pub fn block_start_step(&self, k: usize) -> u64 {
        k as u64 * self.block_steps()
    }

    pub fn block_start(&self, k: usize) -> f64 {
        self.block_start_step(k) as f64 * self.dt
    }

    /// Down-mixed signal frequency `|ν_DD − ν_RF|`.
    pub fn downmix_frequency(&self) -> f64 {
        (self.nu_dd - self.nu_rf).abs()
    }
}

/// Grid step giving `steps` samples per DD period.
pub fn casr_dt(nu_dd: f64, steps: u64) -> f64 {
    1.0 / (nu_dd * steps as f64)
}

/// Laser durations inside a CASR block: readout window and re-initialisation.
pub const CASR_INIT: f64 = 4.5e-6;
pub const CASR_READOUT: f64 = 0.3e-6;

/// Synchronised-readout train: XY8-2 blocks with `τ = 1/(4ν_DD)`, each block
/// an integer number of DD periods long, for a total measurement time
/// `t_m`. The RF frequency is `ν_DD + delta_nu`.
pub fn build_casr(
    nu_dd: f64,
    delta_nu: f64,
    t_m: f64,
    drive: &DriveParams,
    dt: f64,
) -> Result<CasrSchedule, SequenceError> {
    if !(nu_dd > 0.0) || !(t_m > 0.0) || !(dt > 0.0) || !delta_nu.is_finite() {
        return Err(SequenceError::InvalidParameter(format!(
            "nu_dd = {nu_dd}, delta_nu = {delta_nu}, t_m = {t_m}, dt = {dt}"
        )));
    }
    let period = 1.0 / nu_dd;
    let steps = (period / dt).round().max(1.0);
    if ((steps * dt) - period).abs() > 1e-9 * period {
        return Err(SequenceError::OffGrid {
            period,
            dt,
            nearest_dt: period / steps,
            nearest_nu_dd: 1.0 / (steps * dt),
        });
    }
    let nu_rf = nu_dd + delta_nu;
    if !(nu_rf > 0.0) {
        return Err(SequenceError::InvalidParameter(format!("nu_rf = {nu_rf}")));
    }
    let tau = 0.25 * period;
    let mut block = Sequence::new("casr", "block", 0.0);
    block.elements.push(PulseElement::LaserInit { duration: CASR_INIT });
    // final π/2 shifted by 90° so the population is linear in the phase
    block.elements.extend(xy8_body(2, tau, drive, Y)?);
    block.elements.push(PulseElement::LaserReadout {
        duration: CASR_READOUT,
        reference: false,
    });
    block.meta.free_evolution = 32.0 * tau;
    let periods = (block.duration() / period).ceil() as u64;
    let steps = steps as u64;
    let block_period = (steps * periods) as f64 * dt;
    let n_blocks = (t_m / block_period).floor() as usize;
    if n_blocks == 0 {
        return Err(SequenceError::InvalidParameter(format!(
            "t_m = {t_m} s is shorter than one block ({block_period:e} s)"
        )));
    }
    Ok(CasrSchedule {
        block,
        dt,
        steps_per_period: steps,
        periods_per_block: periods,
        n_blocks,
        nu_dd,
        nu_rf,
        mw_offset: CASR_INIT,
    })
}
