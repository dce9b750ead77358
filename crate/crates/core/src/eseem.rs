//! Two-pulse electron spin echo envelope modulation (ESEEM) of the S = 1
//! defect coupled to three I = 1 nuclei.
//!
//! The 81-dimensional static Hamiltonian is diagonalised once. Pulses are
//! ideal rotations generated by the `|0⟩ ↔ |−1⟩` pseudo-spin operator,
//! restricted (in the eigenbasis) to transitions inside the excitation
//! window. Free evolution is a phase on each eigenbasis coherence. The echo
//! is isolated by coherence-pathway selection, which is what phase cycling
//! achieves in the experiment.
//!
//! Echoes can be summed over a powder of field directions. With the field
//! along the defect axis the `m = 0` nuclear levels stay degenerate and the
//! `Δm_I = 1` modulation cancels; off-axis components lift that degeneracy.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::constants::GAMMA_ELECTRON;
use rayon::prelude::*;

use crate::analysis::{evaluate, fit, Model, ModelSpec, ParamDef};
use crate::engine::SweepResult;
use crate::hamiltonian::{
    hyperfine_hamiltonian, triplet_hamiltonian, HamiltonianError, HyperfineTensor, ZeemanParams, ZfsParams,
};
use crate::spin::{embed, expm_hermitian, Operator, Slot, SpinError, SpinSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EseemError {
    #[error("no |0> <-> |-1> transition lies inside {lo:.4e} .. {hi:.4e} Hz")]
    EmptyExcitation { lo: f64, hi: f64 },
    #[error("tau grid must be non-empty, ascending and non-negative")]
    BadGrid,
    #[error("grid is not uniform")]
    NonUniformGrid,
    #[error("invalid ESEEM config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Field orientations the echo is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// One direction, [`EseemConfig::field_angles`].
    Single,
    /// Randomly oriented defects: sum over `n_theta` (midpoints in cos θ)
    /// × `n_phi` (uniform) field directions.
    Powder { n_theta: usize, n_phi: usize },
}

impl Orientation {
    pub fn describe(&self) -> String {
        match self {
            Orientation::Single => "single".into(),
            Orientation::Powder { n_theta, n_phi } => format!("powder {n_theta}x{n_phi}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EseemConfig {
    pub zfs: ZfsParams,
    /// Static field magnitude, T.
    pub field: f64,
    /// Field direction as (polar, azimuthal) angles from the defect axis,
    /// rad. Used for [`Orientation::Single`].
    pub field_angles: (f64, f64),
    pub orientation: Orientation,
    pub gamma: f64,
    pub tensors: Vec<HyperfineTensor>,
    /// Hz.
    pub mw_freq: f64,
    /// Full width of the excitation window, Hz.
    pub excitation_bandwidth: f64,
    pub tau_grid: Vec<f64>,
    pub t1: f64,
    pub t2: f64,
    /// Number of refocusing π pulses (1 for the Hahn echo).
    pub refocusing_pulses: usize,
}

impl EseemConfig {
    /// 8 mT, 3.2 GHz excitation with 250 MHz bandwidth, τ from 1 ns to
    /// 400 ns in 1 ns steps, T1 = 6 µs, T2 = 80 ns, powder average over
    /// 16 × 16 field directions.
    pub fn boron_vacancy() -> Self {
        EseemConfig {
            zfs: ZfsParams::BORON_VACANCY,
            field: 8e-3,
            field_angles: (0.0, 0.0),
            orientation: Orientation::Powder { n_theta: 16, n_phi: 16 },
            gamma: GAMMA_ELECTRON,
            tensors: HyperfineTensor::boron_vacancy_set().to_vec(),
            mw_freq: 3.2e9,
            excitation_bandwidth: 250e6,
            tau_grid: (1..=400).map(|k| k as f64 * 1e-9).collect(),
            t1: 6e-6,
            t2: 80e-9,
            refocusing_pulses: 1,
        }
    }

    pub fn validate(&self) -> Result<(), EseemError> {
        self.zfs.validate()?;
        if self.tensors.len() != 3 {
            return Err(EseemError::Invalid(format!("expected 3 tensors, got {}", self.tensors.len())));
        }
        for t in &self.tensors {
            t.validate()?;
        }
        if !(self.excitation_bandwidth > 0.0) || !(self.mw_freq > 0.0) {
            return Err(EseemError::Invalid("mw_freq and bandwidth must be > 0".into()));
        }
        if let Orientation::Powder { n_theta, n_phi } = self.orientation {
            if n_theta == 0 || n_phi == 0 {
                return Err(EseemError::Invalid("powder grid must be at least 1 x 1".into()));
            }
        }
        if !(self.t1 > 0.0 && self.t2 > 0.0) || self.refocusing_pulses == 0 || !self.field.is_finite() {
            return Err(EseemError::Invalid("relaxation times, field and pulse count".into()));
        }
        let g = &self.tau_grid;
        if g.is_empty() || g[0] < 0.0 || g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(EseemError::BadGrid);
        }
        Ok(())
    }

    fn system(&self) -> SpinSystem {
        SpinSystem::boron_vacancy()
    }
}

/// Electron ZFS + Zeeman + `Σ S·A_k·I_k` on the 81-dimensional space (rad/s).
pub fn build_full_hamiltonian(cfg: &EseemConfig) -> Result<Operator, EseemError> {
    cfg.validate()?;
    let system = cfg.system();
    let (theta, phi) = cfg.field_angles;
    let zeeman = ZeemanParams {
        gamma: cfg.gamma,
        b0: [
            cfg.field * theta.sin() * phi.cos(),
            cfg.field * theta.sin() * phi.sin(),
            cfg.field * theta.cos(),
        ],
    };
    let electron = triplet_hamiltonian(&cfg.zfs, &zeeman)?;
    let h = &embed(&electron, Slot::Electron, &system)? + &hyperfine_hamiltonian(&cfg.tensors, &system)?;
    Ok(h)
}

/// Electron manifold index (0: m=+1, 1: m=0, 2: m=−1) of each eigenvector,
/// by largest projection.
fn classify(vectors: &DMatrix<C64>, nuclear_dim: usize) -> Vec<usize> {
    let n = vectors.nrows();
    (0..n)
        .map(|k| {
            let mut weight = [0.0; 3];
            for i in 0..n {
                weight[i / nuclear_dim] += vectors[(i, k)].norm_sqr();
            }
            (0..3).max_by(|&a, &b| weight[a].total_cmp(&weight[b])).unwrap_or(0)
        })
        .collect()
}

/// Pulse operators and initial coherence restricted to the blocks between
/// the `m = 0` and `m = −1` manifolds, in the eigenbasis.
struct EchoModel {
    e_zero: Vec<f64>,
    e_minus: Vec<f64>,
    /// `[0, −1]` block of the state after the π/2 pulse.
    rho1: DMatrix<C64>,
    /// `[−1, 0]` and `[0, −1]` blocks of the π pulse.
    pi_mz: DMatrix<C64>,
    pi_zm: DMatrix<C64>,
    /// `[0, −1]` block of the (window-filtered) detection operator.
    detect: DMatrix<C64>,
}

const M_ZERO: usize = 1;
const M_MINUS: usize = 2;

fn block(m: &DMatrix<C64>, rows: &[usize], cols: &[usize]) -> DMatrix<C64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

impl EchoModel {
    fn new(cfg: &EseemConfig) -> Result<Self, EseemError> {
        let h = build_full_hamiltonian(cfg)?;
        let system = cfg.system();
        let nuclear_dim = system.dim() / 3;
        let eig = h.eigh()?;
        let v = &eig.vectors;
        let manifold = classify(v, nuclear_dim);
        let n = system.dim();
        let zero: Vec<usize> = (0..n).filter(|&k| manifold[k] == M_ZERO).collect();
        let minus: Vec<usize> = (0..n).filter(|&k| manifold[k] == M_MINUS).collect();

        // pseudo-spin X = (|0⟩⟨−1| + h.c.)/2 on the electron
        let mut xe = Operator::zeros(3);
        xe.set(1, 2, C64::new(0.5, 0.0));
        xe.set(2, 1, C64::new(0.5, 0.0));
        let x = embed(&xe, Slot::Electron, &system)?;
        let x_eig = v.adjoint() * x.matrix() * v;

        let lo = cfg.mw_freq - 0.5 * cfg.excitation_bandwidth;
        let hi = cfg.mw_freq + 0.5 * cfg.excitation_bandwidth;
        let mut filtered = DMatrix::<C64>::zeros(n, n);
        let mut any = false;
        for &k in &zero {
            for &l in &minus {
                let f = (eig.values[k] - eig.values[l]).abs() / TAU;
                if f >= lo && f <= hi {
                    filtered[(k, l)] = x_eig[(k, l)];
                    filtered[(l, k)] = x_eig[(l, k)];
                    any |= x_eig[(k, l)].norm() > 1e-12;
                }
            }
        }
        if !any {
            return Err(EseemError::EmptyExcitation { lo, hi });
        }
        let gen = Operator::from_matrix(filtered.clone())?;
        // exp(−iθX) with θ = π/2, π
        let half_pi = expm_hermitian(&gen, std::f64::consts::FRAC_PI_2)?.into_matrix();
        let pi = expm_hermitian(&gen, std::f64::consts::PI)?.into_matrix();

        let mut pe = Operator::zeros(3);
        pe.set(1, 1, C64::new(1.0 / nuclear_dim as f64, 0.0));
        let p0 = embed(&pe, Slot::Electron, &system)?;
        let rho0 = v.adjoint() * p0.matrix() * v;
        let rho_after = &half_pi * rho0 * half_pi.adjoint();
        Ok(EchoModel {
            e_zero: zero.iter().map(|&k| eig.values[k]).collect(),
            e_minus: minus.iter().map(|&k| eig.values[k]).collect(),
            rho1: block(&rho_after, &zero, &minus),
            pi_mz: block(&pi, &minus, &zero),
            pi_zm: block(&pi, &zero, &minus),
            detect: block(&filtered, &zero, &minus),
        })
    }

    fn evolve(m: &mut DMatrix<C64>, rows: &[f64], cols: &[f64], t: f64) {
        for (i, er) in rows.iter().enumerate() {
            for (j, ec) in cols.iter().enumerate() {
                m[(i, j)] *= C64::from_polar(1.0, -(er - ec) * t);
            }
        }
    }

    /// Complex echo for `π/2 - τ - [π - 2τ -]…π - τ`, following the
    /// alternating ±1 coherence pathway.
    fn echo(&self, tau: f64, pulses: usize) -> C64 {
        let mut rho = self.rho1.clone();
        Self::evolve(&mut rho, &self.e_zero, &self.e_minus, tau);
        // true while `rho` is the [0, −1] block
        let mut zero_minus = true;
        for k in 0..pulses {
            let t = if k + 1 == pulses { tau } else { 2.0 * tau };
            if zero_minus {
                rho = &self.pi_mz * rho * self.pi_zm.adjoint();
                Self::evolve(&mut rho, &self.e_minus, &self.e_zero, t);
            } else {
                rho = &self.pi_zm * rho * self.pi_mz.adjoint();
                Self::evolve(&mut rho, &self.e_zero, &self.e_minus, t);
            }
            zero_minus = !zero_minus;
        }
        if zero_minus {
            (self.detect.adjoint() * rho).trace()
        } else {
            (&self.detect * rho).trace()
        }
    }
}

/// Field directions (polar, azimuthal) and weights for the configured
/// orientation set.
fn orientations(cfg: &EseemConfig) -> Vec<(f64, f64, f64)> {
    match cfg.orientation {
        Orientation::Single => vec![(cfg.field_angles.0, cfg.field_angles.1, 1.0)],
        Orientation::Powder { n_theta, n_phi } => {
            // midpoint rule in cos θ over the upper hemisphere (B and −B give
            // the same echo), uniform in φ
            let mut out = Vec::with_capacity(n_theta * n_phi);
            for i in 0..n_theta {
                let c = (i as f64 + 0.5) / n_theta as f64;
                for j in 0..n_phi {
                    out.push((c.acos(), TAU * j as f64 / n_phi as f64, 1.0));
                }
            }
            out
        }
    }
}

/// Echo amplitude versus τ, normalised to 1 at τ = 0 and multiplied by the
/// transverse relaxation envelope `exp(−2nτ/T2)` (n refocusing pulses).
/// For a powder the complex echoes of all orientations are summed before
/// normalising; orientations with no transition in the excitation window
/// contribute nothing.
pub fn simulate_two_pulse_eseem(cfg: &EseemConfig) -> Result<SweepResult, EseemError> {
    cfg.validate()?;
    let n = cfg.refocusing_pulses;
    let traces: Vec<Result<Option<(C64, Vec<C64>)>, EseemError>> = orientations(cfg)
        .into_par_iter()
        .map(|(theta, phi, w)| {
            let oriented = EseemConfig { field_angles: (theta, phi), ..cfg.clone() };
            let model = match EchoModel::new(&oriented) {
                Ok(m) => m,
                Err(EseemError::EmptyExcitation { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let s0 = model.echo(0.0, n) * w;
            Ok(Some((s0, cfg.tau_grid.iter().map(|&tau| model.echo(tau, n) * w).collect())))
        })
        .collect();
    let mut s0 = C64::new(0.0, 0.0);
    let mut sum = vec![C64::new(0.0, 0.0); cfg.tau_grid.len()];
    for t in traces {
        if let Some((a, trace)) = t? {
            s0 += a;
            for (acc, v) in sum.iter_mut().zip(trace) {
                *acc += v;
            }
        }
    }
    if s0.norm() == 0.0 {
        let lo = cfg.mw_freq - 0.5 * cfg.excitation_bandwidth;
        return Err(EseemError::EmptyExcitation { lo, hi: lo + cfg.excitation_bandwidth });
    }
    let mut out = SweepResult::new("tau", "s");
    out.set_meta("protocol", "eseem");
    out.set_meta("refocusing_pulses", n);
    out.set_meta("orientation", cfg.orientation.describe());
    for (&tau, s) in cfg.tau_grid.iter().zip(sum) {
        out.push(tau, (s / s0).re * (-2.0 * n as f64 * tau / cfg.t2).exp(), 0.0);
    }
    Ok(out)
}

/// Magnitude spectrum of a uniformly sampled trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequency: Vec<f64>,
    pub magnitude: Vec<f64>,
    /// Smooth decay removed before the transform.
    pub background: Vec<f64>,
    /// Dominant non-DC peak, Hz.
    pub peak: Option<f64>,
}

/// `y0 + a exp(−(t/T)^c)`: the relaxation background under the modulation.
struct Background;

impl Model for Background {
    fn id(&self) -> String {
        "eseem-background".into()
    }

    fn params(&self) -> Vec<ParamDef> {
        vec![
            ParamDef::unbounded("y0"),
            ParamDef::unbounded("a"),
            ParamDef::new("t", 0.0, f64::INFINITY),
            ParamDef::new("c", 0.5, 4.0),
        ]
    }

    fn eval(&self, p: &[f64], t: f64) -> f64 {
        p[0] + p[1] * (-(t / p[2]).abs().powf(p[3])).exp()
    }

    fn guesses(&self, x: &[f64], y: &[f64], _known: &[Option<f64>]) -> Vec<Vec<f64>> {
        let y0 = y[y.len() - 1];
        let a = y[0] - y0;
        let span = x[x.len() - 1] - x[0];
        let t = x
            .iter()
            .zip(y)
            .find(|(_, &v)| (v - y0).abs() < a.abs() / std::f64::consts::E)
            .map(|(&t, _)| t - x[0])
            .unwrap_or(span / 2.0)
            .max(span / x.len() as f64);
        [1.0, 1.5, 2.0].iter().map(|&c| vec![y0, a, t, c]).collect()
    }

    fn scales(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let amp = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        vec![amp, amp, x[x.len() - 1] - x[0], 0.1]
    }
}

/// Background-corrected, zero-padded magnitude FFT.
///
/// A smooth decay `y0 + a exp(−(τ/T)^c)` is fitted and subtracted first (the
/// usual ESEEM baseline correction; subtracting only the mean would leave a
/// step whose sidelobes dominate a decaying trace). The residual is then
/// mean-subtracted and zero-padded to ≥ 8× its length (power of two).
/// `magnitude` is scaled so that `Σ magnitude² / n_fft = Σ (r − r̄)²` over
/// the full two-sided spectrum; only non-negative frequencies are returned.
pub fn eseem_spectrum(axis: &[f64], values: &[f64]) -> Result<Spectrum, EseemError> {
    if axis.len() < 8 || axis.len() != values.len() {
        return Err(EseemError::BadGrid);
    }
    let step = axis[1] - axis[0];
    if !(step > 0.0) || axis.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step) {
        return Err(EseemError::NonUniformGrid);
    }
    let background = match fit(&Background, axis, values, &ModelSpec::new("eseem-background")) {
        Ok(r) if r.converged => evaluate(&Background, &r.values(), axis),
        _ => vec![values.iter().sum::<f64>() / values.len() as f64; values.len()],
    };
    let resid: Vec<f64> = values.iter().zip(&background).map(|(v, b)| v - b).collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let n_fft = (8 * resid.len()).next_power_of_two();
    let mut buf: Vec<C64> = resid.iter().map(|v| C64::new(v - mean, 0.0)).collect();
    buf.resize(n_fft, C64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut buf);
    let half = n_fft / 2 + 1;
    let magnitude: Vec<f64> = buf[..half].iter().map(|c| c.norm()).collect();
    let frequency: Vec<f64> = (0..half).map(|k| k as f64 / (n_fft as f64 * step)).collect();
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let peak = dominant_peak(&magnitude, scale).map(|k| frequency[k]);
    Ok(Spectrum {
        frequency,
        magnitude,
        background,
        peak,
    })
}

/// Largest bin after the lobe around DC (which starts at the first local
/// minimum). `None` when that bin is negligible against `scale`, the
/// largest input magnitude.
fn dominant_peak(magnitude: &[f64], scale: f64) -> Option<usize> {
    let start = (1..magnitude.len().saturating_sub(1)).find(|&k| magnitude[k] <= magnitude[k + 1])?;
    let (k, &m) = magnitude[start..]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(m > 1e-9 * scale) {
        return None;
    }
    Some(start + k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_tensors_give_degenerate_triplet() {
        let cfg = EseemConfig {
            tensors: vec![HyperfineTensor::zero(); 3],
            ..EseemConfig::boron_vacancy()
        };
        let h = build_full_hamiltonian(&cfg).unwrap();
        assert_eq!(h.dim(), 81);
        assert!(h.is_hermitian(1e-10));
        let values = h.eigenvalues_hermitian().unwrap();
        for block in values.chunks(27) {
            let spread = block[26] - block[0];
            assert!(spread.abs() < 1e-6 * block[0].abs().max(1.0));
        }
    }

    #[test]
    fn zero_tensors_give_flat_echo() {
        let cfg = EseemConfig {
            tensors: vec![HyperfineTensor::zero(); 3],
            tau_grid: (1..=50).map(|k| k as f64 * 2e-9).collect(),
            orientation: Orientation::Single,
            ..EseemConfig::boron_vacancy()
        };
        let r = simulate_two_pulse_eseem(&cfg).unwrap();
        for (tau, v) in r.axis.iter().zip(&r.contrast) {
            let expected = (-2.0 * tau / cfg.t2).exp();
            assert!((v - expected).abs() < 1e-9, "{tau} {v}");
        }
    }

    #[test]
    fn echo_is_one_at_zero_delay() {
        let cfg = EseemConfig {
            tau_grid: vec![0.0, 1e-9],
            orientation: Orientation::Single,
            ..EseemConfig::boron_vacancy()
        };
        let r = simulate_two_pulse_eseem(&cfg).unwrap();
        assert!((r.contrast[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_an_error() {
        let cfg = EseemConfig {
            mw_freq: 1.0e9,
            orientation: Orientation::Single,
            ..EseemConfig::boron_vacancy()
        };
        assert!(matches!(
            simulate_two_pulse_eseem(&cfg),
            Err(EseemError::EmptyExcitation { .. })
        ));
    }

    #[test]
    fn spectrum_of_pure_tone() {
        let t: Vec<f64> = (0..400).map(|k| k as f64 * 1e-9).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 + (TAU * 45e6 * t).cos()).collect();
        let s = eseem_spectrum(&t, &y).unwrap();
        let bin = s.frequency[1];
        assert!((s.peak.unwrap() - 45e6).abs() <= bin);
    }

    #[test]
    fn spectrum_rejects_non_uniform_grid() {
        let t = [0.0, 1.0, 2.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(eseem_spectrum(&t, &[0.0; 9]), Err(EseemError::NonUniformGrid));
    }

    #[test]
    fn powder_echo_modulates_near_hyperfine_frequency() {
        let cfg = EseemConfig::boron_vacancy();
        let t = std::time::Instant::now();
        let r = simulate_two_pulse_eseem(&cfg).unwrap();
        let s = eseem_spectrum(&r.axis, &r.contrast).unwrap();
        let f = s.peak.unwrap();
        println!("peak {:.2} MHz in {:?}", f / 1e6, t.elapsed());
        assert!((42e6..=48e6).contains(&f), "{f}");
    }

    #[test]
    fn dc_input_has_no_peak() {
        let t: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let s = eseem_spectrum(&t, &[3.0; 100]).unwrap();
        assert_eq!(s.peak, None);
    }
}
