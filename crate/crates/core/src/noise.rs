//! Classical noise acting on the two-level sensing transition.
//!
//! Three pieces live here:
//!
//! * an Ornstein–Uhlenbeck (OU) frequency-noise process, i.e. a bath with a
//!   Lorentzian spectrum, sampled with the exact discrete update;
//! * static ensemble inhomogeneity (hyperfine-split detuning lines and a
//!   spread of Rabi amplitudes);
//! * the filter-function description of dynamical decoupling, which gives
//!   the coherence decay `W(t) = exp(−χ(t))` of an OU bath without any
//!   sampling, and serves as an independent check of the Monte-Carlo engine.
//!
//! All random draws come from per-trajectory ChaCha streams keyed by
//! `(seed, trajectory index)` so that parallel and serial runs agree.

use std::f64::consts::{LN_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid OU parameters: b = {b}, tc = {tc}")]
    InvalidOu { b: f64, tc: f64 },
    #[error("invalid ensemble model: {0}")]
    InvalidEnsemble(String),
    #[error("filter needs at least one pulse and positive timing")]
    InvalidFilter,
    #[error("quadrature did not converge (estimate {estimate:.6e}, error bound {error:.3e})")]
    Quadrature { estimate: f64, error: f64 },
    #[error("coherence time not bracketed in [{lo:.3e}, {hi:.3e}] s")]
    NotBracketed { lo: f64, hi: f64 },
}

/// Random stream for one trajectory. Streams for different indices are
/// independent, and the stream for a given `(seed, index)` never changes.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// OU bath: stationary RMS detuning `b` (Hz) and correlation time `tc` (s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub b: f64,
    pub tc: f64,
}

impl OuParams {
    pub fn new(b: f64, tc: f64) -> Result<Self, NoiseError> {
        let p = OuParams { b, tc };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.b >= 0.0 && self.b.is_finite() && self.tc > 0.0) {
            return Err(NoiseError::InvalidOu { b: self.b, tc: self.tc });
        }
        Ok(())
    }

    /// Stationary variance of the angular detuning, `(2π b)²`.
    pub fn angular_variance(&self) -> f64 {
        (TAU * self.b).powi(2)
    }

    /// Bath amplitude giving a single spin-echo decay `exp(−(T/t2)^3)` in the
    /// slow-bath limit (`T` is the total echo time), refined on the exact
    /// filter-function coherence so that `W(t2) = 1/e`.
    pub fn calibrated_for_echo(t2: f64, tc: f64) -> Result<Self, NoiseError> {
        let sigma = (12.0 * tc / t2.powi(3)).sqrt();
        let mut b = sigma / TAU;
        // χ scales exactly with b², so one correction step is exact.
        for _ in 0..2 {
            let psd = NoisePsd::lorentzian(OuParams::new(b, tc)?);
            let chi = coherence_exponent(&psd, &cpmg_pulse_times(1, t2), t2)?;
            b /= chi.sqrt();
        }
        OuParams::new(b, tc)
    }
}

/// Incremental OU sampler. Each call to [`OuProcess::advance`] applies the
/// exact transition over an arbitrary step.
#[derive(Debug, Clone)]
pub struct OuProcess {
    params: OuParams,
    value: f64,
    cached_step: f64,
    decay: f64,
    kick: f64,
}

impl OuProcess {
    /// Starts from a draw of the stationary distribution `N(0, b²)`.
    pub fn new<R: Rng + ?Sized>(params: OuParams, rng: &mut R) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        OuProcess {
            params,
            value: params.b * z,
            cached_step: f64::NAN,
            decay: 0.0,
            kick: 0.0,
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, dt: f64, rng: &mut R) -> f64 {
        if dt != self.cached_step {
            self.cached_step = dt;
            self.decay = (-dt / self.params.tc).exp();
            self.kick = self.params.b * (-(-2.0 * dt / self.params.tc).exp_m1()).sqrt();
        }
        let z: f64 = rng.sample(StandardNormal);
        self.value = self.value * self.decay + self.kick * z;
        self.value
    }
}

impl OuProcess {
    /// Advances by `h` and also returns the exact time integral `∫ x dt`
    /// over the step, sampled jointly with the end value.
    pub fn advance_with_integral<R: Rng + ?Sized>(&mut self, h: f64, rng: &mut R) -> (f64, f64) {
        let b2 = self.params.b * self.params.b;
        let tc = self.params.tc;
        let u = h / tc;
        let one_minus_e = -(-u).exp_m1();
        let e = 1.0 - one_minus_e;
        let var_x = b2 * -(-2.0 * u).exp_m1();
        let cov = b2 * tc * one_minus_e * one_minus_e;
        // 2u − 3 + 4e^{−u} − e^{−2u}, by its series for small u
        let g = if u < 0.5 {
            let mut term = u * u / 2.0;
            let mut sum = 0.0;
            for k in 3..30 {
                term *= -u / k as f64;
                let c = 4.0 - 2f64.powi(k);
                sum += c * term;
                if (c * term).abs() < 1e-18 * sum.abs() {
                    break;
                }
            }
            sum
        } else {
            2.0 * u - 3.0 + 4.0 * e - e * e
        };
        let var_i = b2 * tc * tc * g;
        let mean_x = self.value * e;
        let mean_i = self.value * tc * one_minus_e;
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let (x, i) = if var_x > 0.0 {
            let sx = var_x.sqrt();
            let cond = (var_i - cov * cov / var_x).max(0.0);
            (mean_x + sx * z1, mean_i + cov / sx * z1 + cond.sqrt() * z2)
        } else {
            (mean_x, mean_i)
        };
        self.value = x;
        (x, i)
    }
}

/// `n` samples of the OU detuning (Hz) on a uniform grid of spacing `dt`.
pub fn sample_ou_trajectory(p: &OuParams, dt: f64, n: usize, seed: u64) -> Result<Vec<f64>, NoiseError> {
    p.validate()?;
    if !(dt > 0.0) || n == 0 {
        return Err(NoiseError::InvalidOu { b: p.b, tc: p.tc });
    }
    let mut rng = trajectory_rng(seed, 0);
    let mut proc = OuProcess::new(*p, &mut rng);
    let mut out = Vec::with_capacity(n);
    out.push(proc.value());
    for _ in 1..n {
        out.push(proc.advance(dt, &mut rng));
    }
    Ok(out)
}

/// One Gaussian detuning line of the inhomogeneous spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetuningLine {
    /// Hz, relative to the drive carrier.
    pub center: f64,
    pub weight: f64,
    /// Half width at half maximum, Hz.
    pub width: f64,
}

impl DetuningLine {
    pub fn sigma(&self) -> f64 {
        self.width / (2.0 * LN_2).sqrt()
    }
}

/// Static per-spin inhomogeneity of the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub detuning_lines: Vec<DetuningLine>,
    /// Relative standard deviation of the Rabi amplitude.
    pub rabi_spread: f64,
}

impl EnsembleModel {
    pub fn new(detuning_lines: Vec<DetuningLine>, rabi_spread: f64) -> Result<Self, NoiseError> {
        let m = EnsembleModel {
            detuning_lines,
            rabi_spread,
        };
        m.validate()?;
        Ok(m)
    }

    /// A single infinitely sharp line at zero detuning and no Rabi spread.
    pub fn homogeneous() -> Self {
        EnsembleModel {
            detuning_lines: vec![DetuningLine {
                center: 0.0,
                weight: 1.0,
                width: f64::MIN_POSITIVE,
            }],
            rabi_spread: 0.0,
        }
    }

    /// Seven lines from three equivalent I = 1 nuclei: offsets `k · spacing`
    /// for `k = −3..=3` with weights `1:3:6:7:6:3:1 / 27`.
    pub fn hyperfine_septet(spacing: f64, hwhm: f64, rabi_spread: f64) -> Result<Self, NoiseError> {
        const MULTIPLICITY: [f64; 7] = [1.0, 3.0, 6.0, 7.0, 6.0, 3.0, 1.0];
        let lines = MULTIPLICITY
            .iter()
            .enumerate()
            .map(|(i, &m)| DetuningLine {
                center: (i as f64 - 3.0) * spacing,
                weight: m / 27.0,
                width: hwhm,
            })
            .collect();
        EnsembleModel::new(lines, rabi_spread)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.detuning_lines.is_empty() {
            return Err(NoiseError::InvalidEnsemble("no detuning lines".into()));
        }
        if self.detuning_lines.iter().any(|l| !(l.weight >= 0.0) || !(l.width > 0.0)) {
            return Err(NoiseError::InvalidEnsemble("weights must be >= 0 and widths > 0".into()));
        }
        let total: f64 = self.detuning_lines.iter().map(|l| l.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(NoiseError::InvalidEnsemble(format!("weights sum to {total}")));
        }
        if !(self.rabi_spread >= 0.0) {
            return Err(NoiseError::InvalidEnsemble("negative Rabi spread".into()));
        }
        Ok(())
    }

    /// Mixture probability density of the detuning at `f` (per Hz).
    pub fn density(&self, f: f64) -> f64 {
        self.detuning_lines
            .iter()
            .map(|l| {
                let s = l.sigma();
                l.weight * (-(f - l.center).powi(2) / (2.0 * s * s)).exp() / (s * (TAU).sqrt())
            })
            .sum()
    }

    /// Draws `(detuning Hz, rabi_scale)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut line = self.detuning_lines[self.detuning_lines.len() - 1];
        for l in &self.detuning_lines {
            acc += l.weight;
            if u < acc {
                line = *l;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        let detuning = line.center + line.sigma() * z;
        let rabi_scale = if self.rabi_spread > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            (1.0 + self.rabi_spread * z).max(0.0)
        } else {
            1.0
        };
        (detuning, rabi_scale)
    }
}

/// Single static draw `(detuning Hz, rabi_scale)` for a seed.
pub fn sample_static_offsets(m: &EnsembleModel, seed: u64) -> Result<(f64, f64), NoiseError> {
    m.validate()?;
    Ok(m.sample(&mut trajectory_rng(seed, 0)))
}

/// Power spectral density of the bath.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoisePsd {
    Lorentzian(OuParams),
}

impl NoisePsd {
    pub fn lorentzian(p: OuParams) -> Self {
        NoisePsd::Lorentzian(p)
    }

    pub fn params(&self) -> OuParams {
        match self {
            NoisePsd::Lorentzian(p) => *p,
        }
    }
}

/// Two-sided PSD of the angular frequency noise, normalised so that
/// `∫_{−∞}^{∞} psd(ω) dω = (2π b)²`:
///
/// `psd(ω) = (2π b)² · 2 tc / (1 + (ω tc)²) / (2π)`.
pub fn psd(p: &NoisePsd, omega: f64) -> f64 {
    match p {
        NoisePsd::Lorentzian(ou) => {
            ou.angular_variance() * 2.0 * ou.tc / (1.0 + (omega * ou.tc).powi(2)) / TAU
        }
    }
}

/// Pulse times of `N`-pulse CPMG with total free evolution `total`:
/// `t_j = total (2j − 1) / (2N)`.
pub fn cpmg_pulse_times(n: usize, total: f64) -> Vec<f64> {
    (1..=n)
        .map(|j| total * (2 * j - 1) as f64 / (2 * n) as f64)
        .collect()
}

/// Filter function `F(ω) = ω² |f̃(ω)|² / 2` of an arbitrary train of ideal π
/// pulses at `pulse_times` inside a window `[0, total]`, evaluated from the
/// switching-function Fourier sum.
pub fn filter_function(pulse_times: &[f64], total: f64, omega: f64) -> f64 {
    let n = pulse_times.len();
    let mut re = 1.0;
    let mut im = 0.0;
    for (j, &t) in pulse_times.iter().enumerate() {
        let sign = if j % 2 == 0 { -2.0 } else { 2.0 };
        let (s, c) = (omega * t).sin_cos();
        re += sign * c;
        im += sign * s;
    }
    let last = if n % 2 == 0 { -1.0 } else { 1.0 };
    let (s, c) = (omega * total).sin_cos();
    re += last * c;
    im += last * s;
    0.5 * (re * re + im * im)
}

/// CPMG filter function for `n` pulses separated by `2τ` (total time `2nτ`).
///
/// Uses the closed form `8 sin⁴(ωT/4N) {sin², cos²}(ωT/2) / cos²(ωT/2N)`,
/// falling back to the direct sum near its removable singularities.
pub fn cpmg_filter_function(n: usize, tau: f64, omega: f64) -> f64 {
    let total = 2.0 * n as f64 * tau;
    cpmg_filter_total(n, total, omega)
}

fn cpmg_filter_total(n: usize, total: f64, omega: f64) -> f64 {
    let nf = n as f64;
    let den = (omega * total / (2.0 * nf)).cos();
    if den.abs() < 1e-3 {
        return filter_function(&cpmg_pulse_times(n, total), total, omega);
    }
    let s4 = (omega * total / (4.0 * nf)).sin().powi(4);
    let half = omega * total / 2.0;
    let osc = if n % 2 == 0 { half.sin().powi(2) } else { half.cos().powi(2) };
    8.0 * s4 * osc / (den * den)
}

// 15-point Gauss–Kronrod rule with its embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let dx = h * XGK[k];
        let pair = f(c - dx) + f(c + dx);
        kron += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kron * h, ((kron - gauss) * h).abs())
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> (f64, f64) {
    let (value, err) = gauss_kronrod(f, a, b);
    if err <= tol || depth == 0 {
        return (value, err);
    }
    let m = 0.5 * (a + b);
    let (v1, e1) = adaptive(f, a, m, 0.5 * tol, depth - 1);
    let (v2, e2) = adaptive(f, m, b, 0.5 * tol, depth - 1);
    (v1 + v2, e1 + e2)
}

/// Integrates `f` over `[0, upper]` split into `panels` equal panels, each
/// refined adaptively. Returns `(value, error estimate)`.
pub(crate) fn integrate_panels(f: impl Fn(f64) -> f64, upper: f64, panels: usize, rel_tol: f64) -> (f64, f64) {
    let width = upper / panels as f64;
    let coarse: Vec<(f64, f64)> = (0..panels)
        .map(|k| gauss_kronrod(&f, k as f64 * width, (k + 1) as f64 * width))
        .collect();
    let total: f64 = coarse.iter().map(|p| p.0).sum();
    let panel_tol = rel_tol * total.abs() / panels as f64;
    let mut value = 0.0;
    let mut error = 0.0;
    for (k, &(v, e)) in coarse.iter().enumerate() {
        if e <= panel_tol {
            value += v;
            error += e;
        } else {
            let (v, e) = adaptive(&f, k as f64 * width, (k + 1) as f64 * width, panel_tol, 30);
            value += v;
            error += e;
        }
    }
    (value, error)
}

const HARMONICS: usize = 40;
const REL_TOL: f64 = 1e-9;

/// Decay exponent `χ(T)` of an ideal-pulse sequence with `pulse_times`
/// inside `[0, total]`:
///
/// `χ = (1/π) ∫₀^∞ S(ω) F(ω) / ω² dω`, `S(ω) = 2π · psd(ω)`.
///
/// The integral runs over `HARMONICS` odd harmonics of the filter passband
/// in panels of width `π / T`; beyond that the Lorentzian tail is added in
/// closed form using the mean filter value `Σ|c_j|² / 2`.
pub fn coherence_exponent(p: &NoisePsd, pulse_times: &[f64], total: f64) -> Result<f64, NoiseError> {
    if !(total > 0.0) {
        return Err(NoiseError::InvalidFilter);
    }
    let ou = p.params();
    if ou.b == 0.0 {
        return Ok(0.0);
    }
    let n = pulse_times.len();
    let is_cpmg = {
        let reference = cpmg_pulse_times(n, total);
        n > 0 && reference.iter().zip(pulse_times).all(|(a, b)| (a - b).abs() <= 1e-12 * total)
    };
    let filter = |w: f64| {
        if is_cpmg {
            cpmg_filter_total(n, total, w)
        } else {
            filter_function(pulse_times, total, w)
        }
    };
    let integrand = |w: f64| {
        if w == 0.0 {
            return 0.0;
        }
        TAU * psd(p, w) * filter(w) / (w * w) / PI
    };
    let panel = PI / total;
    let panels = (2 * HARMONICS + 1) * n.max(1);
    let upper = panel * panels as f64;
    let (value, error) = integrate_panels(integrand, upper, panels, REL_TOL);
    let mean_filter = (2.0 + 4.0 * n as f64) / 2.0;
    // ∫_{ωc}^∞ (1/π) 2σ² tc/(1+ω²tc²) · F̄/ω² dω with the tail form 2σ²/(tc ω²)
    let tail = 2.0 * ou.angular_variance() / (ou.tc * PI) * mean_filter / (3.0 * upper.powi(3));
    if !value.is_finite() || error > 1e-6 * value.abs().max(1e-300) {
        return Err(NoiseError::Quadrature {
            estimate: value + tail,
            error,
        });
    }
    Ok(value + tail)
}

/// Coherence `W(t) = exp(−χ(t))` of `n`-pulse CPMG at each total free
/// evolution time `t_s = 2nτ` in `times`.
pub fn analytic_coherence(p: &NoisePsd, n: usize, times: &[f64]) -> Result<Vec<f64>, NoiseError> {
    if n == 0 {
        return Err(NoiseError::InvalidFilter);
    }
    times
        .iter()
        .map(|&t| {
            if t <= 0.0 {
                Ok(1.0)
            } else {
                coherence_exponent(p, &cpmg_pulse_times(n, t), t).map(|chi| (-chi).exp())
            }
        })
        .collect()
}

/// Total time at which `n`-pulse CPMG coherence falls to `1/e`.
pub fn analytic_t2(p: &NoisePsd, n: usize, lo: f64, hi: f64) -> Result<f64, NoiseError> {
    let chi = |t: f64| coherence_exponent(p, &cpmg_pulse_times(n, t), t);
    let (mut a, mut b) = (lo, hi);
    if chi(a)? > 1.0 || chi(b)? < 1.0 {
        return Err(NoiseError::NotBracketed { lo, hi });
    }
    for _ in 0..60 {
        let m = (a * b).sqrt();
        if chi(m)? < 1.0 {
            a = m;
        } else {
            b = m;
        }
        if b / a - 1.0 < 1e-10 {
            break;
        }
    }
    Ok((a * b).sqrt())
}
