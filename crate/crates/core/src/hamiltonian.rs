//! Ground-state triplet Hamiltonians and the driven two-level reduction.
//!
//! All parameters are ordinary frequencies (Hz, or MHz for hyperfine
//! tensors). The conversion to angular units happens once, when an
//! [`Operator`] is assembled, so every returned operator is in rad/s.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

use crate::constants::GAMMA_ELECTRON;
use crate::sequence::RfSignal;
use crate::spin::{embed, pauli, spin_matrices, Operator, Slot, Spin, SpinError, SpinSystem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error("invalid zero-field splitting: D = {d} Hz, E = {e} Hz (need D > 0, |E| < D)")]
    InvalidZfs { d: f64, e: f64 },
    #[error("gyromagnetic ratio must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("hyperfine tensor has non-finite entries or principal values outside [0, 200] MHz")]
    InvalidTensor,
    #[error("{tensors} hyperfine tensors supplied for {nuclei} nuclei")]
    TensorCount { tensors: usize, nuclei: usize },
    #[error("drive Rabi frequency must be non-negative, got {0}")]
    NegativeRabi(f64),
    #[error(transparent)]
    Spin(#[from] SpinError),
}

/// Zero-field splitting parameters in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZfsParams {
    pub d: f64,
    pub e: f64,
}

impl ZfsParams {
    /// `D = 3.47 GHz`, `E = 60 MHz`.
    pub const BORON_VACANCY: ZfsParams = ZfsParams { d: 3.47e9, e: 60e6 };

    pub fn new(d: f64, e: f64) -> Result<Self, HamiltonianError> {
        let p = ZfsParams { d, e };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), HamiltonianError> {
        if !(self.d > 0.0) || !(self.e.abs() < self.d) {
            return Err(HamiltonianError::InvalidZfs { d: self.d, e: self.e });
        }
        Ok(())
    }
}

/// Electron Zeeman term parameters: `gamma` in Hz/T, field in tesla.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeemanParams {
    pub gamma: f64,
    pub b0: [f64; 3],
}

impl ZeemanParams {
    /// Axial field of magnitude `b` with the g = 2 gyromagnetic ratio.
    pub fn axial(b: f64) -> Self {
        ZeemanParams {
            gamma: GAMMA_ELECTRON,
            b0: [0.0, 0.0, b],
        }
    }

    pub fn validate(&self) -> Result<(), HamiltonianError> {
        if !(self.gamma > 0.0) {
            return Err(HamiltonianError::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

/// Hyperfine coupling tensor in MHz, `H = S · A · I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperfineTensor {
    pub a: [[f64; 3]; 3],
}

impl HyperfineTensor {
    pub fn new(a: [[f64; 3]; 3]) -> Result<Self, HamiltonianError> {
        let t = HyperfineTensor { a };
        t.validate()?;
        Ok(t)
    }

    /// Diagonal tensor from principal values `[Ax, Ay, Az]`.
    pub fn principal(values: [f64; 3]) -> Result<Self, HamiltonianError> {
        let mut a = [[0.0; 3]; 3];
        for k in 0..3 {
            a[k][k] = values[k];
        }
        HyperfineTensor::new(a)
    }

    pub fn zero() -> Self {
        HyperfineTensor { a: [[0.0; 3]; 3] }
    }

    /// The three ¹⁴N tensors of the boron vacancy, `[80 57 47]`, `[46 91 48]`, `[80 57 47]` MHz.
    pub fn boron_vacancy_set() -> [HyperfineTensor; 3] {
        [
            HyperfineTensor::principal([80.0, 57.0, 47.0]).unwrap(),
            HyperfineTensor::principal([46.0, 91.0, 48.0]).unwrap(),
            HyperfineTensor::principal([80.0, 57.0, 47.0]).unwrap(),
        ]
    }

    pub fn validate(&self) -> Result<(), HamiltonianError> {
        if self.a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HamiltonianError::InvalidTensor);
        }
        let sym = nalgebra::Matrix3::from_fn(|i, j| 0.5 * (self.a[i][j] + self.a[j][i]));
        let eig = sym.symmetric_eigenvalues();
        if eig.iter().any(|&v| !(-1e-9..=200.0 + 1e-9).contains(&v)) {
            return Err(HamiltonianError::InvalidTensor);
        }
        Ok(())
    }
}

/// Resonant microwave drive in the rotating frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveParams {
    /// On-resonance Rabi frequency Ω/2π in Hz.
    pub rabi: f64,
    /// Drive phase in radians (0 = x, π/2 = y).
    pub phase: f64,
    /// Carrier minus transition frequency, Hz.
    pub detuning: f64,
}

impl DriveParams {
    pub fn new(rabi: f64, phase: f64, detuning: f64) -> Result<Self, HamiltonianError> {
        if !(rabi >= 0.0) {
            return Err(HamiltonianError::NegativeRabi(rabi));
        }
        Ok(DriveParams { rabi, phase, detuning })
    }

    pub fn resonant(rabi: f64) -> Self {
        DriveParams {
            rabi,
            phase: 0.0,
            detuning: 0.0,
        }
    }

    pub fn pi_duration(&self) -> f64 {
        0.5 / self.rabi
    }

    pub fn half_pi_duration(&self) -> f64 {
        0.25 / self.rabi
    }
}

/// `2π [D (Sz² − 2/3) + E (Sx² − Sy²)]` on the spin-1 triplet.
pub fn zfs_hamiltonian(p: &ZfsParams) -> Result<Operator, HamiltonianError> {
    if p.d == 0.0 && p.e == 0.0 {
        return Ok(Operator::zeros(3));
    }
    p.validate()?;
    let s = spin_matrices(Spin::ONE);
    let sz2 = &s.sz * &s.sz;
    let axial = &sz2 - &Operator::identity(3).scale(2.0 / 3.0);
    let rhombic = &(&s.sx * &s.sx) - &(&s.sy * &s.sy);
    Ok((&axial.scale(p.d) + &rhombic.scale(p.e)).scale(TAU))
}

/// `2π γ (B · S)` on the spin-1 triplet.
pub fn zeeman_hamiltonian(p: &ZeemanParams) -> Result<Operator, HamiltonianError> {
    p.validate()?;
    let s = spin_matrices(Spin::ONE);
    let mut h = Operator::zeros(3);
    for (op, b) in s.as_array().into_iter().zip(p.b0) {
        h = &h + &op.scale(TAU * p.gamma * b);
    }
    Ok(h)
}

/// `2π Σ_k S · A_k · I_k` embedded in the full product space (tensors in MHz).
pub fn hyperfine_hamiltonian(
    tensors: &[HyperfineTensor],
    system: &SpinSystem,
) -> Result<Operator, HamiltonianError> {
    if tensors.len() != system.nuclei.len() {
        return Err(HamiltonianError::TensorCount {
            tensors: tensors.len(),
            nuclei: system.nuclei.len(),
        });
    }
    let s = spin_matrices(system.electron);
    let s_full = s
        .as_array()
        .map(|op| embed(op, Slot::Electron, system))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut h = Operator::zeros(system.dim());
    for (k, (tensor, &spin)) in tensors.iter().zip(&system.nuclei).enumerate() {
        tensor.validate()?;
        let i_ops = spin_matrices(spin);
        let i_full = i_ops
            .as_array()
            .map(|op| embed(op, Slot::Nucleus(k), system))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        for a in 0..3 {
            for b in 0..3 {
                let coupling = tensor.a[a][b];
                if coupling != 0.0 {
                    h = &h + &(&s_full[a] * &i_full[b]).scale(TAU * 1e6 * coupling);
                }
            }
        }
    }
    Ok(h)
}

/// Pairwise eigenvalue differences of `h` divided by 2π, ascending.
pub fn transition_frequencies(h: &Operator) -> Result<Vec<f64>, HamiltonianError> {
    let values = h.eigenvalues_hermitian()?;
    let mut out = Vec::with_capacity(values.len() * (values.len().saturating_sub(1)) / 2);
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            out.push((values[j] - values[i]).abs() / TAU);
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Two-level rotating-frame generator in the `{|0⟩, |−1⟩}` subspace.
///
/// `H(t) = (Ω/2)(cos φ σx + sin φ σy) + π (δ + δ_noise + γ b_RF cos(2π ν_RF t + φ_RF)) σz`,
/// returned in rad/s. The basis index 0 is `|m_S = 0⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLevelGenerator {
    pub drive: DriveParams,
    pub rf: Option<RfSignal>,
    pub gamma: f64,
    pub noise_offset: f64,
}

impl TwoLevelGenerator {
    /// Coefficients `(hx, hy, hz)` of `H = hx σx + hy σy + hz σz`, rad/s.
    pub fn coefficients(&self, t: f64) -> [f64; 3] {
        let half_omega = PI * self.drive.rabi;
        let rf = self
            .rf
            .map(|r| self.gamma * r.b_rf * (TAU * r.nu_rf * t + r.phase).cos())
            .unwrap_or(0.0);
        [
            half_omega * self.drive.phase.cos(),
            half_omega * self.drive.phase.sin(),
            PI * (self.drive.detuning + self.noise_offset + rf),
        ]
    }

    pub fn at(&self, t: f64) -> Operator {
        let [hx, hy, hz] = self.coefficients(t);
        let [sx, sy, sz] = pauli();
        &(&sx.scale(hx) + &sy.scale(hy)) + &sz.scale(hz)
    }
}

pub fn rotating_frame_two_level(
    drive: DriveParams,
    rf: Option<RfSignal>,
    noise_offset: f64,
) -> TwoLevelGenerator {
    TwoLevelGenerator {
        drive,
        rf,
        gamma: GAMMA_ELECTRON,
        noise_offset,
    }
}

/// Effective generator in the frame co-rotating with the Rabi nutation when
/// `Ω = 2π ν_RF`: `(γ b_RF / 4)(cos φ σz + sin φ σx)` with angular γ.
pub fn second_rotating_frame_generator(rf: &RfSignal, gamma: f64) -> Operator {
    let k = TAU * gamma * rf.b_rf / 4.0;
    let [sx, _, sz] = pauli();
    &sz.scale(k * rf.phase.cos()) + &sx.scale(k * rf.phase.sin())
}

/// Static lab-frame triplet Hamiltonian (ZFS + electron Zeeman), rad/s.
pub fn triplet_hamiltonian(zfs: &ZfsParams, zeeman: &ZeemanParams) -> Result<Operator, HamiltonianError> {
    Ok(&zfs_hamiltonian(zfs)? + &zeeman_hamiltonian(zeeman)?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::expm_hermitian;

    fn freqs(h: &Operator) -> Vec<f64> {
        h.eigenvalues_hermitian().unwrap().iter().map(|v| v / TAU).collect()
    }

    #[test]
    fn zfs_levels_at_zero_field() {
        let h = zfs_hamiltonian(&ZfsParams::new(3.47e9, 0.0).unwrap()).unwrap();
        let f = freqs(&h);
        // |0⟩ at −2D/3, |±1⟩ degenerate at +D/3.
        assert!((f[1] - f[2]).abs() < 1e-3);
        assert!((f[1] - f[0] - 3.47e9).abs() < 1e-3);
        assert!(h.trace().norm() < 1e-6 * 3.47e9);
    }

    #[test]
    fn zfs_rhombic_splitting_is_two_e() {
        let h = zfs_hamiltonian(&ZfsParams::BORON_VACANCY).unwrap();
        let f = freqs(&h);
        assert!((f[2] - f[1] - 120e6).abs() < 1.0);
    }

    #[test]
    fn zero_params_give_zero_operators() {
        assert_eq!(zfs_hamiltonian(&ZfsParams { d: 0.0, e: 0.0 }).unwrap().max_abs(), 0.0);
        assert_eq!(zeeman_hamiltonian(&ZeemanParams::axial(0.0)).unwrap().max_abs(), 0.0);
        let sys = SpinSystem::boron_vacancy();
        let h = hyperfine_hamiltonian(&[HyperfineTensor::zero(); 3], &sys).unwrap();
        assert_eq!(h.max_abs(), 0.0);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ZfsParams::new(-1.0, 0.0).is_err());
        assert!(ZfsParams::new(1e9, 2e9).is_err());
        assert!(HyperfineTensor::principal([500.0, 0.0, 0.0]).is_err());
        assert!(HyperfineTensor::principal([f64::NAN, 0.0, 0.0]).is_err());
        assert!(DriveParams::new(-1.0, 0.0, 0.0).is_err());
        let sys = SpinSystem::boron_vacancy();
        assert!(matches!(
            hyperfine_hamiltonian(&[HyperfineTensor::zero(); 2], &sys),
            Err(HamiltonianError::TensorCount { tensors: 2, nuclei: 3 })
        ));
    }

    #[test]
    fn axial_zeeman_splitting() {
        let h = zeeman_hamiltonian(&ZeemanParams {
            gamma: 28.02e9,
            b0: [0.0, 0.0, 8e-3],
        })
        .unwrap();
        let f = freqs(&h);
        assert!((f[1] - f[0] - 224.16e6).abs() < 1.0);
        assert!((f[2] - f[1] - 224.16e6).abs() < 1.0);
    }

    #[test]
    fn lower_transition_near_microwave_frequency() {
        let h = triplet_hamiltonian(&ZfsParams::new(3.47e9, 0.0).unwrap(), &ZeemanParams::axial(8e-3)).unwrap();
        let f = freqs(&h);
        // levels ascending: |0⟩, |−1⟩, |+1⟩
        let lower = f[1] - f[0];
        assert!((lower - 3.2458e9).abs() < 1e6);
        assert!((lower - 3.2e9).abs() < 60e6);
    }

    #[test]
    fn rotating_frame_pi_time() {
        let g = rotating_frame_two_level(DriveParams::resonant(67e6), None, 0.0);
        let t_pi = g.drive.pi_duration();
        assert!((t_pi - 7.46e-9).abs() < 0.01e-9);
        let u = expm_hermitian(&g.at(0.0), t_pi).unwrap();
        assert!((u.get(1, 0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotating_frame_zero_drive_is_zero() {
        let g = rotating_frame_two_level(DriveParams::resonant(0.0), None, 0.0);
        assert_eq!(g.at(0.3).max_abs(), 0.0);
    }

    #[test]
    fn y_phase_drive_is_pure_sigma_y() {
        let g = rotating_frame_two_level(DriveParams::new(10e6, PI / 2.0, 0.0).unwrap(), None, 0.0);
        let [_, sy, _] = pauli();
        assert!(g.at(0.0).max_abs_diff(&sy.scale(PI * 10e6)) < 1e-6);
    }

    #[test]
    fn second_frame_generator_form() {
        let rf = RfSignal {
            b_rf: 1e-6,
            nu_rf: 18e6,
            phase: 0.3,
        };
        let h = second_rotating_frame_generator(&rf, GAMMA_ELECTRON);
        let k = TAU * GAMMA_ELECTRON * 1e-6 / 4.0;
        assert!((h.get(0, 0).re - k * 0.3f64.cos()).abs() < 1e-9 * k);
        assert!((h.get(0, 1).re - k * 0.3f64.sin()).abs() < 1e-9 * k);
        assert!(h.is_hermitian(1e-12));
    }

    #[test]
    fn transition_frequencies_simple() {
        let h = Operator::from_real_diagonal(&[0.0, TAU * 5e6]);
        let f = transition_frequencies(&h).unwrap();
        assert_eq!(f.len(), 1);
        assert!((f[0] - 5e6).abs() < 1e-6);

        let zfs = zfs_hamiltonian(&ZfsParams::new(3.47e9, 0.0).unwrap()).unwrap();
        let f = transition_frequencies(&zfs).unwrap();
        assert!(f[0] < 1.0);
        assert!((f[1] - 3.47e9).abs() < 1.0 && (f[2] - 3.47e9).abs() < 1.0);
    }
}
