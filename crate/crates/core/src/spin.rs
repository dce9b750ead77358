//! Small dense complex linear algebra for spin systems.
//!
//! Everything here works on dense `dim × dim` matrices. The spaces of
//! interest are tiny (a two-level reduction, the spin-1 triplet, and the
//! 81-dimensional electron ⊗ three ¹⁴N product space), so Hermitian
//! exponentials are taken through a full eigendecomposition.
//!
//! # Basis convention
//!
//! Every spin slot uses the `|s, m⟩` basis with `m` **descending**: for the
//! electron triplet the index order is `|+1⟩, |0⟩, |−1⟩`. Product spaces are
//! ordered electron first, then nuclei in the order they were declared, with
//! the last slot varying fastest (standard Kronecker order).

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

use crate::constants::TOL;

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("spin quantum number {0} is not a non-negative half-integer")]
    InvalidSpin(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("operator is not Hermitian (max deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },
    #[error("operator is not unitary (max deviation {deviation:.3e})")]
    NotUnitary { deviation: f64 },
    #[error("invalid density matrix: {0}")]
    InvalidDensity(String),
    #[error("slot {slot} out of range for a system with {slots} slots")]
    BadSlot { slot: usize, slots: usize },
    #[error("eigendecomposition did not converge")]
    NoConvergence,
    #[error("entry count {found} does not form a square matrix")]
    NotSquare { found: usize },
}

/// A spin quantum number, stored as `2s` so half-integers are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Spin {
    twice: u32,
}

impl Spin {
    pub const HALF: Spin = Spin { twice: 1 };
    pub const ONE: Spin = Spin { twice: 2 };

    pub fn new(s: f64) -> Result<Self, SpinError> {
        let twice = 2.0 * s;
        if !s.is_finite() || s < 0.0 || (twice - twice.round()).abs() > 1e-12 {
            return Err(SpinError::InvalidSpin(s));
        }
        Ok(Spin {
            twice: twice.round() as u32,
        })
    }

    pub fn value(self) -> f64 {
        self.twice as f64 / 2.0
    }

    /// Multiplicity `2s + 1`.
    pub fn dim(self) -> usize {
        self.twice as usize + 1
    }
}

/// Dense square complex matrix.
#[derive(Clone, PartialEq)]
pub struct Operator {
    m: DMatrix<C64>,
}

impl fmt::Debug for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Operator(dim={}){}", self.dim(), self.m)
    }
}

impl Operator {
    pub fn zeros(dim: usize) -> Self {
        Operator {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Operator {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> C64) -> Self {
        Operator {
            m: DMatrix::from_fn(dim, dim, f),
        }
    }

    /// Builds from row-major entries; the length must be a perfect square.
    pub fn from_row_major(entries: &[C64]) -> Result<Self, SpinError> {
        let dim = (entries.len() as f64).sqrt().round() as usize;
        if dim * dim != entries.len() || dim == 0 {
            return Err(SpinError::NotSquare {
                found: entries.len(),
            });
        }
        Ok(Operator {
            m: DMatrix::from_row_slice(dim, dim, entries),
        })
    }

    pub fn from_real_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Operator::from_fn(n, |i, j| if i == j { C64::new(diag[i], 0.0) } else { ZERO })
    }

    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self, SpinError> {
        if m.nrows() != m.ncols() {
            return Err(SpinError::NotSquare {
                found: m.nrows() * m.ncols(),
            });
        }
        Ok(Operator { m })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.m[(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: C64) {
        self.m[(row, col)] = value;
    }

    pub fn adjoint(&self) -> Operator {
        Operator {
            m: self.m.adjoint(),
        }
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn scale(&self, k: f64) -> Operator {
        Operator { m: &self.m * C64::new(k, 0.0) }
    }

    pub fn scale_c(&self, k: C64) -> Operator {
        Operator { m: &self.m * k }
    }

    pub fn commutator(&self, other: &Operator) -> Operator {
        Operator {
            m: &self.m * &other.m - &other.m * &self.m,
        }
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Operator) -> Operator {
        Operator {
            m: self.m.kronecker(&other.m),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise distance to another operator of the same dimension.
    pub fn max_abs_diff(&self, other: &Operator) -> f64 {
        self.m
            .iter()
            .zip(other.m.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }

    /// Relative check: `max|H − H†| ≤ tol · max(1, max|H|)`.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_deviation() <= tol * self.max_abs().max(1.0)
    }

    pub fn unitarity_deviation(&self) -> f64 {
        let prod = Operator {
            m: &self.m * self.m.adjoint(),
        };
        prod.max_abs_diff(&Operator::identity(self.dim()))
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_deviation() <= tol
    }

    fn require_hermitian(&self) -> Result<(), SpinError> {
        if self.is_hermitian(TOL.hermitian) {
            Ok(())
        } else {
            Err(SpinError::NotHermitian {
                deviation: self.hermiticity_deviation(),
            })
        }
    }

    /// Eigendecomposition of a Hermitian operator.
    pub fn eigh(&self) -> Result<Eigh, SpinError> {
        self.require_hermitian()?;
        let herm = (&self.m + self.m.adjoint()) * C64::new(0.5, 0.0);
        let eig = SymmetricEigen::try_new(herm, 1e-15, 0).ok_or(SpinError::NoConvergence)?;
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let n = self.dim();
        let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok(Eigh { values, vectors })
    }

    pub fn eigenvalues_hermitian(&self) -> Result<Vec<f64>, SpinError> {
        Ok(self.eigh()?.values)
    }

    /// `⟨ψ|A|ψ⟩` for a column state.
    pub fn expectation_state(&self, psi: &DVector<C64>) -> C64 {
        (psi.adjoint() * &self.m * psi)[(0, 0)]
    }
}

/// Eigenvalues (ascending) and the matching orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: DMatrix<C64>,
}

impl Eigh {
    /// `V f(Λ) V†` for a scalar function of the eigenvalues.
    pub fn map(&self, f: impl Fn(f64) -> C64) -> Operator {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &lambda) in self.values.iter().enumerate() {
            let w = f(lambda);
            for i in 0..n {
                scaled[(i, j)] *= w;
            }
        }
        Operator {
            m: scaled * self.vectors.adjoint(),
        }
    }
}

impl Add for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        Operator { m: &self.m + &rhs.m }
    }
}

impl Sub for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        Operator { m: &self.m - &rhs.m }
    }
}

impl Mul for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        Operator { m: &self.m * &rhs.m }
    }
}

impl Neg for &Operator {
    type Output = Operator;
    fn neg(self) -> Operator {
        Operator { m: -&self.m }
    }
}

impl Add for Operator {
    type Output = Operator;
    fn add(self, rhs: Operator) -> Operator {
        Operator { m: self.m + rhs.m }
    }
}

impl Sub for Operator {
    type Output = Operator;
    fn sub(self, rhs: Operator) -> Operator {
        Operator { m: self.m - rhs.m }
    }
}

impl Mul for Operator {
    type Output = Operator;
    fn mul(self, rhs: Operator) -> Operator {
        Operator { m: self.m * rhs.m }
    }
}

/// Pauli matrices `σx, σy, σz` in the basis `|0⟩, |1⟩`.
pub fn pauli() -> [Operator; 3] {
    let sx = Operator::from_row_major(&[ZERO, ONE, ONE, ZERO]).unwrap();
    let sy = Operator::from_row_major(&[ZERO, -I, I, ZERO]).unwrap();
    let sz = Operator::from_row_major(&[ONE, ZERO, ZERO, -ONE]).unwrap();
    [sx, sy, sz]
}

#[derive(Debug, Clone)]
pub struct SpinOperators {
    pub sx: Operator,
    pub sy: Operator,
    pub sz: Operator,
}

impl SpinOperators {
    pub fn as_array(&self) -> [&Operator; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

/// Angular-momentum matrices for spin `s` in the descending `|s, m⟩` basis.
pub fn spin_operators(s: f64) -> Result<SpinOperators, SpinError> {
    Ok(spin_matrices(Spin::new(s)?))
}

pub fn spin_matrices(spin: Spin) -> SpinOperators {
    let s = spin.value();
    let n = spin.dim();
    let m_of = |i: usize| s - i as f64;
    // S+ |m⟩ = sqrt(s(s+1) - m(m+1)) |m+1⟩; |m+1⟩ sits one index lower.
    let mut sp = DMatrix::<C64>::zeros(n, n);
    for i in 1..n {
        let m = m_of(i);
        sp[(i - 1, i)] = C64::new((s * (s + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm) * C64::new(0.5, 0.0);
    let sy = (&sp - &sm) * C64::new(0.0, -0.5);
    let sz = DMatrix::from_fn(n, n, |i, j| if i == j { C64::new(m_of(i), 0.0) } else { ZERO });
    SpinOperators {
        sx: Operator { m: sx },
        sy: Operator { m: sy },
        sz: Operator { m: sz },
    }
}

/// An electron spin coupled to a list of nuclear spins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSystem {
    pub electron: Spin,
    pub nuclei: Vec<Spin>,
}

/// Which factor of the product space an operator acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Electron,
    Nucleus(usize),
}

impl SpinSystem {
    pub fn new(electron: Spin, nuclei: Vec<Spin>) -> Self {
        SpinSystem { electron, nuclei }
    }

    /// S = 1 electron with three I = 1 nitrogen nuclei (81 states).
    pub fn boron_vacancy() -> Self {
        SpinSystem::new(Spin::ONE, vec![Spin::ONE; 3])
    }

    pub fn slot_dims(&self) -> Vec<usize> {
        std::iter::once(self.electron.dim())
            .chain(self.nuclei.iter().map(|n| n.dim()))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.slot_dims().iter().product()
    }

    fn slot_index(&self, slot: Slot) -> Result<usize, SpinError> {
        match slot {
            Slot::Electron => Ok(0),
            Slot::Nucleus(k) if k < self.nuclei.len() => Ok(k + 1),
            Slot::Nucleus(k) => Err(SpinError::BadSlot {
                slot: k + 1,
                slots: self.nuclei.len() + 1,
            }),
        }
    }
}

/// Places `op` on one slot of `system`, with identities on every other slot.
pub fn embed(op: &Operator, slot: Slot, system: &SpinSystem) -> Result<Operator, SpinError> {
    let dims = system.slot_dims();
    let idx = system.slot_index(slot)?;
    if op.dim() != dims[idx] {
        return Err(SpinError::DimensionMismatch {
            expected: dims[idx],
            found: op.dim(),
        });
    }
    let mut out = Operator::identity(1);
    for (k, &d) in dims.iter().enumerate() {
        out = if k == idx { out.kron(op) } else { out.kron(&Operator::identity(d)) };
    }
    Ok(out)
}

/// `exp(−i H t)` for Hermitian `H` in rad/s and `t` in seconds.
pub fn expm_hermitian(h: &Operator, t: f64) -> Result<Operator, SpinError> {
    let eig = h.eigh()?;
    Ok(eig.map(|lambda| C64::from_polar(1.0, -lambda * t)))
}

/// Hermitian, unit-trace, positive semidefinite operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    pub fn new(op: Operator) -> Result<Self, SpinError> {
        let tr = op.trace();
        if (tr - ONE).norm() > TOL.trace {
            return Err(SpinError::InvalidDensity(format!("trace {tr} != 1")));
        }
        if !op.is_hermitian(TOL.hermitian) {
            return Err(SpinError::InvalidDensity(format!(
                "not Hermitian (deviation {:.3e})",
                op.hermiticity_deviation()
            )));
        }
        let min = op.eigenvalues_hermitian()?.into_iter().fold(f64::INFINITY, f64::min);
        if min < -TOL.psd_slack {
            return Err(SpinError::InvalidDensity(format!("negative eigenvalue {min:.3e}")));
        }
        Ok(DensityMatrix { op })
    }

    /// `|ψ⟩⟨ψ|` for a normalised state (normalised here if it is not).
    pub fn pure(psi: &[C64]) -> Result<Self, SpinError> {
        let v = DVector::from_column_slice(psi);
        let norm = v.norm();
        if norm == 0.0 {
            return Err(SpinError::InvalidDensity("zero state vector".into()));
        }
        let v = v / C64::new(norm, 0.0);
        DensityMatrix::new(Operator { m: &v * v.adjoint() })
    }

    /// `|k⟩⟨k|` in a space of dimension `dim`.
    pub fn basis_state(dim: usize, k: usize) -> Self {
        let mut op = Operator::zeros(dim);
        op.set(k, k, ONE);
        DensityMatrix { op }
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        DensityMatrix {
            op: Operator::identity(dim).scale(1.0 / dim as f64),
        }
    }

    pub(crate) fn from_trusted(op: Operator) -> Self {
        DensityMatrix { op }
    }

    pub fn op(&self) -> &Operator {
        &self.op
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn population(&self, k: usize) -> f64 {
        self.op.get(k, k).re
    }

    /// `Tr(ρ A)`.
    pub fn expectation(&self, a: &Operator) -> C64 {
        (&self.op * a).trace()
    }
}

/// `U ρ U†`.
pub fn evolve(rho: &DensityMatrix, u: &Operator) -> Result<DensityMatrix, SpinError> {
    if u.dim() != rho.dim() {
        return Err(SpinError::DimensionMismatch {
            expected: rho.dim(),
            found: u.dim(),
        });
    }
    let dev = u.unitarity_deviation();
    if dev > TOL.unitary {
        return Err(SpinError::NotUnitary { deviation: dev });
    }
    Ok(DensityMatrix {
        op: &(u * &rho.op) * &u.adjoint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn spin_one_sz_is_diagonal_descending() {
        let s = spin_operators(1.0).unwrap();
        let expected = Operator::from_real_diagonal(&[1.0, 0.0, -1.0]);
        assert!(s.sz.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn spin_half_sx_is_half_pauli() {
        let s = spin_operators(0.5).unwrap();
        let [px, py, pz] = pauli();
        assert!(s.sx.max_abs_diff(&px.scale(0.5)) < 1e-15);
        assert!(s.sy.max_abs_diff(&py.scale(0.5)) < 1e-15);
        assert!(s.sz.max_abs_diff(&pz.scale(0.5)) < 1e-15);
    }

    #[test]
    fn commutation_relation_spin_one() {
        let s = spin_operators(1.0).unwrap();
        let lhs = s.sx.commutator(&s.sy);
        let rhs = s.sz.scale_c(I);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn casimir() {
        for s in [0.5, 1.0, 1.5, 2.0] {
            let ops = spin_operators(s).unwrap();
            let sq = &(&(&ops.sx * &ops.sx) + &(&ops.sy * &ops.sy)) + &(&ops.sz * &ops.sz);
            let target = Operator::identity(ops.sz.dim()).scale(s * (s + 1.0));
            assert!(sq.max_abs_diff(&target) < 1e-12, "s = {s}");
        }
    }

    #[test]
    fn rejects_non_half_integer_spin() {
        assert!(matches!(spin_operators(0.3), Err(SpinError::InvalidSpin(_))));
        assert!(matches!(spin_operators(-1.0), Err(SpinError::InvalidSpin(_))));
    }

    #[test]
    fn embed_electron_sz_in_full_system() {
        let sys = SpinSystem::boron_vacancy();
        assert_eq!(sys.dim(), 81);
        let sz = embed(&spin_operators(1.0).unwrap().sz, Slot::Electron, &sys).unwrap();
        // |m_S = +1⟩ ⊗ any nuclear state occupies indices 0..27.
        for k in 0..27 {
            assert!((sz.get(k, k).re - 1.0).abs() < 1e-15);
        }
        for k in 27..54 {
            assert!(sz.get(k, k).norm() < 1e-15);
        }
    }

    #[test]
    fn embed_identity_and_trace_factorisation() {
        let sys = SpinSystem::boron_vacancy();
        let id = embed(&Operator::identity(3), Slot::Nucleus(1), &sys).unwrap();
        assert!(id.max_abs_diff(&Operator::identity(81)) < 1e-15);

        let a = Operator::from_fn(3, |i, j| C64::new((i + 2 * j) as f64, i as f64 - j as f64));
        let big = embed(&a, Slot::Nucleus(2), &sys).unwrap();
        assert!((big.trace() - a.trace() * 27.0).norm() < 1e-12);
    }

    #[test]
    fn embed_dimension_mismatch() {
        let sys = SpinSystem::boron_vacancy();
        let half = spin_operators(0.5).unwrap().sz;
        assert!(matches!(
            embed(&half, Slot::Electron, &sys),
            Err(SpinError::DimensionMismatch { expected: 3, found: 2 })
        ));
        assert!(matches!(
            embed(&Operator::identity(3), Slot::Nucleus(3), &sys),
            Err(SpinError::BadSlot { .. })
        ));
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let u = expm_hermitian(&Operator::zeros(3), 1.234).unwrap();
        assert!(u.max_abs_diff(&Operator::identity(3)) < 1e-15);
    }

    #[test]
    fn pi_rotation_about_y_flips_ground_state() {
        let omega = 2.0 * PI * 67e6;
        let [_, sy, _] = pauli();
        let u = expm_hermitian(&sy.scale(omega / 2.0), PI / omega).unwrap();
        let rho = evolve(&DensityMatrix::basis_state(2, 0), &u).unwrap();
        assert!((rho.population(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expm_rejects_non_hermitian() {
        let a = Operator::from_row_major(&[ZERO, ONE, ZERO, ZERO]).unwrap();
        assert!(matches!(expm_hermitian(&a, 1.0), Err(SpinError::NotHermitian { .. })));
    }

    #[test]
    fn evolve_identity_leaves_state() {
        let rho = DensityMatrix::pure(&[C64::new(0.6, 0.0), C64::new(0.0, 0.8)]).unwrap();
        let out = evolve(&rho, &Operator::identity(2)).unwrap();
        assert!(out.op().max_abs_diff(rho.op()) < 1e-15);
    }

    #[test]
    fn evolve_dimension_and_unitarity_errors() {
        let rho = DensityMatrix::maximally_mixed(2);
        assert!(matches!(
            evolve(&rho, &Operator::identity(3)),
            Err(SpinError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            evolve(&rho, &Operator::identity(2).scale(2.0)),
            Err(SpinError::NotUnitary { .. })
        ));
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(Operator::identity(2)).is_err());
        assert!(DensityMatrix::new(Operator::from_real_diagonal(&[1.5, -0.5])).is_err());
        assert!(DensityMatrix::new(Operator::from_real_diagonal(&[0.25, 0.75])).is_ok());
    }
}
