//! Shared numerical tolerances and physical constants.

/// Electron gyromagnetic ratio for g = 2, in Hz/T (ordinary frequency).
pub const GAMMA_ELECTRON: f64 = 28.0249e9;

/// Tolerances used by the predicate checks in [`crate::spin`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative Hermiticity tolerance: `max|H - H†| <= hermitian * max(1, max|H|)`.
    pub hermitian: f64,
    /// Absolute unit-trace tolerance for density matrices.
    pub trace: f64,
    /// Eigenvalues of a density matrix may dip this far below zero.
    pub psd_slack: f64,
    /// Absolute tolerance on `U U† - I`.
    pub unitary: f64,
}

pub const TOL: Tolerances = Tolerances {
    hermitian: 1e-10,
    trace: 1e-10,
    psd_slack: 1e-9,
    unitary: 1e-9,
};
