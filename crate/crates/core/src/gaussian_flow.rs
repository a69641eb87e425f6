//! Exact Hamiltonian flow for `H₂(q, p) = ½ (q − q̂)ᵀ J (q − q̂) + ½ pᵀp`.
//!
//! Hamilton's equations for `H₂` are linear. Rather than diagonalizing the
//! `2d × 2d` block matrix `[[0, I], [−J, 0]]`, whose eigenvalues are purely
//! imaginary, we decompose the symmetric `J = V diag(λ) Vᵀ`. In the rotated
//! coordinates `q̃ = Vᵀ(q − q̂)`, `p̃ = Vᵀp` every mode is an independent
//! harmonic oscillator with angular frequency `ω_k = √λ_k`, and the flow over a
//! time `t` is a 2×2 rotation per mode. All arithmetic stays real.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::GaussianApprox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e}, largest {largest:e})")]
    NotPositiveDefinite { eigenvalue: f64, largest: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix must be non-empty and finite")]
    Degenerate,
}

const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues at or below this fraction of the largest one are rejected.
const EIGEN_FLOOR: f64 = 1e-12;

/// Eigendecomposition of a symmetric positive-definite matrix.
///
/// Returns `(V, λ)` with `λ` ascending and the columns of `V` the matching
/// orthonormal eigenvectors.
pub fn symmetric_eigen(j: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), FlowError> {
    if j.is_empty() || !j.is_square() {
        return Err(FlowError::Degenerate);
    }
    if j.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::Degenerate);
    }
    let scale = j.amax().max(1.0);
    let asymmetry = (j - j.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(FlowError::NotSymmetric(asymmetry));
    }
    let eigen = j.clone().symmetric_eigen();
    let n = j.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eigen.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eigen.eigenvectors.column(src));
    }
    let largest = values[n - 1];
    let smallest = values[0];
    if largest <= 0.0 || smallest <= EIGEN_FLOOR * largest {
        return Err(FlowError::NotPositiveDefinite {
            eigenvalue: smallest,
            largest,
        });
    }
    Ok((vectors, values))
}

/// A point `(q, p)` in phase space. Mass is the identity throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub q: DVector<f64>,
    pub p: DVector<f64>,
}

impl PhaseState {
    pub fn new(q: DVector<f64>, p: DVector<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "position and momentum lengths differ");
        Self { q, p }
    }

    pub fn kinetic(&self) -> f64 {
        0.5 * self.p.norm_squared()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.p.iter()).all(|v| v.is_finite())
    }
}

/// The time-`t` flow map of the quadratic Hamiltonian defined by an approximation.
///
/// The per-mode cosines and sines are computed once at construction.
#[derive(Clone, Debug)]
pub struct FlowOperator<'a> {
    approx: &'a GaussianApprox,
    duration: f64,
    omega: DVector<f64>,
    cos: DVector<f64>,
    sin: DVector<f64>,
}

impl<'a> FlowOperator<'a> {
    pub fn new(approx: &'a GaussianApprox, duration: f64) -> Self {
        let omega = approx.eigvals().map(f64::sqrt);
        let cos = omega.map(|w| (w * duration).cos());
        let sin = omega.map(|w| (w * duration).sin());
        Self {
            approx,
            duration,
            omega,
            cos,
            sin,
        }
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn frequencies(&self) -> &DVector<f64> {
        &self.omega
    }

    pub fn approx(&self) -> &'a GaussianApprox {
        self.approx
    }

    /// `½ (q − q̂)ᵀ J (q − q̂) + ½ pᵀp`.
    pub fn energy(&self, state: &PhaseState) -> f64 {
        self.approx.energy(&state.q) + state.kinetic()
    }

    /// Advances `state` in place by the operator's duration.
    pub fn apply(&self, state: &mut PhaseState) {
        let v = self.approx.eigvecs();
        let mode = self.approx.mode();
        let mut q_rot = v.tr_mul(&(&state.q - mode));
        let mut p_rot = v.tr_mul(&state.p);
        for k in 0..q_rot.len() {
            let (c, s, w) = (self.cos[k], self.sin[k], self.omega[k]);
            let (q0, p0) = (q_rot[k], p_rot[k]);
            q_rot[k] = q0 * c + p0 / w * s;
            p_rot[k] = -w * q0 * s + p0 * c;
        }
        state.q = v * q_rot + mode;
        state.p = v * p_rot;
    }
}

/// Returns the state after following the exact flow of `op`.
pub fn exact_flow(state: &PhaseState, op: &FlowOperator<'_>) -> PhaseState {
    assert_eq!(state.q.len(), op.approx.dim(), "state dimension does not match the flow");
    let mut out = state.clone();
    op.apply(&mut out);
    out
}
