//! Potential energies: the logistic-regression posterior, its case subsets,
//! Gaussian targets and the residual left over after a Gaussian approximation.
//!
//! Parameters are laid out as `θ = (α, β₁, …, β_p)`. Internally each case is
//! treated as the augmented row `x̃_i = (1, x_i)` so the intercept follows the
//! same formulas as the coefficients.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::Dataset;
use crate::gaussian_flow::{symmetric_eigen, FlowError};
use crate::samplers::SplitPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter vector contains a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("case index {index} out of range for {n} cases")]
    CaseOutOfRange { index: usize, n: usize },
    #[error("prior standard deviations must be positive and finite (got α: {0}, β: {1})")]
    InvalidPrior(f64, f64),
}

/// A differentiable potential energy `U(q)`, the negative log of an
/// unnormalized target density.
pub trait Potential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError>;
    fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
}

fn check_params(q: &DVector<f64>, expected: usize) -> Result<(), ModelError> {
    if q.len() != expected {
        return Err(ModelError::DimensionMismatch {
            expected,
            found: q.len(),
        });
    }
    match q.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ModelError::NonFinite(i)),
        None => Ok(()),
    }
}

/// `1 / (1 + e^{−z})` without overflow for large `|z|`.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Independent zero-mean Gaussian priors on the intercept and on each coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    sigma_alpha: f64,
    sigma_beta: f64,
}

impl Prior {
    pub fn new(sigma_alpha: f64, sigma_beta: f64) -> Result<Self, ModelError> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !ok(sigma_alpha) || !ok(sigma_beta) {
            return Err(ModelError::InvalidPrior(sigma_alpha, sigma_beta));
        }
        Ok(Self {
            sigma_alpha,
            sigma_beta,
        })
    }

    pub fn sigma_alpha(&self) -> f64 {
        self.sigma_alpha
    }

    pub fn sigma_beta(&self) -> f64 {
        self.sigma_beta
    }

    fn precision(&self, index: usize) -> f64 {
        if index == 0 {
            self.sigma_alpha.powi(-2)
        } else {
            self.sigma_beta.powi(-2)
        }
    }
}

impl Default for Prior {
    /// Standard deviation 5 for both α and every β_j.
    fn default() -> Self {
        Self {
            sigma_alpha: 5.0,
            sigma_beta: 5.0,
        }
    }
}

/// Negative log posterior (or log likelihood) of a logistic regression over a
/// subset of cases, with an optional Gaussian prior.
///
/// The selected rows are copied into a contiguous block at construction, so a
/// term is self-contained and can be shared between threads.
#[derive(Clone, Debug)]
pub struct PotentialTerm {
    design: DMatrix<f64>,
    labels: DVector<f64>,
    cases: Option<Vec<usize>>,
    prior: Option<Prior>,
}

impl PotentialTerm {
    /// The full posterior potential `U(θ)`: every case plus the prior.
    pub fn posterior(data: &Dataset, prior: Prior) -> Self {
        Self {
            design: data.x().clone(),
            labels: data.y().clone(),
            cases: None,
            prior: Some(prior),
        }
    }

    /// Negative log likelihood of every case, without a prior.
    pub fn likelihood(data: &Dataset) -> Self {
        Self {
            design: data.x().clone(),
            labels: data.y().clone(),
            cases: None,
            prior: None,
        }
    }

    /// A term over the listed cases. An empty list gives a pure prior (or zero) term.
    pub fn subset(data: &Dataset, cases: &[usize], prior: Option<Prior>) -> Result<Self, ModelError> {
        let n = data.n_cases();
        if let Some(&index) = cases.iter().find(|&&i| i >= n) {
            return Err(ModelError::CaseOutOfRange { index, n });
        }
        let design = data.x().select_rows(cases.iter());
        let labels = DVector::from_iterator(cases.len(), cases.iter().map(|&i| data.y()[i]));
        Ok(Self {
            design,
            labels,
            cases: Some(cases.to_vec()),
            prior,
        })
    }

    /// `(U₀, U₁)` for a data split. The prior goes into `U₀` only, so the two
    /// terms add up to the full posterior potential.
    pub fn split(data: &Dataset, prior: Prior, plan: &SplitPlan) -> Result<(Self, Self), ModelError> {
        let inner = Self::subset(data, plan.r0(), Some(prior))?;
        let outer = Self::subset(data, plan.r1(), None)?;
        Ok((inner, outer))
    }

    pub fn prior(&self) -> Option<&Prior> {
        self.prior.as_ref()
    }

    /// Case indices covered, or `None` for all cases.
    pub fn cases(&self) -> Option<&[usize]> {
        self.cases.as_deref()
    }

    pub fn n_cases(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.design.ncols() + 1
    }

    fn logits(&self, theta: &DVector<f64>) -> DVector<f64> {
        let beta = theta.rows(1, self.design.ncols());
        let mut z = &self.design * beta;
        z.add_scalar_mut(theta[0]);
        z
    }

    fn prior_energy(&self, theta: &DVector<f64>) -> f64 {
        match &self.prior {
            Some(prior) => theta
                .iter()
                .enumerate()
                .map(|(j, v)| 0.5 * v * v * prior.precision(j))
                .sum(),
            None => 0.0,
        }
    }

    /// `−Σ_i [y_i z_i − log(1 + e^{z_i})]` over the term's cases.
    fn data_energy(&self, theta: &DVector<f64>) -> f64 {
        self.logits(theta)
            .iter()
            .zip(self.labels.iter())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum()
    }

    pub fn potential(&self, theta: &DVector<f64>) -> Result<f64, ModelError> {
        check_params(theta, self.n_params())?;
        Ok(self.prior_energy(theta) + self.data_energy(theta))
    }

    /// Log likelihood of the term's cases; the prior is ignored.
    pub fn log_likelihood(&self, theta: &DVector<f64>) -> Result<f64, ModelError> {
        check_params(theta, self.n_params())?;
        Ok(-self.data_energy(theta))
    }

    pub fn grad_potential(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_params(theta, self.n_params())?;
        let residual = self.residuals(theta);
        let p = self.design.ncols();
        let mut grad = DVector::zeros(p + 1);
        grad[0] = -residual.sum();
        grad.rows_mut(1, p).copy_from(&(-self.design.tr_mul(&residual)));
        if let Some(prior) = &self.prior {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += theta[j] * prior.precision(j);
            }
        }
        Ok(grad)
    }

    /// `y_i − μ_i` for every case of the term.
    fn residuals(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut r = self.logits(theta);
        for (z, &y) in r.iter_mut().zip(self.labels.iter()) {
            *z = y - logistic(*z);
        }
        r
    }

    /// `diag(prior precisions) + Σ_i μ_i(1 − μ_i) x̃_i x̃_iᵀ`.
    ///
    /// Only the upper triangle is accumulated; the lower one is a copy, so the
    /// result is exactly symmetric.
    pub fn hessian_potential(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        check_params(theta, self.n_params())?;
        let dim = self.n_params();
        let p = dim - 1;
        let z = self.logits(theta);
        let weights = z.map(|z| {
            let mu = logistic(z);
            mu * (1.0 - mu)
        });
        let mut weighted = self.design.clone();
        for (mut column, _) in weighted.column_iter_mut().zip(0..p) {
            column.component_mul_assign(&weights);
        }
        let mut hess = DMatrix::zeros(dim, dim);
        hess[(0, 0)] = weights.sum();
        for j in 0..p {
            hess[(0, j + 1)] = weighted.column(j).sum();
            for k in j..p {
                hess[(j + 1, k + 1)] = weighted.column(j).dot(&self.design.column(k));
            }
        }
        for j in 0..dim {
            for k in 0..j {
                hess[(j, k)] = hess[(k, j)];
            }
        }
        if let Some(prior) = &self.prior {
            for j in 0..dim {
                hess[(j, j)] += prior.precision(j);
            }
        }
        Ok(hess)
    }
}

impl Potential for PotentialTerm {
    fn dim(&self) -> usize {
        self.n_params()
    }

    fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError> {
        self.potential(q)
    }

    fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.grad_potential(q)
    }
}

/// `U(q) = ½ (q − μ)ᵀ P (q − μ)` for a symmetric precision matrix `P`.
///
/// `P` only needs to be positive semi-definite, which lets a Gaussian be cut
/// into several quadratic pieces.
#[derive(Clone, Debug)]
pub struct GaussianPotential {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl GaussianPotential {
    pub fn new(mean: DVector<f64>, precision: DMatrix<f64>) -> Self {
        assert_eq!(precision.nrows(), mean.len(), "precision must match the mean");
        assert!(precision.is_square(), "precision must be square");
        Self { mean, precision }
    }

    /// Builds the potential of `N(mean, covariance)`.
    ///
    /// Panics if `covariance` is not invertible.
    pub fn from_covariance(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Self {
        let precision = covariance
            .clone()
            .try_inverse()
            .expect("covariance must be invertible");
        let precision = (&precision + precision.transpose()) * 0.5;
        Self::new(mean, precision)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// The approximation this potential is its own exact instance of.
    pub fn as_approx(&self) -> Result<GaussianApprox, FlowError> {
        GaussianApprox::new(self.mean.clone(), self.precision.clone())
    }
}

impl Potential for GaussianPotential {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError> {
        check_params(q, self.dim())?;
        let d = q - &self.mean;
        Ok(0.5 * d.dot(&(&self.precision * &d)))
    }

    fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        check_params(q, self.dim())?;
        Ok(&self.precision * (q - &self.mean))
    }
}

/// Sum of two potentials, e.g. the `U₀ + U₁` of a data split.
#[derive(Clone, Copy, Debug)]
pub struct SumPotential<'a, A, B> {
    pub first: &'a A,
    pub second: &'a B,
}

impl<A: Potential, B: Potential> Potential for SumPotential<'_, A, B> {
    fn dim(&self) -> usize {
        self.first.dim()
    }

    fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(self.first.value(q)? + self.second.value(q)?)
    }

    fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        Ok(self.first.gradient(q)? + self.second.gradient(q)?)
    }
}

/// A Gaussian approximation `N(q̂, J⁻¹)` around the posterior mode, stored
/// together with the spectral decomposition `J = V diag(λ) Vᵀ`.
#[derive(Clone, Debug)]
pub struct GaussianApprox {
    mode: DVector<f64>,
    hessian: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

impl GaussianApprox {
    /// Decomposes `hessian`; fails unless it is symmetric positive definite.
    pub fn new(mode: DVector<f64>, hessian: DMatrix<f64>) -> Result<Self, FlowError> {
        if hessian.nrows() != mode.len() || !hessian.is_square() {
            return Err(FlowError::DimensionMismatch {
                expected: mode.len(),
                found: hessian.nrows(),
            });
        }
        let (eigvecs, eigvals) = symmetric_eigen(&hessian)?;
        Ok(Self {
            mode,
            hessian,
            eigvecs,
            eigvals,
        })
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn mode(&self) -> &DVector<f64> {
        &self.mode
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    /// Eigenvalues in ascending order.
    pub fn eigvals(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// `U₀(q) = ½ (q − q̂)ᵀ J (q − q̂)`; the normalizing constant is dropped.
    pub fn energy(&self, q: &DVector<f64>) -> f64 {
        let d = q - &self.mode;
        0.5 * d.dot(&(&self.hessian * &d))
    }

    pub fn energy_gradient(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.hessian * (q - &self.mode)
    }
}

/// `∇U₁(θ) = ∇U(θ) − J(q̂)(θ − q̂)` for the normal-approximation split.
pub fn residual_grad<U: Potential>(
    theta: &DVector<f64>,
    full: &U,
    approx: &GaussianApprox,
) -> Result<DVector<f64>, ModelError> {
    if approx.dim() != full.dim() {
        return Err(ModelError::DimensionMismatch {
            expected: full.dim(),
            found: approx.dim(),
        });
    }
    Ok(full.gradient(theta)? - approx.energy_gradient(theta))
}

/// `U₁ = U − U₀`, the part of the potential the Gaussian approximation misses.
#[derive(Clone, Copy, Debug)]
pub struct ResidualPotential<'a, U> {
    pub full: &'a U,
    pub approx: &'a GaussianApprox,
}

impl<U: Potential> Potential for ResidualPotential<'_, U> {
    fn dim(&self) -> usize {
        self.full.dim()
    }

    fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(self.full.value(q)? - self.approx.energy(q))
    }

    fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        residual_grad(q, self.full, self.approx)
    }
}
