//! Posterior mode by damped Newton–Raphson.

use nalgebra::DVector;
use thiserror::Error;

use crate::gaussian_flow::FlowError;
use crate::model::{GaussianApprox, ModelError, PotentialTerm};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("MAP estimation needs a potential term that includes the prior")]
    MissingPrior,
    #[error("invalid optimizer options: {0}")]
    InvalidOptions(&'static str),
    #[error("Newton iteration did not converge after {iterations} iterations (gradient ∞-norm {grad_norm:e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        last: DVector<f64>,
    },
    #[error("Hessian is not positive definite at iteration {0}")]
    SingularHessian(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Clone, Copy, Debug)]
pub struct MapOptions {
    /// Stop once `‖∇U‖∞` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            max_halvings: 30,
        }
    }
}

/// Result of [`find_map`]: the approximation at the mode plus the iteration trace.
#[derive(Clone, Debug)]
pub struct MapFit {
    pub approx: GaussianApprox,
    /// Newton steps taken.
    pub iterations: usize,
    pub grad_norm: f64,
    /// Potential at the start and after every accepted step.
    pub potentials: Vec<f64>,
}

/// Slack for accepting a step whose potential change is lost in rounding.
fn rounding_slack(u: f64) -> f64 {
    1e-12 * (1.0 + u.abs())
}

/// Minimizes `term` starting from `init` with damped Newton steps
/// `θ ← θ − s·H⁻¹∇U`, halving `s` until the potential does not increase.
pub fn find_map(term: &PotentialTerm, init: &DVector<f64>, options: MapOptions) -> Result<MapFit, MapError> {
    if term.prior().is_none() {
        return Err(MapError::MissingPrior);
    }
    if !(options.tol > 0.0) {
        return Err(MapError::InvalidOptions("tol must be positive"));
    }
    if options.max_iter == 0 {
        return Err(MapError::InvalidOptions("max_iter must be at least 1"));
    }

    let mut theta = init.clone();
    let mut u = term.potential(&theta)?;
    let mut grad = term.grad_potential(&theta)?;
    let mut potentials = vec![u];
    let mut iterations = 0;

    while grad.amax() >= options.tol {
        if iterations == options.max_iter {
            return Err(MapError::NoConvergence {
                iterations,
                grad_norm: grad.amax(),
                last: theta,
            });
        }
        iterations += 1;
        let hess = term.hessian_potential(&theta)?;
        let direction = hess
            .cholesky()
            .ok_or(MapError::SingularHessian(iterations))?
            .solve(&grad);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let candidate = &theta - &direction * step;
            if let Ok(u_new) = term.potential(&candidate) {
                if u_new <= u + rounding_slack(u) {
                    accepted = Some((candidate, u_new));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((next, u_next)) = accepted else {
            // No descent along the Newton direction: θ is as good as rounding allows.
            return Err(MapError::NoConvergence {
                iterations,
                grad_norm: grad.amax(),
                last: theta,
            });
        };
        theta = next;
        u = u_next;
        grad = term.grad_potential(&theta)?;
        potentials.push(u);
    }

    let hessian = term.hessian_potential(&theta)?;
    let grad_norm = grad.amax();
    Ok(MapFit {
        approx: GaussianApprox::new(theta, hessian)?,
        iterations,
        grad_norm,
        potentials,
    })
}
