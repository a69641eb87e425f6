//! Transition kernels: standard HMC, split HMC with an exact Gaussian inner
//! flow, split HMC with nested leapfrog over a data split, and random-walk
//! Metropolis.
//!
//! Every HMC variant draws a fresh `p ~ N(0, I)`, integrates for `L` outer
//! steps and accepts with probability `min(1, exp(H(q, p) − H(q*, p*)))`
//! evaluated on the exact full potential. The final momentum negation is
//! omitted since `K(p) = K(−p)` and `p` is redrawn every iteration.
//!
//! A trajectory that produces any non-finite position, momentum, gradient or
//! energy is abandoned and counted as a divergent rejection.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::gaussian_flow::{FlowOperator, PhaseState};
use crate::model::{GaussianApprox, Potential, ResidualPotential, SumPotential};

/// Random stream used for chains and simulated data.
pub type ChainRng = ChaCha20Rng;

/// A reproducible stream for chain `stream` of an experiment seeded with `seed`.
pub fn chain_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChainRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("stepsize must be positive and finite, got {0}")]
    InvalidStepsize(f64),
    #[error("number of leapfrog steps must be at least 1")]
    NoSteps,
    #[error("number of inner steps must be at least 1")]
    NoInnerSteps,
    #[error("split index sets must partition 0..{n}: {reason}")]
    InvalidPartition { n: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryConfig {
    /// Nominal stepsize ε.
    pub epsilon: f64,
    /// Outer leapfrog steps L.
    pub steps: usize,
    /// Draw the stepsize from `Uniform(0.8ε, ε)` once per iteration.
    pub jitter: bool,
}

impl TrajectoryConfig {
    pub fn new(epsilon: f64, steps: usize, jitter: bool) -> Result<Self, SamplerError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(SamplerError::InvalidStepsize(epsilon));
        }
        if steps == 0 {
            return Err(SamplerError::NoSteps);
        }
        Ok(Self { epsilon, steps, jitter })
    }

    /// Nominal trajectory length `εL`.
    pub fn length(&self) -> f64 {
        self.epsilon * self.steps as f64
    }
}

/// A partition of the cases into `R₀` (inner, cheap, fine steps) and `R₁`
/// (outer, coarse kicks), with `M` inner steps per outer step.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    r0: Vec<usize>,
    r1: Vec<usize>,
    inner_steps: usize,
}

impl SplitPlan {
    pub fn new(r0: Vec<usize>, r1: Vec<usize>, inner_steps: usize) -> Result<Self, SamplerError> {
        if inner_steps == 0 {
            return Err(SamplerError::NoInnerSteps);
        }
        let n = r0.len() + r1.len();
        let mut seen = vec![false; n];
        for &i in r0.iter().chain(r1.iter()) {
            if i >= n {
                return Err(SamplerError::InvalidPartition {
                    n,
                    reason: format!("index {i} out of range"),
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(SamplerError::InvalidPartition {
                    n,
                    reason: format!("index {i} appears twice"),
                });
            }
        }
        Ok(Self { r0, r1, inner_steps })
    }

    pub fn r0(&self) -> &[usize] {
        &self.r0
    }

    pub fn r1(&self) -> &[usize] {
        &self.r1
    }

    pub fn inner_steps(&self) -> usize {
        self.inner_steps
    }

    pub fn n_cases(&self) -> usize {
        self.r0.len() + self.r1.len()
    }

    /// `f = |R₀| / n`.
    pub fn fraction(&self) -> f64 {
        self.r0.len() as f64 / self.n_cases() as f64
    }
}

/// Which potential a cached kick gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum KickKind {
    Full,
    Residual,
    Outer,
}

/// Current position of one chain with its potential and random stream.
///
/// The gradient used by the last kick of an accepted trajectory is kept so the
/// next trajectory can start without recomputing it. A state is meant to be
/// driven by a single kernel; switching kernels just recomputes the gradient.
#[derive(Clone, Debug)]
pub struct ChainState {
    q: DVector<f64>,
    potential: f64,
    pub rng: ChainRng,
    kick: Option<(KickKind, DVector<f64>)>,
}

impl ChainState {
    /// Starts a chain at `q`, evaluating `U(q)` with `model`.
    pub fn new<U: Potential>(q: DVector<f64>, model: &U, rng: ChainRng) -> Result<Self, crate::model::ModelError> {
        let potential = model.value(&q)?;
        Ok(Self {
            q,
            potential,
            rng,
            kick: None,
        })
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    /// Cached `U(q)`.
    pub fn potential(&self) -> f64 {
        self.potential
    }

    fn kick_gradient<U: Potential>(&self, kind: KickKind, model: &U) -> Option<DVector<f64>> {
        match &self.kick {
            Some((k, g)) if *k == kind => Some(g.clone()),
            _ => model.gradient(&self.q).ok(),
        }
    }

    fn debug_check<U: Potential>(&self, model: &U) {
        if cfg!(debug_assertions) {
            if let Ok(u) = model.value(&self.q) {
                debug_assert!(
                    (u - self.potential).abs() <= 1e-8 * (1.0 + u.abs()),
                    "cached potential {} differs from {}",
                    self.potential,
                    u
                );
            }
        }
    }
}

/// Outcome of one iteration of a kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    /// Metropolis proposals made (1 for HMC, the update count for RWM).
    pub proposals: usize,
    /// Proposals accepted.
    pub accepted: usize,
    pub divergent: bool,
    /// `H(q*, p*) − H(q, p)`; NaN when the trajectory diverged or for RWM.
    pub delta_h: f64,
    /// Stepsize actually used.
    pub stepsize: f64,
}

impl Transition {
    pub fn is_accepted(&self) -> bool {
        self.accepted > 0
    }

    fn rejected(stepsize: f64, divergent: bool, delta_h: f64) -> Self {
        Self {
            proposals: 1,
            accepted: 0,
            divergent,
            delta_h,
            stepsize,
        }
    }
}

/// A trajectory left the finite reals at the given outer step (1-based).
#[derive(Clone, Copy, Debug, Error, PartialEq, Eq)]
#[error("trajectory diverged at step {step}")]
pub struct Divergence {
    pub step: usize,
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `p ← p − h·∇U`.
fn kick(p: &mut DVector<f64>, grad: &DVector<f64>, h: f64) {
    p.axpy(-h, grad, 1.0);
}

fn refresh_gradient<U: Potential>(model: &U, q: &DVector<f64>, grad: &mut DVector<f64>) -> bool {
    match model.gradient(q) {
        Ok(g) if all_finite(&g) => {
            *grad = g;
            true
        }
        _ => false,
    }
}

/// One leapfrog step: half kick with `grad` (the gradient at the current `q`),
/// full drift `q += εp`, half kick with the gradient at the new `q`.
///
/// On return `grad` holds the gradient at the new position.
pub fn leapfrog_step<U: Potential>(
    state: &mut PhaseState,
    epsilon: f64,
    grad: &mut DVector<f64>,
    model: &U,
) -> Result<(), Divergence> {
    kick(&mut state.p, grad, 0.5 * epsilon);
    state.q.axpy(epsilon, &state.p, 1.0);
    if !all_finite(&state.q) || !refresh_gradient(model, &state.q, grad) {
        return Err(Divergence { step: 1 });
    }
    kick(&mut state.p, grad, 0.5 * epsilon);
    if !all_finite(&state.p) {
        return Err(Divergence { step: 1 });
    }
    Ok(())
}

/// `steps` leapfrog steps of size `epsilon` on `model`.
pub fn leapfrog_trajectory<U: Potential>(
    model: &U,
    state: &mut PhaseState,
    grad: &mut DVector<f64>,
    epsilon: f64,
    steps: usize,
) -> Result<(), Divergence> {
    for step in 1..=steps {
        leapfrog_step(state, epsilon, grad, model).map_err(|_| Divergence { step })?;
    }
    Ok(())
}

/// Split leapfrog with an exact quadratic inner flow: for each of `steps`
/// outer steps, half kick with `∇U₁`, follow the exact flow of
/// `U₀ + K` for the operator's duration, half kick with `∇U₁`, where
/// `U₁ = U − U₀` is the residual of `model` against the operator's approximation.
///
/// `residual_grad` must hold `∇U₁` at the current position and is updated.
pub fn split_normal_trajectory<U: Potential>(
    model: &U,
    flow: &FlowOperator<'_>,
    state: &mut PhaseState,
    residual_grad: &mut DVector<f64>,
    steps: usize,
) -> Result<(), Divergence> {
    let residual = ResidualPotential {
        full: model,
        approx: flow.approx(),
    };
    let half = 0.5 * flow.duration();
    for step in 1..=steps {
        kick(&mut state.p, residual_grad, half);
        flow.apply(state);
        if !state.is_finite() || !refresh_gradient(&residual, &state.q, residual_grad) {
            return Err(Divergence { step });
        }
        kick(&mut state.p, residual_grad, half);
        if !all_finite(&state.p) {
            return Err(Divergence { step });
        }
    }
    Ok(())
}

/// Nested leapfrog for a split `U = U₀ + U₁`: for each of `steps` outer steps,
/// half kick of size `ε/2` with `∇U₁` (`outer`), then `inner_steps` leapfrog
/// steps of size `ε/M` on `U₀` (`inner`), then another `ε/2` kick with `∇U₁`.
///
/// `outer_grad` must hold `∇U₁` at the current position and is updated.
pub fn split_data_trajectory<A: Potential, B: Potential>(
    inner: &A,
    outer: &B,
    state: &mut PhaseState,
    outer_grad: &mut DVector<f64>,
    epsilon: f64,
    steps: usize,
    inner_steps: usize,
) -> Result<(), Divergence> {
    let mut inner_grad = DVector::zeros(state.q.len());
    if !refresh_gradient(inner, &state.q, &mut inner_grad) {
        return Err(Divergence { step: 1 });
    }
    let inner_eps = epsilon / inner_steps as f64;
    for step in 1..=steps {
        kick(&mut state.p, outer_grad, 0.5 * epsilon);
        for _ in 0..inner_steps {
            leapfrog_step(state, inner_eps, &mut inner_grad, inner).map_err(|_| Divergence { step })?;
        }
        if !refresh_gradient(outer, &state.q, outer_grad) {
            return Err(Divergence { step });
        }
        kick(&mut state.p, outer_grad, 0.5 * epsilon);
        if !all_finite(&state.p) {
            return Err(Divergence { step });
        }
    }
    Ok(())
}

/// Metropolis test on total energies: accept with probability
/// `min(1, exp(h_old − h_new))`. A non-finite `h_new` is always rejected.
pub fn metropolis_accept<R: Rng + ?Sized>(h_old: f64, h_new: f64, rng: &mut R) -> bool {
    if !h_new.is_finite() {
        return false;
    }
    let log_ratio = h_old - h_new;
    if log_ratio >= 0.0 {
        return true;
    }
    rng.random::<f64>() < log_ratio.exp()
}

/// `ε`, or a draw from `Uniform(0.8ε, ε)` when `jitter` is set.
pub fn draw_stepsize<R: Rng + ?Sized>(epsilon: f64, jitter: bool, rng: &mut R) -> f64 {
    if jitter {
        rng.random_range(0.8 * epsilon..=epsilon)
    } else {
        epsilon
    }
}

fn draw_momentum<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

/// Shared skeleton of the HMC variants: momentum refresh, trajectory, and the
/// Metropolis test on the exact potential `energy`.
fn hmc_transition<E, K, T>(
    state: &mut ChainState,
    config: &TrajectoryConfig,
    energy: &E,
    kind: KickKind,
    kick_potential: &K,
    trajectory: T,
) -> Transition
where
    E: Potential,
    K: Potential,
    T: FnOnce(&mut PhaseState, &mut DVector<f64>, f64) -> Result<(), Divergence>,
{
    state.debug_check(energy);
    let epsilon = draw_stepsize(config.epsilon, config.jitter, &mut state.rng);
    let momentum = draw_momentum(state.q.len(), &mut state.rng);
    let Some(start_grad) = state.kick_gradient(kind, kick_potential) else {
        return Transition::rejected(epsilon, true, f64::NAN);
    };
    let h_old = state.potential + 0.5 * momentum.norm_squared();

    let mut phase = PhaseState::new(state.q.clone(), momentum);
    let mut grad = start_grad.clone();
    if trajectory(&mut phase, &mut grad, epsilon).is_err() {
        state.kick = Some((kind, start_grad));
        return Transition::rejected(epsilon, true, f64::NAN);
    }
    let u_new = match energy.value(&phase.q) {
        Ok(u) if u.is_finite() => u,
        _ => {
            state.kick = Some((kind, start_grad));
            return Transition::rejected(epsilon, true, f64::NAN);
        }
    };
    let h_new = u_new + phase.kinetic();
    let delta_h = h_new - h_old;
    if !delta_h.is_finite() {
        state.kick = Some((kind, start_grad));
        return Transition::rejected(epsilon, true, f64::NAN);
    }
    if metropolis_accept(h_old, h_new, &mut state.rng) {
        state.q = phase.q;
        state.potential = u_new;
        state.kick = Some((kind, grad));
        Transition {
            proposals: 1,
            accepted: 1,
            divergent: false,
            delta_h,
            stepsize: epsilon,
        }
    } else {
        state.kick = Some((kind, start_grad));
        Transition::rejected(epsilon, false, delta_h)
    }
}

/// One iteration of standard HMC.
pub fn hmc_iteration<U: Potential>(state: &mut ChainState, config: &TrajectoryConfig, model: &U) -> Transition {
    let steps = config.steps;
    hmc_transition(state, config, model, KickKind::Full, model, |phase, grad, eps| {
        leapfrog_trajectory(model, phase, grad, eps, steps)
    })
}

/// One iteration of split HMC with the Gaussian approximation handled exactly.
///
/// The flow operator is rebuilt once per iteration for the (possibly jittered) stepsize.
pub fn split_normal_iteration<U: Potential>(
    state: &mut ChainState,
    config: &TrajectoryConfig,
    model: &U,
    approx: &GaussianApprox,
) -> Transition {
    let steps = config.steps;
    let residual = ResidualPotential { full: model, approx };
    hmc_transition(state, config, model, KickKind::Residual, &residual, |phase, grad, eps| {
        let flow = FlowOperator::new(approx, eps);
        split_normal_trajectory(model, &flow, phase, grad, steps)
    })
}

/// One iteration of split HMC over a data split `U = U₀ (inner) + U₁ (outer)`.
pub fn split_data_iteration<A: Potential, B: Potential>(
    state: &mut ChainState,
    config: &TrajectoryConfig,
    inner: &A,
    outer: &B,
    inner_steps: usize,
) -> Transition {
    let steps = config.steps;
    let full = SumPotential {
        first: inner,
        second: outer,
    };
    hmc_transition(state, config, &full, KickKind::Outer, outer, |phase, grad, eps| {
        split_data_trajectory(inner, outer, phase, grad, eps, steps, inner_steps)
    })
}

/// `updates` random-walk Metropolis updates with isotropic proposal sd `proposal_sd`.
pub fn rwm_iteration<U: Potential>(state: &mut ChainState, model: &U, proposal_sd: f64, updates: usize) -> Transition {
    let mut accepted = 0;
    let mut divergent = false;
    for _ in 0..updates {
        let step = draw_momentum(state.q.len(), &mut state.rng);
        let proposal = &state.q + step * proposal_sd;
        let u_new = match model.value(&proposal) {
            Ok(u) => u,
            Err(_) => {
                divergent = true;
                continue;
            }
        };
        if metropolis_accept(state.potential, u_new, &mut state.rng) {
            state.q = proposal;
            state.potential = u_new;
            accepted += 1;
        }
    }
    if accepted > 0 {
        state.kick = None;
    }
    Transition {
        proposals: updates,
        accepted,
        divergent,
        delta_h: f64::NAN,
        stepsize: proposal_sd,
    }
}

/// A Markov transition that can drive a [`ChainState`].
pub trait Kernel: Sync {
    fn transition(&self, state: &mut ChainState) -> Transition;
}

#[derive(Clone, Copy, Debug)]
pub struct Hmc<'a, U> {
    pub model: &'a U,
    pub config: TrajectoryConfig,
}

impl<U: Potential> Kernel for Hmc<'_, U> {
    fn transition(&self, state: &mut ChainState) -> Transition {
        hmc_iteration(state, &self.config, self.model)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitNormalHmc<'a, U> {
    pub model: &'a U,
    pub approx: &'a GaussianApprox,
    pub config: TrajectoryConfig,
}

impl<U: Potential> Kernel for SplitNormalHmc<'_, U> {
    fn transition(&self, state: &mut ChainState) -> Transition {
        split_normal_iteration(state, &self.config, self.model, self.approx)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SplitDataHmc<'a, A, B> {
    pub inner: &'a A,
    pub outer: &'a B,
    pub inner_steps: usize,
    pub config: TrajectoryConfig,
}

impl<A: Potential, B: Potential> Kernel for SplitDataHmc<'_, A, B> {
    fn transition(&self, state: &mut ChainState) -> Transition {
        split_data_iteration(state, &self.config, self.inner, self.outer, self.inner_steps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RandomWalk<'a, U> {
    pub model: &'a U,
    pub proposal_sd: f64,
    pub updates: usize,
}

impl<U: Potential> Kernel for RandomWalk<'_, U> {
    fn transition(&self, state: &mut ChainState) -> Transition {
        rwm_iteration(state, self.model, self.proposal_sd, self.updates)
    }
}

/// Samples and statistics collected by [`sample_chain`].
#[derive(Clone, Debug, Default)]
pub struct ChainOutput {
    /// State after every iteration.
    pub samples: Vec<DVector<f64>>,
    /// Whether each iteration moved the chain.
    pub moved: Vec<bool>,
    pub delta_h: Vec<f64>,
    pub proposals: usize,
    pub accepted: usize,
    pub divergences: usize,
    /// Wall time of the sampling loop.
    pub seconds: f64,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn seconds_per_iteration(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.seconds / self.samples.len() as f64
        }
    }

    /// Statistics over iterations `burn_in..`; samples before it are dropped.
    pub fn discard(mut self, burn_in: usize) -> Self {
        let burn_in = burn_in.min(self.samples.len());
        self.samples.drain(..burn_in);
        self.moved.drain(..burn_in);
        self.delta_h.drain(..burn_in);
        self
    }
}

/// Runs `iterations` transitions of `kernel` from `state`.
pub fn sample_chain<K: Kernel + ?Sized>(kernel: &K, state: &mut ChainState, iterations: usize) -> ChainOutput {
    let mut out = ChainOutput {
        samples: Vec::with_capacity(iterations),
        moved: Vec::with_capacity(iterations),
        delta_h: Vec::with_capacity(iterations),
        ..ChainOutput::default()
    };
    let start = Instant::now();
    for _ in 0..iterations {
        let t = kernel.transition(state);
        out.proposals += t.proposals;
        out.accepted += t.accepted;
        out.divergences += usize::from(t.divergent);
        out.moved.push(t.is_accepted());
        out.delta_h.push(t.delta_h);
        out.samples.push(state.q.clone());
    }
    out.seconds = start.elapsed().as_secs_f64();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianPotential, ModelError};
    use nalgebra::DMatrix;

    fn unit_gaussian(dim: usize) -> GaussianPotential {
        GaussianPotential::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
    }

    /// `U(q) = ½q² + c q³ / 3`, a Gaussian with a cubic perturbation.
    struct Cubic(f64);

    impl Potential for Cubic {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, q: &DVector<f64>) -> Result<f64, ModelError> {
            Ok(0.5 * q[0] * q[0] + self.0 * q[0].powi(3) / 3.0)
        }
        fn gradient(&self, q: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
            Ok(DVector::from_element(1, q[0] + self.0 * q[0] * q[0]))
        }
    }

    #[test]
    fn zero_stepsize_is_identity() {
        let model = unit_gaussian(2);
        let mut s = PhaseState::new(DVector::from_vec(vec![0.3, -1.0]), DVector::from_vec(vec![1.0, 2.0]));
        let before = s.clone();
        let mut g = model.gradient(&s.q).unwrap();
        leapfrog_step(&mut s, 0.0, &mut g, &model).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn hand_expanded_leapfrog() {
        let model = unit_gaussian(1);
        let mut s = PhaseState::new(DVector::from_element(1, 1.0), DVector::zeros(1));
        let mut g = model.gradient(&s.q).unwrap();
        leapfrog_step(&mut s, 0.1, &mut g, &model).unwrap();
        assert!((s.q[0] - 0.995).abs() < 1e-15);
        assert!((s.p[0] + 0.09975).abs() < 1e-15);
        assert!((g[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn leapfrog_step_is_reversible() {
        let model = Cubic(0.3);
        let start = PhaseState::new(DVector::from_element(1, 0.7), DVector::from_element(1, -0.4));
        let mut s = start.clone();
        let mut g = model.gradient(&s.q).unwrap();
        leapfrog_step(&mut s, 0.2, &mut g, &model).unwrap();
        s.p = -s.p;
        leapfrog_step(&mut s, 0.2, &mut g, &model).unwrap();
        s.p = -s.p;
        assert!((&s.q - &start.q).amax() < 1e-12 && (&s.p - &start.p).amax() < 1e-12);
    }

    #[test]
    fn overflow_is_a_divergence() {
        let model = Cubic(1.0);
        let mut s = PhaseState::new(DVector::from_element(1, 1e200), DVector::zeros(1));
        let mut g = model.gradient(&s.q).unwrap();
        assert!(leapfrog_trajectory(&model, &mut s, &mut g, 0.1, 5).is_err());
    }

    #[test]
    fn acceptance_rule_edges() {
        let mut rng = chain_rng(1, 0);
        for _ in 0..1000 {
            assert!(metropolis_accept(3.0, 2.0, &mut rng));
            assert!(!metropolis_accept(3.0, f64::INFINITY, &mut rng));
            assert!(!metropolis_accept(3.0, f64::NAN, &mut rng));
        }
    }

    #[test]
    fn acceptance_frequency() {
        let mut rng = chain_rng(2, 0);
        let draws = 100_000;
        let hits = (0..draws).filter(|_| metropolis_accept(0.0, 0.5, &mut rng)).count();
        let rate = hits as f64 / draws as f64;
        assert!((rate - (-0.5f64).exp()).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn stepsize_draws() {
        let mut rng = chain_rng(3, 0);
        assert_eq!(draw_stepsize(0.1, false, &mut rng), 0.1);
        let draws: Vec<f64> = (0..10_000).map(|_| draw_stepsize(0.1, true, &mut rng)).collect();
        assert!(draws.iter().all(|&e| (0.08..=0.1).contains(&e)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.09).abs() < 0.01 * 0.09, "mean {mean}");
    }

    #[test]
    fn config_validation() {
        assert!(TrajectoryConfig::new(0.0, 1, false).is_err());
        assert!(TrajectoryConfig::new(f64::NAN, 1, false).is_err());
        assert_eq!(TrajectoryConfig::new(0.1, 0, false), Err(SamplerError::NoSteps));
        let cfg = TrajectoryConfig::new(0.015, 20, true).unwrap();
        assert!((cfg.length() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn plan_validation() {
        assert!(SplitPlan::new(vec![0, 2], vec![1, 3], 2).is_ok());
        assert!(SplitPlan::new(vec![0, 1], vec![1, 3], 2).is_err());
        assert!(SplitPlan::new(vec![0, 4], vec![1, 3], 2).is_err());
        assert_eq!(SplitPlan::new(vec![0], vec![1], 0), Err(SamplerError::NoInnerSteps));
        let plan = SplitPlan::new(vec![0, 1], vec![2, 3, 4], 9).unwrap();
        assert!((plan.fraction() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn tiny_steps_almost_always_accept() {
        let model = unit_gaussian(1);
        let cfg = TrajectoryConfig::new(1e-4, 1, false).unwrap();
        let mut state = ChainState::new(DVector::zeros(1), &model, chain_rng(4, 0)).unwrap();
        let out = sample_chain(&Hmc { model: &model, config: cfg }, &mut state, 10_000);
        assert!(out.acceptance_rate() > 0.999, "{}", out.acceptance_rate());
    }

    #[test]
    fn unstable_steps_rarely_accept() {
        let model = unit_gaussian(1);
        let cfg = TrajectoryConfig::new(3.0, 20, false).unwrap();
        let mut state = ChainState::new(DVector::zeros(1), &model, chain_rng(5, 0)).unwrap();
        let out = sample_chain(&Hmc { model: &model, config: cfg }, &mut state, 2_000);
        assert!(out.acceptance_rate() < 0.05, "{}", out.acceptance_rate());
    }

    #[test]
    fn split_normal_on_gaussian_is_exact() {
        let precision = DMatrix::from_row_slice(2, 2, &[3.0, 0.4, 0.4, 0.8]);
        let model = GaussianPotential::new(DVector::from_vec(vec![1.0, 2.0]), precision);
        let approx = model.as_approx().unwrap();
        let mut state = ChainState::new(DVector::zeros(2), &model, chain_rng(6, 0)).unwrap();
        for (eps, steps) in [(0.3, 3), (1.7, 1), (0.9, 12)] {
            let cfg = TrajectoryConfig::new(eps, steps, true).unwrap();
            for _ in 0..200 {
                let t = split_normal_iteration(&mut state, &cfg, &model, &approx);
                assert!(t.is_accepted());
                assert!(t.delta_h.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn split_normal_one_step_is_third_order() {
        // Local error of one outer step compared with a fine RK4 reference.
        let model = Cubic(0.5);
        let approx = GaussianApprox::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let start = PhaseState::new(DVector::from_element(1, 0.6), DVector::from_element(1, 0.4));
        let reference = |t: f64| {
            let steps = 20_000;
            let h = t / steps as f64;
            let f = |q: f64, p: f64| (p, -(q + 0.5 * q * q));
            let (mut q, mut p) = (start.q[0], start.p[0]);
            for _ in 0..steps {
                let (a1, b1) = f(q, p);
                let (a2, b2) = f(q + a1 * h / 2.0, p + b1 * h / 2.0);
                let (a3, b3) = f(q + a2 * h / 2.0, p + b2 * h / 2.0);
                let (a4, b4) = f(q + a3 * h, p + b3 * h);
                q += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                p += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            }
            (q, p)
        };
        let error = |eps: f64| {
            let flow = FlowOperator::new(&approx, eps);
            let mut s = start.clone();
            let mut g = residual_grad_at(&model, &approx, &s.q);
            split_normal_trajectory(&model, &flow, &mut s, &mut g, 1).unwrap();
            let (q, p) = reference(eps);
            ((s.q[0] - q).powi(2) + (s.p[0] - p).powi(2)).sqrt()
        };
        let (e1, e2) = (error(0.2), error(0.1));
        let ratio = e1 / e2;
        assert!((6.0..10.0).contains(&ratio), "ratio {ratio} ({e1}, {e2})");
    }

    fn residual_grad_at<U: Potential>(model: &U, approx: &GaussianApprox, q: &DVector<f64>) -> DVector<f64> {
        crate::model::residual_grad(q, model, approx).unwrap()
    }

    #[test]
    fn degenerate_data_split_matches_leapfrog() {
        let (data, _) = crate::data::simulate_logistic(80, &[1.0, 2.0], 12).unwrap();
        let prior = crate::model::Prior::default();
        let full = crate::model::PotentialTerm::posterior(&data, prior);
        let plan = SplitPlan::new((0..80).collect(), vec![], 1).unwrap();
        let (inner, outer) = crate::model::PotentialTerm::split(&data, prior, &plan).unwrap();
        let start = PhaseState::new(DVector::from_vec(vec![0.1, -0.2, 0.3]), DVector::from_vec(vec![1.0, 0.5, -0.7]));
        let (mut a, mut b) = (start.clone(), start);
        let mut ga = full.gradient(&a.q).unwrap();
        let mut gb = outer.gradient(&b.q).unwrap();
        for _ in 0..20 {
            leapfrog_trajectory(&full, &mut a, &mut ga, 0.05, 1).unwrap();
            split_data_trajectory(&inner, &outer, &mut b, &mut gb, 0.05, 1, 1).unwrap();
            assert!((&a.q - &b.q).amax() < 1e-12 && (&a.p - &b.p).amax() < 1e-12);
        }
    }

    #[test]
    fn random_walk_moments() {
        let model = unit_gaussian(1);
        let mut state = ChainState::new(DVector::zeros(1), &model, chain_rng(7, 0)).unwrap();
        let kernel = RandomWalk { model: &model, proposal_sd: 2.4, updates: 1 };
        let out = sample_chain(&kernel, &mut state, 100_000);
        let xs: Vec<f64> = out.samples.iter().map(|q| q[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
    }

    #[test]
    fn random_walk_tiny_proposals() {
        let model = unit_gaussian(2);
        let mut state = ChainState::new(DVector::from_vec(vec![0.5, 0.5]), &model, chain_rng(8, 0)).unwrap();
        let out = sample_chain(&RandomWalk { model: &model, proposal_sd: 1e-9, updates: 20 }, &mut state, 100);
        assert!(out.acceptance_rate() > 0.999);
        assert!((state.q() - DVector::from_vec(vec![0.5, 0.5])).amax() < 1e-6);
    }

    #[test]
    fn chains_are_reproducible() {
        let model = unit_gaussian(3);
        let cfg = TrajectoryConfig::new(0.3, 5, true).unwrap();
        let run = || {
            let mut state = ChainState::new(DVector::zeros(3), &model, chain_rng(9, 2)).unwrap();
            sample_chain(&Hmc { model: &model, config: cfg }, &mut state, 200).samples
        };
        assert_eq!(run(), run());
    }
}
