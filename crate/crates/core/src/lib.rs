//! Hamiltonian Monte Carlo with split Hamiltonians for Bayesian logistic regression.
//!
//! Three HMC kernels share one leapfrog and acceptance machinery:
//!
//! - standard HMC on the full posterior potential `U`;
//! - split HMC where `U = U₀ + U₁` with `U₀` the Gaussian approximation at the
//!   posterior mode, whose dynamics are solved exactly ([`gaussian_flow`]);
//! - split HMC where the data are split into cases near the MAP decision
//!   boundary (`U₀`, with the prior) and the rest (`U₁`), integrated with a
//!   nested leapfrog.
//!
//! [`experiment`] wires datasets, the MAP fit, the samplers and the
//! [`diagnostics`] into reports of acceptance rates, autocorrelation times and
//! gradient-evaluation costs.

pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod gaussian_flow;
pub mod map_optimizer;
pub mod model;
pub mod samplers;

pub use data::{boundary_split, load_csv, simulate_logistic, standardize, Dataset};
pub use diagnostics::{batch_act, derived_series, gradient_cost, CostModel, SamplerKind, ScalarSeries};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
pub use gaussian_flow::{exact_flow, symmetric_eigen, FlowOperator, PhaseState};
pub use map_optimizer::{find_map, MapFit, MapOptions};
pub use model::{GaussianApprox, GaussianPotential, Potential, PotentialTerm, Prior};
pub use samplers::{
    hmc_iteration, rwm_iteration, sample_chain, split_data_iteration, split_normal_iteration, ChainState,
    SplitPlan, TrajectoryConfig,
};
