//! Experiment runner: data → MAP → split → chains → diagnostics → report.
//!
//! An experiment is described by an [`ExperimentConfig`], normally read from a
//! TOML file (see the repository README for the grammar). Every requested
//! sampler starts at the posterior mode and runs for the same number of
//! iterations on its own random stream.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::diagnostics::{
    batch_act, derived_series, gradient_cost, squared_coefficients, CostModel, DiagnosticsError, SamplerKind,
    ScalarSeries,
};
use crate::map_optimizer::{find_map, MapError, MapOptions};
use crate::model::{GaussianApprox, GaussianPotential, ModelError, Potential, PotentialTerm, Prior};
use crate::samplers::{
    chain_rng, sample_chain, ChainOutput, ChainState, Hmc, Kernel, RandomWalk, SamplerError, SplitDataHmc,
    SplitNormalHmc, TrajectoryConfig,
};

/// Fewest retained iterations for which autocorrelation times are reported.
pub const MIN_ITERATIONS: usize = 1000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Config(#[from] toml::de::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("MAP estimation failed: {0}")]
    Map(#[from] MapError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SdSchedule {
    /// A named schedule; only `"tiered"` is known.
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for SdSchedule {
    fn default() -> Self {
        SdSchedule::Named("tiered".into())
    }
}

impl SdSchedule {
    pub fn resolve(&self, p: usize) -> Result<Vec<f64>, ExperimentError> {
        match self {
            SdSchedule::Named(name) if name == "tiered" => Ok(data::tiered_sd_schedule(p)),
            SdSchedule::Named(name) => Err(invalid(format!("unknown sd schedule `{name}`"))),
            SdSchedule::Explicit(values) => {
                if values.len() != p {
                    return Err(invalid(format!("sd schedule has {} entries for p = {p}", values.len())));
                }
                if values.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(invalid("sd schedule entries must be positive"));
                }
                Ok(values.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Labels drawn from the logistic model.
    Simulate {
        n: usize,
        p: usize,
        #[serde(default)]
        sd_schedule: SdSchedule,
        /// Seed of the data generator; the experiment seed when absent.
        seed: Option<u64>,
        #[serde(default)]
        standardize: bool,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default = "default_true")]
        standardize: bool,
    },
    /// The correlated bivariate normal with mean (3, 3), unit variances and correlation 0.95.
    BivariateNormal,
}

fn default_label_column() -> String {
    "y".into()
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_alpha: 5.0,
            sigma_beta: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Row label in the report; defaults to the kind's label.
    pub name: Option<String>,
    pub epsilon: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub jitter: bool,
    /// Fraction of cases in `R₀` (data splitting only).
    pub fraction: Option<f64>,
    /// Inner leapfrog steps `M` (data splitting only).
    pub inner_steps: Option<usize>,
}

impl SamplerConfig {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.label().to_owned())
    }

    pub fn trajectory(&self) -> Result<TrajectoryConfig, SamplerError> {
        TrajectoryConfig::new(self.epsilon, self.steps, self.jitter)
    }

    fn split_params(&self) -> Result<(f64, usize), ExperimentError> {
        let f = self
            .fraction
            .ok_or_else(|| invalid(format!("sampler `{}` needs `fraction`", self.label())))?;
        let m = self
            .inner_steps
            .ok_or_else(|| invalid(format!("sampler `{}` needs `inner_steps`", self.label())))?;
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid(format!("sampler `{}`: fraction must be in (0, 1)", self.label())));
        }
        if m == 0 {
            return Err(invalid(format!("sampler `{}`: inner_steps must be ≥ 1", self.label())));
        }
        Ok((f, m))
    }

    pub fn cost_model(&self) -> CostModel {
        match self.kind {
            SamplerKind::SplitData => CostModel::data_split(
                self.fraction.unwrap_or(0.0),
                self.inner_steps.unwrap_or(1),
                self.steps,
            ),
            kind => CostModel::plain(kind, self.steps),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Table,
    Csv,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(rename = "sampler")]
    pub samplers: Vec<SamplerConfig>,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub burn_in: usize,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
    /// Add `α²` to the `Σβ²` series.
    #[serde(default)]
    pub include_intercept_in_beta: bool,
    /// Run the chains on separate threads.
    #[serde(default)]
    pub parallel: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Checks everything that can be checked before any data is touched.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.samplers.is_empty() {
            return Err(invalid("at least one [[sampler]] is required"));
        }
        if self.iterations < MIN_ITERATIONS {
            return Err(invalid(format!(
                "iterations = {} is below the minimum of {MIN_ITERATIONS}",
                self.iterations
            )));
        }
        if self.burn_in > self.iterations - MIN_ITERATIONS {
            return Err(invalid(format!(
                "burn_in = {} leaves fewer than {MIN_ITERATIONS} retained iterations",
                self.burn_in
            )));
        }
        Prior::new(self.prior.sigma_alpha, self.prior.sigma_beta)?;
        for s in &self.samplers {
            s.trajectory()?;
            if s.kind == SamplerKind::SplitData {
                s.split_params()?;
            }
        }
        if let DataSource::Simulate { n, p, sd_schedule, .. } = &self.data {
            if *n < 2 || *p == 0 {
                return Err(invalid("simulated data needs n ≥ 2 and p ≥ 1"));
            }
            sd_schedule.resolve(*p)?;
        }
        Ok(())
    }

    /// Warnings for samplers whose nominal `εL` differs from the first one's by more than 0.1%.
    pub fn trajectory_length_warnings(&self) -> Vec<String> {
        let Some(first) = self.samplers.first() else {
            return Vec::new();
        };
        let reference = first.epsilon * first.steps as f64;
        self.samplers
            .iter()
            .skip(1)
            .filter(|s| {
                let len = s.epsilon * s.steps as f64;
                (len - reference).abs() > 1e-3 * reference.abs()
            })
            .map(|s| {
                format!(
                    "sampler `{}` has trajectory length {:.6} but `{}` has {:.6}",
                    s.label(),
                    s.epsilon * s.steps as f64,
                    first.label(),
                    reference
                )
            })
            .collect()
    }
}

/// One row of the report; the CSV columns in order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub sampler: String,
    #[serde(rename = "L")]
    pub steps: usize,
    pub epsilon: f64,
    pub g: f64,
    pub s: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub tau: f64,
    pub tau_g: f64,
    pub tau_s: f64,
    pub tau_beta: f64,
    pub tau_beta_g: f64,
    pub tau_beta_s: f64,
    pub map_seconds: f64,
    pub divergences: usize,
}

impl ReportRow {
    fn new(config: &SamplerConfig, g: f64, s: f64, ap: f64, tau: f64, tau_beta: f64, map_seconds: f64, divergences: usize) -> Self {
        Self {
            sampler: config.label(),
            steps: config.steps,
            epsilon: config.epsilon,
            g,
            s,
            ap,
            tau,
            tau_g: tau * g,
            tau_s: tau * s,
            tau_beta,
            tau_beta_g: tau_beta * g,
            tau_beta_s: tau_beta * s,
            map_seconds,
            divergences,
        }
    }
}

pub const CSV_COLUMNS: [&str; 14] = [
    "sampler",
    "L",
    "epsilon",
    "g",
    "s",
    "AP",
    "tau",
    "tau_g",
    "tau_s",
    "tau_beta",
    "tau_beta_g",
    "tau_beta_s",
    "map_seconds",
    "divergences",
];

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// Samplers that could not be run, with the reason.
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
    pub map_seconds: f64,
}

impl ExperimentReport {
    pub fn row(&self, sampler: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.sampler == sampler)
    }

    pub fn to_csv(&self) -> String {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        writer.write_record(CSV_COLUMNS).expect("writing to memory");
        for row in &self.rows {
            writer.serialize(row).expect("writing to memory");
        }
        String::from_utf8(writer.into_inner().expect("flush to memory")).expect("csv output is UTF-8")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Aligned table with one column per sampler and one line per metric.
    pub fn to_table(&self) -> String {
        let metrics: [(&str, fn(&ReportRow) -> String); 13] = [
            ("L", |r| r.steps.to_string()),
            ("epsilon", |r| format!("{:.4}", r.epsilon)),
            ("g", |r| format!("{:.1}", r.g)),
            ("s", |r| format!("{:.3e}", r.s)),
            ("AP", |r| format!("{:.2}", r.ap)),
            ("tau", |r| format!("{:.2}", r.tau)),
            ("tau x g", |r| format!("{:.1}", r.tau_g)),
            ("tau x s", |r| format!("{:.3e}", r.tau_s)),
            ("tau_beta", |r| format!("{:.2}", r.tau_beta)),
            ("tau_beta x g", |r| format!("{:.1}", r.tau_beta_g)),
            ("tau_beta x s", |r| format!("{:.3e}", r.tau_beta_s)),
            ("MAP s", |r| format!("{:.3}", r.map_seconds)),
            ("divergences", |r| r.divergences.to_string()),
        ];
        let label_width = metrics.iter().map(|(m, _)| m.len()).max().unwrap_or(0);
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| metrics.iter().map(|(_, f)| f(r)).collect())
            .collect();
        let widths: Vec<usize> = self
            .rows
            .iter()
            .zip(&cells)
            .map(|(r, c)| c.iter().map(String::len).chain([r.sampler.len()]).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        let _ = write!(out, "{:label_width$}", "");
        for (r, w) in self.rows.iter().zip(&widths) {
            let _ = write!(out, " | {:>w$}", r.sampler);
        }
        out.push('\n');
        let total = label_width + widths.iter().map(|w| w + 3).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for (m, (name, _)) in metrics.iter().enumerate() {
            let _ = write!(out, "{name:label_width$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(out, " | {:>w$}", c[m]);
            }
            out.push('\n');
        }
        for (name, reason) in &self.failures {
            let _ = writeln!(out, "FAILED {name}: {reason}");
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

/// The posterior being sampled, with everything precomputed from its mode.
enum Target {
    Logistic {
        data: Dataset,
        prior: Prior,
        full: PotentialTerm,
        approx: GaussianApprox,
    },
    Gaussian {
        potential: GaussianPotential,
        approx: GaussianApprox,
    },
}

impl Target {
    fn approx(&self) -> &GaussianApprox {
        match self {
            Target::Logistic { approx, .. } | Target::Gaussian { approx, .. } => approx,
        }
    }

    fn run(&self, config: &SamplerConfig, seed: u64, stream: u64, iterations: usize) -> Result<ChainOutput, ExperimentError> {
        let trajectory = config.trajectory()?;
        let start = self.approx().mode().clone();
        let rng = chain_rng(seed, stream);
        match self {
            Target::Logistic { data, prior, full, approx } => match config.kind {
                SamplerKind::Hmc => run(&Hmc { model: full, config: trajectory }, full, start, rng, iterations),
                SamplerKind::SplitNormal => run(
                    &SplitNormalHmc {
                        model: full,
                        approx,
                        config: trajectory,
                    },
                    full,
                    start,
                    rng,
                    iterations,
                ),
                SamplerKind::SplitData => {
                    let (f, m) = config.split_params()?;
                    let plan = data::boundary_split(data, approx.mode(), f, m)?;
                    let (inner, outer) = PotentialTerm::split(data, *prior, &plan)?;
                    info!(
                        "{}: |R0| = {}, |R1| = {}, M = {m}",
                        config.label(),
                        plan.r0().len(),
                        plan.r1().len()
                    );
                    let kernel = SplitDataHmc {
                        inner: &inner,
                        outer: &outer,
                        inner_steps: m,
                        config: trajectory,
                    };
                    run(&kernel, full, start, rng, iterations)
                }
            },
            Target::Gaussian { potential, approx } => match config.kind {
                SamplerKind::Hmc => run(
                    &Hmc {
                        model: potential,
                        config: trajectory,
                    },
                    potential,
                    start,
                    rng,
                    iterations,
                ),
                SamplerKind::SplitNormal => run(
                    &SplitNormalHmc {
                        model: potential,
                        approx,
                        config: trajectory,
                    },
                    potential,
                    start,
                    rng,
                    iterations,
                ),
                SamplerKind::SplitData => Err(invalid("data splitting needs a dataset")),
            },
        }
    }

    /// `(log-likelihood or log-density series, squared-coefficient series)`.
    fn series(&self, samples: &[DVector<f64>], include_intercept: bool) -> Result<(ScalarSeries, ScalarSeries), ExperimentError> {
        match self {
            Target::Logistic { data, .. } => Ok(derived_series(samples, data, include_intercept)?),
            Target::Gaussian { potential, .. } => {
                let logdens = samples
                    .iter()
                    .map(|q| potential.value(q).map(|u| -u))
                    .collect::<Result<Vec<_>, _>>()?;
                let sq = samples.iter().map(|q| squared_coefficients(q, true)).collect();
                Ok((ScalarSeries::new("logdensity", logdens), ScalarSeries::new("q_sq", sq)))
            }
        }
    }
}

fn run<K: Kernel, U: Potential>(
    kernel: &K,
    model: &U,
    start: DVector<f64>,
    rng: crate::samplers::ChainRng,
    iterations: usize,
) -> Result<ChainOutput, ExperimentError> {
    let mut state = ChainState::new(start, model, rng)?;
    Ok(sample_chain(kernel, &mut state, iterations))
}

/// Mean (3, 3), unit variances, correlation 0.95.
pub fn bivariate_normal() -> GaussianPotential {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.95, 0.95, 1.0]);
    GaussianPotential::from_covariance(DVector::from_vec(vec![3.0, 3.0]), &cov)
}

fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset, ExperimentError> {
    let (raw, standardize) = match source {
        DataSource::Simulate {
            n,
            p,
            sd_schedule,
            seed: data_seed,
            standardize,
        } => {
            let schedule = sd_schedule.resolve(*p)?;
            let (data, _) = data::simulate_logistic(*n, &schedule, data_seed.unwrap_or(seed))?;
            (data, *standardize)
        }
        DataSource::Csv {
            path,
            label_column,
            standardize,
        } => (data::load_csv(path, label_column)?, *standardize),
        DataSource::BivariateNormal => unreachable!("handled by the caller"),
    };
    Ok(if standardize { data::standardize(&raw)? } else { raw })
}

/// Runs every sampler of `config` and assembles the report.
///
/// A failing sampler is recorded in [`ExperimentReport::failures`]; the others
/// still produce rows. Invalid configuration and MAP failure abort the whole run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let warnings = config.trajectory_length_warnings();
    for w in &warnings {
        warn!("{w}");
    }

    let map_start = Instant::now();
    let target = match &config.data {
        DataSource::BivariateNormal => {
            let potential = bivariate_normal();
            let approx = potential.as_approx().map_err(MapError::from)?;
            Target::Gaussian { potential, approx }
        }
        source => {
            let data = load_dataset(source, config.seed)?;
            let prior = Prior::new(config.prior.sigma_alpha, config.prior.sigma_beta)?;
            let full = PotentialTerm::posterior(&data, prior);
            let fit = find_map(&full, &DVector::zeros(data.n_params()), MapOptions::default())?;
            info!(
                "MAP converged in {} Newton steps (gradient ∞-norm {:.2e})",
                fit.iterations, fit.grad_norm
            );
            Target::Logistic {
                data,
                prior,
                full,
                approx: fit.approx,
            }
        }
    };
    let map_seconds = map_start.elapsed().as_secs_f64();

    let evaluate = |(index, sampler): (usize, &SamplerConfig)| -> Result<ReportRow, ExperimentError> {
        info!("running {} for {} iterations", sampler.label(), config.iterations);
        let output = target
            .run(sampler, config.seed, index as u64, config.iterations)?
            .discard(config.burn_in);
        let s = output.seconds_per_iteration();
        let (loglik, beta_sq) = target.series(&output.samples, config.include_intercept_in_beta)?;
        let tau = batch_act(&loglik)?;
        let tau_beta = batch_act(&beta_sq)?;
        let g = gradient_cost(&CostModel {
            seconds: s,
            ..sampler.cost_model()
        });
        Ok(ReportRow::new(
            sampler,
            g,
            s,
            output.acceptance_rate(),
            tau,
            tau_beta,
            map_seconds,
            output.divergences,
        ))
    };
    let results: Vec<Result<ReportRow, ExperimentError>> = if config.parallel {
        config.samplers.par_iter().enumerate().map(evaluate).collect()
    } else {
        config.samplers.iter().enumerate().map(evaluate).collect()
    };

    let mut report = ExperimentReport {
        warnings,
        map_seconds,
        ..ExperimentReport::default()
    };
    for (sampler, result) in config.samplers.iter().zip(results) {
        match result {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                warn!("{} failed: {e}", sampler.label());
                report.failures.push((sampler.label(), e.to_string()));
            }
        }
    }
    Ok(report)
}

/// Paths written by [`figure1`].
#[derive(Clone, Debug)]
pub struct Figure1Output {
    pub hmc: PathBuf,
    pub rwm: PathBuf,
}

/// HMC against random-walk Metropolis on the correlated bivariate normal.
///
/// Both chains start at the origin and run 30 iterations: HMC with `L = 20`,
/// `ε = 0.15`; RWM with 20 updates of proposal sd 0.15 per iteration. Each
/// chain is written as `iteration,q1,q2` (iteration 0 is the start).
pub fn figure1(out_dir: impl AsRef<Path>, seed: u64) -> Result<Figure1Output, ExperimentError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let target = bivariate_normal();
    let origin = DVector::zeros(2);
    let iterations = 30;

    let hmc = Hmc {
        model: &target,
        config: TrajectoryConfig::new(0.15, 20, false)?,
    };
    let mut state = ChainState::new(origin.clone(), &target, chain_rng(seed, 0))?;
    let hmc_out = sample_chain(&hmc, &mut state, iterations);

    let rwm = RandomWalk {
        model: &target,
        proposal_sd: 0.15,
        updates: 20,
    };
    let mut state = ChainState::new(origin.clone(), &target, chain_rng(seed, 1))?;
    let rwm_out = sample_chain(&rwm, &mut state, iterations);

    let write = |name: &str, samples: &[DVector<f64>]| -> Result<PathBuf, ExperimentError> {
        let path = out_dir.join(name);
        let mut text = String::from("iteration,q1,q2\n");
        for (i, q) in std::iter::once(&origin).chain(samples).enumerate() {
            let _ = writeln!(text, "{i},{},{}", q[0], q[1]);
        }
        std::fs::write(&path, text)?;
        Ok(path)
    };
    Ok(Figure1Output {
        hmc: write("hmc.csv", &hmc_out.samples)?,
        rwm: write("rwm.csv", &rwm_out.samples)?,
    })
}
