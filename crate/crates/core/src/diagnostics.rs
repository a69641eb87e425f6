//! Autocorrelation times and cost accounting.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::PotentialTerm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("series `{0}` has zero variance")]
    Degenerate(String),
    #[error("series `{name}` of length {len} is too short for batch means")]
    InsufficientData { name: String, len: usize },
    #[error("series `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("sample has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Minimum series length accepted by [`batch_act`].
pub const MIN_SERIES_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarSeries {
    pub name: String,
    pub values: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Largest `B` with `B³ ≤ N²`, i.e. `⌊N^{2/3}⌋` computed exactly.
pub fn batch_size(n: usize) -> usize {
    let target = (n as u128).pow(2);
    let mut b = (n as f64).powf(2.0 / 3.0).floor() as u128;
    while b > 0 && b.pow(3) > target {
        b -= 1;
    }
    while (b + 1).pow(3) <= target {
        b += 1;
    }
    b as usize
}

/// Batch-means autocorrelation time `τ = B · S²_b / S²`.
///
/// The series is cut into `⌊N/B⌋` complete batches of size `B = ⌊N^{2/3}⌋`; a
/// trailing remainder is discarded. `S²_b` is the sample variance of the batch
/// means and `S²` that of the retained values, both with divisor `count − 1`.
pub fn batch_act(series: &ScalarSeries) -> Result<f64, DiagnosticsError> {
    let values = &series.values;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite(series.name.clone()));
    }
    let len = values.len();
    let insufficient = || DiagnosticsError::InsufficientData {
        name: series.name.clone(),
        len,
    };
    if len < MIN_SERIES_LEN {
        return Err(insufficient());
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(DiagnosticsError::Degenerate(series.name.clone()));
    }
    let b = batch_size(len);
    let batches = len / b;
    if batches < 2 {
        return Err(insufficient());
    }
    let retained = &values[..batches * b];
    let s2 = sample_variance(retained);
    if s2 == 0.0 {
        return Err(DiagnosticsError::Degenerate(series.name.clone()));
    }
    let means: Vec<f64> = retained.chunks_exact(b).map(mean).collect();
    Ok(b as f64 * sample_variance(&means) / s2)
}

/// Log-likelihood and `Σ β_j²` series for every sample.
///
/// `samples` are parameter vectors `(α, β₁..β_p)`. When `include_intercept`
/// is set, `α²` is added to the second series.
pub fn derived_series(
    samples: &[DVector<f64>],
    dataset: &Dataset,
    include_intercept: bool,
) -> Result<(ScalarSeries, ScalarSeries), DiagnosticsError> {
    let likelihood = PotentialTerm::likelihood(dataset);
    let mut loglik = Vec::with_capacity(samples.len());
    let mut beta_sq = Vec::with_capacity(samples.len());
    for theta in samples {
        let ll = likelihood
            .log_likelihood(theta)
            .map_err(|_| DiagnosticsError::DimensionMismatch {
                expected: dataset.n_params(),
                found: theta.len(),
            })?;
        loglik.push(ll);
        beta_sq.push(squared_coefficients(theta, include_intercept));
    }
    Ok((
        ScalarSeries::new("loglik", loglik),
        ScalarSeries::new("beta_sq", beta_sq),
    ))
}

/// `Σ_j β_j²`, plus `α²` when `include_intercept` is set.
pub fn squared_coefficients(theta: &DVector<f64>, include_intercept: bool) -> f64 {
    let skip = usize::from(!include_intercept);
    theta.iter().skip(skip).map(|v| v * v).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Hmc,
    SplitNormal,
    SplitData,
}

impl SamplerKind {
    pub fn label(&self) -> &'static str {
        match self {
            SamplerKind::Hmc => "HMC",
            SamplerKind::SplitNormal => "Split HMC (normal approx.)",
            SamplerKind::SplitData => "Split HMC (data splitting)",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub kind: SamplerKind,
    /// Outer leapfrog steps L.
    pub steps: usize,
    /// Fraction of cases in `R₀`; ignored unless `kind` is `SplitData`.
    pub fraction: f64,
    /// Inner steps M; ignored unless `kind` is `SplitData`.
    pub inner_steps: usize,
    /// Wall seconds per iteration.
    pub seconds: f64,
}

impl CostModel {
    pub fn plain(kind: SamplerKind, steps: usize) -> Self {
        Self {
            kind,
            steps,
            fraction: 0.0,
            inner_steps: 1,
            seconds: 0.0,
        }
    }

    pub fn data_split(fraction: f64, inner_steps: usize, steps: usize) -> Self {
        Self {
            kind: SamplerKind::SplitData,
            steps,
            fraction,
            inner_steps,
            seconds: 0.0,
        }
    }
}

/// Full-data gradient evaluations per trajectory:
/// `L` for standard and normal-approximation HMC, `(fM + (1 − f))·L` for data splitting.
pub fn gradient_cost(cost: &CostModel) -> f64 {
    let l = cost.steps as f64;
    match cost.kind {
        SamplerKind::Hmc | SamplerKind::SplitNormal => l,
        SamplerKind::SplitData => {
            let f = cost.fraction;
            (f * cost.inner_steps as f64 + (1.0 - f)) * l
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::chain_rng;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn iid(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = chain_rng(seed, 0);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
        let noise = iid(n, seed);
        let scale = (1.0 - rho * rho).sqrt();
        let mut x = noise[0];
        noise
            .iter()
            .map(|e| {
                x = rho * x + scale * e;
                x
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        assert_eq!(batch_size(1000), 100);
        assert_eq!(batch_size(50_000), 1357);
        assert_eq!(batch_size(8), 4);
        assert_eq!(batch_size(27), 9);
    }

    #[test]
    fn iid_series_has_unit_act() {
        let tau = batch_act(&ScalarSeries::new("iid", iid(50_000, 1))).unwrap();
        assert!((tau - 1.0).abs() < 0.3, "tau {tau}");
    }

    #[test]
    fn ar1_series_act() {
        let tau = batch_act(&ScalarSeries::new("ar1", ar1(50_000, 0.9, 2))).unwrap();
        assert!((tau - 19.0).abs() < 0.3 * 19.0, "tau {tau}");
    }

    #[test]
    fn shuffling_destroys_autocorrelation() {
        use rand::seq::SliceRandom;
        let mut values = ar1(50_000, 0.9, 3);
        let before = batch_act(&ScalarSeries::new("ar1", values.clone())).unwrap();
        values.shuffle(&mut chain_rng(4, 0));
        let after = batch_act(&ScalarSeries::new("shuffled", values)).unwrap();
        // 36 batches: the estimator's relative spread is about ±25%.
        assert!(before > 10.0, "before {before}");
        assert!((after - 1.0).abs() < 0.75, "after {after}");
    }

    #[test]
    fn degenerate_and_short_series() {
        let constant = ScalarSeries::new("c", vec![2.5; 100]);
        assert_eq!(batch_act(&constant), Err(DiagnosticsError::Degenerate("c".into())));
        let short = ScalarSeries::new("s", vec![1.0, 2.0, 3.0]);
        assert!(matches!(batch_act(&short), Err(DiagnosticsError::InsufficientData { .. })));
        let nan = ScalarSeries::new("n", vec![1.0, f64::NAN, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(matches!(batch_act(&nan), Err(DiagnosticsError::NonFinite(_))));
    }

    #[test]
    fn derived_series_values() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, -1.0, 2.0, 0.3, -0.4]);
        let data = Dataset::from_parts(x, DVector::from_vec(vec![1.0, 0.0, 1.0])).unwrap();
        let theta = DVector::from_vec(vec![0.4, -0.3, 0.8]);
        let (ll, bsq) = derived_series(&[DVector::zeros(3), theta.clone()], &data, false).unwrap();
        assert!((ll.values[0] + 3.0 * 2f64.ln()).abs() < 1e-14);
        assert_eq!(bsq.values[0], 0.0);

        let mut expected = 0.0;
        for i in 0..3 {
            let z = theta[0] + theta[1] * data.x()[(i, 0)] + theta[2] * data.x()[(i, 1)];
            let prob: f64 = 1.0 / (1.0 + (-z).exp());
            expected += if data.y()[i] == 1.0 { prob.ln() } else { (1.0 - prob).ln() };
        }
        assert!((ll.values[1] - expected).abs() < 1e-12 * expected.abs());
        assert!((bsq.values[1] - (0.09 + 0.64)).abs() < 1e-15);

        let (_, with_alpha) = derived_series(&[theta], &data, true).unwrap();
        assert!((with_alpha.values[0] - (0.16 + 0.09 + 0.64)).abs() < 1e-15);
    }

    #[test]
    fn gradient_costs() {
        assert_eq!(gradient_cost(&CostModel::plain(SamplerKind::Hmc, 20)), 20.0);
        assert_eq!(gradient_cost(&CostModel::plain(SamplerKind::SplitNormal, 10)), 10.0);
        assert!((gradient_cost(&CostModel::data_split(0.35, 15, 2)) - 11.8).abs() < 1e-12);
        assert!((gradient_cost(&CostModel::data_split(0.4, 9, 3)) - 12.6).abs() < 1e-12);
        assert!((gradient_cost(&CostModel::data_split(0.3, 14, 2)) - 9.8).abs() < 1e-12);
        assert_eq!(gradient_cost(&CostModel::data_split(0.7, 1, 4)), 4.0);
        assert_eq!(gradient_cost(&CostModel::data_split(0.0, 12, 4)), 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn act_is_affine_invariant(seed in 0u64..1000, len in 8usize..3000,
                                   a in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], b in -100.0f64..100.0) {
            let x = ar1(len, 0.5, seed);
            let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let tx = batch_act(&ScalarSeries::new("x", x)).unwrap();
            let ty = batch_act(&ScalarSeries::new("y", y)).unwrap();
            prop_assert!(((tx - ty) / tx).abs() < 1e-10);
        }
    }
}
