//! Datasets for binary logistic regression.
//!
//! A [`Dataset`] holds an `n × p` covariate matrix and 0/1 labels. This module
//! also covers CSV ingestion and export, column standardization, the simulated
//! data generator, and the split of cases around the MAP decision boundary.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::model::logistic;
use crate::samplers::{ChainRng, SplitPlan};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must have at least one case and one covariate (got n={n}, p={p})")]
    Empty { n: usize, p: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label at case {case} is {value}, expected 0 or 1")]
    NonBinaryLabel { case: usize, value: f64 },
    #[error("covariate ({case}, {column}) is not finite")]
    NonFinite { case: usize, column: usize },
    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: invalid label `{value}` (expected 0 or 1)")]
    InvalidLabel { row: usize, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("standardization needs at least 2 cases, got {0}")]
    TooFewCases(usize),
    #[error("split fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Affine map applied to one covariate column. `sd == 0` marks a constant
/// column that was passed through unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColumnScaling {
    pub mean: f64,
    pub sd: f64,
}

impl ColumnScaling {
    pub fn is_constant(&self) -> bool {
        self.sd == 0.0
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    feature_names: Vec<String>,
    standardization: Option<Vec<ColumnScaling>>,
}

impl Dataset {
    /// Builds a dataset, checking shapes, finiteness and that every label is 0 or 1.
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, feature_names: Vec<String>) -> Result<Self, DataError> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(DataError::Empty { n, p });
        }
        if y.len() != n {
            return Err(DataError::DimensionMismatch(format!(
                "{n} covariate rows but {} labels",
                y.len()
            )));
        }
        if feature_names.len() != p {
            return Err(DataError::DimensionMismatch(format!(
                "{p} covariate columns but {} feature names",
                feature_names.len()
            )));
        }
        for (case, &label) in y.iter().enumerate() {
            if label != 0.0 && label != 1.0 {
                return Err(DataError::NonBinaryLabel { case, value: label });
            }
        }
        for column in 0..p {
            for case in 0..n {
                if !x[(case, column)].is_finite() {
                    return Err(DataError::NonFinite { case, column });
                }
            }
        }
        Ok(Self {
            x,
            y,
            feature_names,
            standardization: None,
        })
    }

    /// Like [`Dataset::new`] with generated feature names `x1..xp`.
    pub fn from_parts(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self, DataError> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(x, y, names)
    }

    pub fn n_cases(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Length of the parameter vector `(α, β₁..β_p)`.
    pub fn n_params(&self) -> usize {
        self.x.ncols() + 1
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// The per-column transformation, if [`standardize`] was applied.
    pub fn standardization(&self) -> Option<&[ColumnScaling]> {
        self.standardization.as_deref()
    }

    /// Logit `α + x_iᵀβ` for every case.
    pub fn logits(&self, theta: &DVector<f64>) -> DVector<f64> {
        let beta = theta.rows(1, self.n_features());
        let mut z = &self.x * beta;
        z.add_scalar_mut(theta[0]);
        z
    }

    /// Writes the dataset as CSV: the feature columns followed by `label_column`.
    pub fn write_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<(), DataError> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        writer.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_cases() {
            record.clear();
            // `{}` on f64 prints the shortest representation that parses back exactly.
            record.extend(self.x.row(i).iter().map(|v| v.to_string()));
            record.push(format!("{}", self.y[i] as u8));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Reads a comma-separated file with a header row. Every column other than
/// `label_column` becomes a covariate, in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_owned()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 1, the header being row 0.
        let row = i + 1;
        if record.len() != header.len() {
            return Err(DataError::RowLength {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                let label = match cell.parse::<f64>() {
                    Ok(v) if v == 0.0 || v == 1.0 => v,
                    _ => {
                        return Err(DataError::InvalidLabel {
                            row,
                            value: cell.to_owned(),
                        })
                    }
                };
                labels.push(label);
            } else {
                let value = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse {
                        row,
                        column: header[j].clone(),
                        value: cell.to_owned(),
                    })?;
                values.push(value);
            }
        }
    }
    let n = labels.len();
    let x = DMatrix::from_row_slice(n, feature_names.len(), &values);
    Dataset::new(x, DVector::from_vec(labels), feature_names)
}

/// Centers and scales every non-constant column to mean 0 and sample sd 1
/// (divisor `n − 1`). Constant columns are left untouched and recorded with `sd = 0`.
pub fn standardize(dataset: &Dataset) -> Result<Dataset, DataError> {
    let n = dataset.n_cases();
    if n < 2 {
        return Err(DataError::TooFewCases(n));
    }
    let mut x = dataset.x.clone();
    let mut record = Vec::with_capacity(dataset.n_features());
    for mut column in x.column_iter_mut() {
        let mean = column.sum() / n as f64;
        let ss: f64 = column.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        let constant = column.iter().all(|&v| v == column[0]);
        if constant || sd == 0.0 {
            record.push(ColumnScaling { mean, sd: 0.0 });
            continue;
        }
        for v in column.iter_mut() {
            *v = (*v - mean) / sd;
        }
        record.push(ColumnScaling { mean, sd });
    }
    Ok(Dataset {
        x,
        y: dataset.y.clone(),
        feature_names: dataset.feature_names.clone(),
        standardization: Some(record),
    })
}

/// Per-column standard deviations of the simulated-data experiment:
/// 5 for the first five columns, 1 for the next five and 0.2 for the rest.
pub fn tiered_sd_schedule(p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| match j {
            0..=4 => 5.0,
            5..=9 => 1.0,
            _ => 0.2,
        })
        .collect()
}

/// Draws a dataset from the logistic model.
///
/// The stream is a ChaCha20 generator seeded with `seed` and consumed in a fixed
/// order: `α`, then `β₁..β_p` (all `N(0, 1)`), then the covariates row by row
/// (`x_ij ~ N(0, σ_j²)`), then one Bernoulli label per case.
pub fn simulate_logistic(
    n: usize,
    sd_schedule: &[f64],
    seed: u64,
) -> Result<(Dataset, DVector<f64>), DataError> {
    let p = sd_schedule.len();
    if n == 0 || p == 0 {
        return Err(DataError::Empty { n, p });
    }
    let mut rng = ChainRng::seed_from_u64(seed);
    let theta = DVector::from_iterator(p + 1, (0..=p).map(|_| StandardNormal.sample(&mut rng)));
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for (j, &sd) in sd_schedule.iter().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = sd * z;
        }
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let mut data = Dataset::new(x, DVector::zeros(n), names)?;
    let logits = data.logits(&theta);
    for i in 0..n {
        let prob = logistic(logits[i]);
        let coin = Bernoulli::new(prob).expect("logistic output lies in [0, 1]");
        data.y[i] = if coin.sample(&mut rng) { 1.0 } else { 0.0 };
    }
    Ok((data, theta))
}

/// Draws `n` values from `N(0, sd²)`; used by tests and tools that need raw columns.
pub fn normal_column(n: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChainRng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sd).expect("sd must be finite and non-negative");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Number of cases placed in `R₀` for fraction `f`: `⌈f·n⌉`, with products
/// that are integral up to rounding (e.g. `0.3 × 100`) not bumped up by one.
pub fn inner_count(f: f64, n: usize) -> usize {
    let scaled = f * n as f64;
    let nearest = scaled.round();
    let k = if (scaled - nearest).abs() <= 1e-9 * scaled.max(1.0) {
        nearest
    } else {
        scaled.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Splits the cases by how close their MAP class-1 probability is to 1/2.
///
/// `R₀` holds the `⌈f·n⌉` cases with the smallest `|μ_i − 1/2|`, ties going to
/// the lower index; `R₁` is the complement. Both index lists are sorted.
pub fn boundary_split(
    dataset: &Dataset,
    q_hat: &DVector<f64>,
    f: f64,
    inner_steps: usize,
) -> Result<SplitPlan, DataError> {
    if !(f > 0.0 && f < 1.0) {
        return Err(DataError::InvalidFraction(f));
    }
    if q_hat.len() != dataset.n_params() {
        return Err(DataError::DimensionMismatch(format!(
            "mode has length {} but the dataset needs {}",
            q_hat.len(),
            dataset.n_params()
        )));
    }
    let n = dataset.n_cases();
    let distance: Vec<f64> = dataset
        .logits(q_hat)
        .iter()
        .map(|&z| (logistic(z) - 0.5).abs())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        distance[a]
            .partial_cmp(&distance[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = inner_count(f, n);
    let mut r0 = order[..k].to_vec();
    let mut r1 = order[k..].to_vec();
    r0.sort_unstable();
    r1.sort_unstable();
    Ok(SplitPlan::new(r0, r1, inner_steps).expect("boundary split yields a valid partition"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(contents: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(contents.as_bytes()).unwrap();
        file
    }

    #[test]
    fn loads_small_csv() {
        let file = write_file("a,b,label\n1.0,2.0,0\n3,4,1\n-5e-1,6,1\n");
        let data = load_csv(file.path(), "label").unwrap();
        assert_eq!(data.n_cases(), 3);
        assert_eq!(data.n_features(), 2);
        assert_eq!(data.feature_names(), ["a", "b"]);
        assert_eq!(data.x()[(2, 0)], -0.5);
        assert_eq!(data.y().as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn label_column_may_be_anywhere() {
        let file = write_file("y,a\n1,0.5\n0,0.25\n");
        let data = load_csv(file.path(), "y").unwrap();
        assert_eq!(data.x().as_slice(), &[0.5, 0.25]);
        assert_eq!(data.y().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn rejects_label_two() {
        let file = write_file("a,label\n1,0\n2,2\n");
        match load_csv(file.path(), "label") {
            Err(DataError::InvalidLabel { row, value }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "2");
            }
            other => panic!("expected invalid label, got {other:?}"),
        }
    }

    #[test]
    fn reports_unparseable_cell() {
        let file = write_file("a,b,label\n1,2,0\n1,oops,1\n");
        match load_csv(file.path(), "label") {
            Err(DataError::Parse { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "b", "oops"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let file = write_file("a,b,label\n1,,0\n");
        assert!(matches!(load_csv(file.path(), "label"), Err(DataError::Parse { row: 1, .. })));
    }

    #[test]
    fn missing_label_column() {
        let file = write_file("a,b\n1,2\n");
        assert!(matches!(
            load_csv(file.path(), "label"),
            Err(DataError::MissingLabelColumn(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let (data, _) = simulate_logistic(50, &[5.0, 1.0, 0.2], 9).unwrap();
        let file = tempfile::NamedTempFile::new().unwrap();
        data.write_csv(file.path(), "y").unwrap();
        let back = load_csv(file.path(), "y").unwrap();
        assert_eq!(back.feature_names(), data.feature_names());
        assert_eq!(back.y(), data.y());
        let err = (back.x() - data.x()).abs().max();
        assert!(err <= 1e-12, "round trip error {err}");
    }

    #[test]
    fn standardize_simple_column() {
        let x = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 7.0, 7.0, 7.0]);
        let data = Dataset::from_parts(x, DVector::from_vec(vec![0.0, 1.0, 0.0])).unwrap();
        let s = standardize(&data).unwrap();
        assert_eq!(s.x().column(0).as_slice(), &[-1.0, 0.0, 1.0]);
        assert_eq!(s.x().column(1).as_slice(), &[7.0, 7.0, 7.0]);
        let rec = s.standardization().unwrap();
        assert_eq!(rec[0], ColumnScaling { mean: 2.0, sd: 1.0 });
        assert!(rec[1].is_constant());
    }

    #[test]
    fn standardize_needs_two_cases() {
        let data = Dataset::from_parts(DMatrix::from_element(1, 1, 3.0), DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(standardize(&data), Err(DataError::TooFewCases(1))));
    }

    #[test]
    fn standardize_random_matrix() {
        let n = 200;
        let cols: Vec<f64> = (0..4).flat_map(|j| normal_column(n, 1.0 + j as f64, 100 + j)).collect();
        let mut x = DMatrix::from_column_slice(n, 4, &cols);
        x.column_mut(2).add_scalar_mut(40.0);
        let y = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let s = standardize(&Dataset::from_parts(x, y).unwrap()).unwrap();
        for column in s.x().column_iter() {
            let mean = column.sum() / n as f64;
            let sd = (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((sd - 1.0).abs() < 1e-10, "sd {sd}");
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let schedule = tiered_sd_schedule(12);
        let (a, ta) = simulate_logistic(100, &schedule, 7).unwrap();
        let (b, tb) = simulate_logistic(100, &schedule, 7).unwrap();
        let (c, _) = simulate_logistic(100, &schedule, 8).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.y(), b.y());
        assert_eq!(ta, tb);
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn tiered_schedule_shape() {
        let s = tiered_sd_schedule(100);
        assert_eq!(s.len(), 100);
        assert!(s[..5].iter().all(|&v| v == 5.0));
        assert!(s[5..10].iter().all(|&v| v == 1.0));
        assert!(s[10..].iter().all(|&v| v == 0.2));
    }

    #[test]
    fn simulated_column_sd() {
        let (data, _) = simulate_logistic(100_000, &[5.0], 3).unwrap();
        let col = data.x().column(0);
        let mean = col.sum() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
        assert!((sd - 5.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn inner_count_rounding() {
        assert_eq!(inner_count(0.3, 100), 30);
        assert_eq!(inner_count(0.4, 10_000), 4000);
        assert_eq!(inner_count(0.35, 3196), 1119);
        assert_eq!(inner_count(0.301, 100), 31);
        assert_eq!(inner_count(1e-6, 10), 1);
    }

    #[test]
    fn split_sizes_and_fraction_validation() {
        let (data, theta) = simulate_logistic(100, &[1.0, 1.0], 4).unwrap();
        let plan = boundary_split(&data, &theta, 0.3, 5).unwrap();
        assert_eq!(plan.r0().len(), 30);
        assert_eq!(plan.r1().len(), 70);
        assert_eq!(plan.inner_steps(), 5);
        assert!((plan.fraction() - 0.3).abs() < 1e-15);
        for f in [0.0, 1.0, -0.2, f64::NAN] {
            assert!(matches!(boundary_split(&data, &theta, f, 5), Err(DataError::InvalidFraction(_))));
        }
    }

    #[test]
    fn boundary_case_always_inner() {
        // β = 1, α = 0: the case at x = 0 sits exactly on the decision boundary.
        let x = DMatrix::from_column_slice(5, 1, &[3.0, -2.0, 0.0, 1.5, -4.0]);
        let data = Dataset::from_parts(x, DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
        let mode = DVector::from_vec(vec![0.0, 1.0]);
        for f in [0.01, 0.2, 0.5, 0.99] {
            let plan = boundary_split(&data, &mode, f, 1).unwrap();
            assert!(plan.r0().contains(&2), "f = {f}");
        }
    }

    #[test]
    fn split_matches_brute_force_sort() {
        let (data, _) = simulate_logistic(20, &[1.0, 2.0], 11).unwrap();
        let mode = DVector::from_vec(vec![0.3, -0.7, 0.4]);
        // Oracle: score every case directly and sort by (distance, index).
        let mut scored: Vec<(f64, usize)> = (0..20)
            .map(|i| {
                let z = mode[0] + mode[1] * data.x()[(i, 0)] + mode[2] * data.x()[(i, 1)];
                ((1.0 / (1.0 + (-z).exp()) - 0.5).abs(), i)
            })
            .collect();
        scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for f in [0.1, 0.25, 0.5, 0.75] {
            let k = inner_count(f, 20);
            let mut expected: Vec<usize> = scored[..k].iter().map(|&(_, i)| i).collect();
            expected.sort_unstable();
            let plan = boundary_split(&data, &mode, f, 1).unwrap();
            assert_eq!(plan.r0(), expected.as_slice());
        }
    }
}
