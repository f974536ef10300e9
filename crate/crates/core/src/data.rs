//! Dataset ingestion and preprocessing: CSV loading, standardisation, PCA,
//! seeded train/test splits and a synthetic multi-output generator.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariates `x` (N×D) paired with targets `y` (N×P).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub column_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(Error::InvalidArgument(format!(
                "covariates have {} rows, targets have {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "dataset needs at least one covariate and one output column".into(),
            ));
        }
        for (name, m) in [("covariate", &x), ("target", &y)] {
            if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "non-finite {name} value at row {}",
                    i % m.nrows()
                )));
            }
        }
        Ok(Dataset {
            x,
            y,
            column_names: None,
            standardization: None,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// New dataset made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            column_names: self.column_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// `None` detects a header from the first record: it is a header when any
    /// field fails to parse as a number.
    pub has_header: Option<bool>,
}

/// Numeric table and optional header of a comma-separated file.
fn read_table(path: &Path, options: &CsvOptions) -> Result<(DMatrix<f64>, Option<Vec<String>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut header = None;
    let mut values: Vec<f64> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 {
            let numeric = rec.iter().all(|f| f.parse::<f64>().is_ok());
            if options.has_header.unwrap_or(!numeric) {
                header = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
                continue;
            }
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                message: format!("column {}: cannot parse {field:?} as a number", c + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    message: format!("column {}: non-finite value {field:?}", c + 1),
                });
            }
            values.push(v);
        }
    }
    let width = width
        .or(header.as_ref().map(Vec::len))
        .ok_or_else(|| Error::InvalidArgument(format!("{} contains no data", path.display())))?;
    let n = values.len() / width;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("{} contains no data rows", path.display())));
    }
    Ok((DMatrix::from_row_slice(n, width, &values), header))
}

/// Reads a comma-separated file whose last `n_outputs` columns are targets.
pub fn load_csv(path: impl AsRef<Path>, n_outputs: usize, options: &CsvOptions) -> Result<Dataset> {
    let (all, header) = read_table(path.as_ref(), options)?;
    let width = all.ncols();
    if n_outputs == 0 || n_outputs >= width {
        return Err(Error::Schema {
            expected: format!("more than {n_outputs} columns (at least one covariate)"),
            found: format!("{width} columns"),
        });
    }
    let d = width - n_outputs;
    let mut data = Dataset::new(all.columns(0, d).into_owned(), all.columns(d, n_outputs).into_owned())?;
    data.column_names = header;
    Ok(data)
}

/// Reads a comma-separated file of covariates only.
pub fn load_csv_covariates(path: impl AsRef<Path>, options: &CsvOptions) -> Result<DMatrix<f64>> {
    Ok(read_table(path.as_ref(), options)?.0)
}

/// Per-column mean and standard deviation of covariates and targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

fn column_stats(m: &DMatrix<f64>, what: &str) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    m.column_iter()
        .enumerate()
        .map(|(c, col)| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std > 0.0 && std.is_finite() {
                (mean, std)
            } else {
                log::warn!("{what} column {c} is constant; leaving its scale unchanged");
                (mean, 1.0)
            }
        })
        .unzip()
}

fn scale_columns(m: &DMatrix<f64>, mean: &[f64], std: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / std[j])
}

fn unscale_columns(m: &DMatrix<f64>, mean: &[f64], std: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * std[j] + mean[j])
}

impl Standardization {
    /// Statistics of the given (training) data, using the population standard deviation.
    pub fn fit(data: &Dataset) -> Self {
        let (x_mean, x_std) = column_stats(&data.x, "covariate");
        let (y_mean, y_std) = column_stats(&data.y, "target");
        Standardization {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        scale_columns(x, &self.x_mean, &self.x_std)
    }

    pub fn transform_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        scale_columns(y, &self.y_mean, &self.y_std)
    }

    pub fn inverse_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        unscale_columns(x, &self.x_mean, &self.x_std)
    }

    pub fn inverse_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        unscale_columns(y, &self.y_mean, &self.y_std)
    }

    /// Maps a standardised output covariance back to original units.
    pub fn inverse_y_covariance(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
            cov[(i, j)] * self.y_std[i] * self.y_std[j]
        })
    }
}

/// Standardises every column to zero mean and unit variance.
pub fn standardize(data: &Dataset) -> (Dataset, Standardization) {
    let stats = Standardization::fit(data);
    (apply_standardization(data, &stats), stats)
}

/// Applies previously computed statistics, e.g. training statistics to test data.
pub fn apply_standardization(data: &Dataset, stats: &Standardization) -> Dataset {
    Dataset {
        x: stats.transform_x(&data.x),
        y: stats.transform_y(&data.y),
        column_names: data.column_names.clone(),
        standardization: Some(stats.clone()),
    }
}

/// Undoes [`apply_standardization`].
pub fn invert_standardization(data: &Dataset, stats: &Standardization) -> Dataset {
    Dataset {
        x: stats.inverse_x(&data.x),
        y: stats.inverse_y(&data.y),
        column_names: data.column_names.clone(),
        standardization: None,
    }
}

/// Linear projection onto the leading principal axes of the training covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    pub mean: Vec<f64>,
    /// D×k, orthonormal columns, stored column-major.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// Sum of all D eigenvalues of the sample covariance.
    pub total_variance: f64,
}

impl PcaTransform {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn input_dims(&self) -> usize {
        self.mean.len()
    }

    pub fn components_matrix(&self) -> DMatrix<f64> {
        let d = self.input_dims();
        DMatrix::from_fn(d, self.k(), |i, j| self.components[j][i])
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }
}

/// Fits a PCA with `k` components from the eigendecomposition of the sample covariance.
pub fn fit_pca(x: &DMatrix<f64>, k: usize) -> Result<PcaTransform> {
    let (n, d) = x.shape();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "PCA needs 1 <= k <= {d}, got {k}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("PCA needs at least two rows".into()));
    }
    let mean: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let components = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, a)| if a.abs() > best.1.abs() { (i, a) } else { best });
            if pivot.1 < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        })
        .collect();
    let explained_variance = order[..k]
        .iter()
        .map(|&c| eig.eigenvalues[c].max(0.0))
        .collect();
    let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    Ok(PcaTransform {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

/// Projects rows of `x` onto the principal axes.
pub fn apply_pca(x: &DMatrix<f64>, t: &PcaTransform) -> Result<DMatrix<f64>> {
    if x.ncols() != t.input_dims() {
        return Err(Error::Schema {
            expected: format!("{} covariate columns", t.input_dims()),
            found: format!("{} columns", x.ncols()),
        });
    }
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - t.mean[j]);
    Ok(centered * t.components_matrix())
}

/// Seeded shuffle split; the test part receives `floor(N * test_fraction)` rows.
/// Both parts keep the original row order.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(data.n(), test_fraction, seed)?;
    Ok((data.select_rows(&train), data.select_rows(&test)))
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// Parameters of the synthetic multi-output generator.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub n_latent: usize,
    /// p×n_latent mixing matrix; drawn from a standard normal when absent.
    pub mixing: Option<DMatrix<f64>>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, p: usize, seed: u64) -> Self {
        SynthSpec {
            n,
            d,
            p,
            n_latent: 2,
            mixing: None,
            noise_std: 0.1,
            seed,
        }
    }
}

/// Outputs are linear mixtures of smooth random latent functions plus Gaussian noise.
pub fn synth_multioutput(n: usize, d: usize, p: usize, seed: u64) -> Result<Dataset> {
    synthesize(&SynthSpec::new(n, d, p, seed))
}

/// Latent functions for [`synthesize`]: sums of three random sinusoids.
struct Latent {
    freqs: Vec<Vec<f64>>,
    phases: Vec<f64>,
    amps: Vec<f64>,
}

impl Latent {
    fn draw(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let mut freqs = Vec::new();
        let mut phases = Vec::new();
        let mut amps = Vec::new();
        for _ in 0..3 {
            freqs.push((0..d).map(|_| rng.random_range(-1.5..1.5)).collect());
            phases.push(rng.random_range(0.0..std::f64::consts::TAU));
            amps.push(rng.random_range(0.5..1.0));
        }
        Latent { freqs, phases, amps }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.freqs
            .iter()
            .zip(&self.phases)
            .zip(&self.amps)
            .map(|((w, ph), a)| a * (w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + ph).sin())
            .sum()
    }
}

pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec { n, d, p, n_latent, .. } = *spec;
    if n == 0 || d == 0 || p == 0 || n_latent == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents: Vec<Latent> = (0..n_latent).map(|_| Latent::draw(&mut rng, d)).collect();
    let mixing = match &spec.mixing {
        Some(m) if m.shape() != (p, n_latent) => {
            return Err(Error::InvalidArgument(format!(
                "mixing matrix must be {p}x{n_latent}, got {:?}",
                m.shape()
            )))
        }
        Some(m) => m.clone(),
        None => DMatrix::from_fn(p, n_latent, |_, _| rng.sample(StandardNormal)),
    };
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let f = DVector::from_iterator(n_latent, latents.iter().map(|l| l.eval(&xi)));
        let yi = &mixing * f;
        for j in 0..p {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] = yi[j] + spec.noise_std * e;
        }
    }
    Dataset::new(x, y)
}
