//! Trained models: the circuit together with the preprocessing that produced its inputs.
//!
//! A model file is a single JSON document holding the standardisation
//! statistics, the optional PCA projection, the configurations used, the
//! preprocessed training data and the circuit. Leaves are refitted on load.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, CircuitJson, StructureConfig};
use crate::data::{apply_pca, Dataset, PcaTransform, Standardization};
use crate::error::{Error, Result};
use crate::inference::{log_predictive_density, predict, NlpdMode, PredictiveMoments};
use crate::metrics::{mae, per_output_rmse, EvalResult};
use crate::training::TrainConfig;

pub const MODEL_FORMAT: &str = "momogp-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    /// Covariate columns expected in input files, before any projection.
    pub input_dims: usize,
    pub n_outputs: usize,
    pub column_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
    pub pca: Option<PcaTransform>,
    pub structure: StructureConfig,
    pub train: TrainConfig,
    /// Preprocessed training covariates, one array per row.
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<Vec<f64>>,
    pub circuit: CircuitJson,
}

/// A trained circuit plus the transforms that map raw rows into its input space.
#[derive(Clone, Debug)]
pub struct Model {
    pub input_dims: usize,
    pub column_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
    pub pca: Option<PcaTransform>,
    pub structure: StructureConfig,
    pub train: TrainConfig,
    /// Training data in model space.
    pub data: Dataset,
    pub circuit: Circuit,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Format(format!("{what} rows have differing lengths")));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), width, rows.iter().flatten().copied()))
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    // temporary files are created owner-only
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

impl Model {
    pub fn n_outputs(&self) -> usize {
        self.circuit.outputs
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            input_dims: self.input_dims,
            n_outputs: self.n_outputs(),
            column_names: self.column_names.clone(),
            standardization: self.standardization.clone(),
            pca: self.pca.clone(),
            structure: self.structure.clone(),
            train: self.train.clone(),
            train_x: rows_of(&self.data.x),
            train_y: rows_of(&self.data.y),
            circuit: self.circuit.to_json(),
        }
    }

    /// Restores a model and refits its leaves.
    pub fn from_file(file: ModelFile) -> Result<Model> {
        if file.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file (format {:?})", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                file.version
            )));
        }
        let data = Dataset::new(matrix_of(&file.train_x, "train_x")?, matrix_of(&file.train_y, "train_y")?)?;
        let expected_dims = file.pca.as_ref().map_or(file.input_dims, PcaTransform::k);
        if data.d() != expected_dims || data.p() != file.n_outputs {
            return Err(Error::Format("stored training data does not match the declared shape".into()));
        }
        let mut circuit = Circuit::from_json(&file.circuit, &data)?;
        if let Some(v) = circuit.validate().first() {
            return Err(Error::Format(format!("stored circuit is invalid: {v:?}")));
        }
        circuit.fit_leaves()?;
        Ok(Model {
            input_dims: file.input_dims,
            column_names: file.column_names,
            standardization: file.standardization,
            pca: file.pca,
            structure: file.structure,
            train: file.train,
            data,
            circuit,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&self.to_file()).expect("model serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Model::from_file(file)
    }

    fn check_covariates(&self, d: usize) -> Result<()> {
        if d != self.input_dims {
            return Err(Error::Schema {
                expected: format!("{} covariate columns", self.input_dims),
                found: format!("{d}"),
            });
        }
        Ok(())
    }

    /// Maps raw covariates into the circuit's input space.
    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_covariates(x.ncols())?;
        let x = match &self.standardization {
            Some(s) => s.transform_x(x),
            None => x.clone(),
        };
        match &self.pca {
            Some(p) => apply_pca(&x, p),
            None => Ok(x),
        }
    }

    /// Latent predictive moments for raw covariate rows, in original target units.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<PredictiveMoments>> {
        let xm = self.transform_x(x)?;
        (0..xm.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = xm.row(i).iter().copied().collect();
                let m = predict(&self.circuit, &row)?;
                Ok(match &self.standardization {
                    Some(s) => PredictiveMoments {
                        mean: m.mean.zip_zip_map(&DVector::from_column_slice(&s.y_std), &DVector::from_column_slice(&s.y_mean), |v, sd, mu| v * sd + mu),
                        covariance: s.inverse_y_covariance(&m.covariance),
                    },
                    None => m,
                })
            })
            .collect()
    }

    /// Scores raw test rows. Metrics are in standardised units unless `original_units` is set.
    pub fn evaluate(&self, test: &Dataset, nlpd_mode: NlpdMode, original_units: bool) -> Result<EvalResult> {
        if test.d() != self.input_dims || test.p() != self.n_outputs() {
            return Err(Error::Schema {
                expected: format!("{} covariate and {} output columns", self.input_dims, self.n_outputs()),
                found: format!("{} covariate and {} output columns", test.d(), test.p()),
            });
        }
        let xm = self.transform_x(&test.x)?;
        let ym = match &self.standardization {
            Some(s) => s.transform_y(&test.y),
            None => test.y.clone(),
        };
        let rows = (0..test.n())
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = xm.row(i).iter().copied().collect();
                let y: Vec<f64> = ym.row(i).iter().copied().collect();
                let mean = predict(&self.circuit, &x)?.mean;
                let mm = -log_predictive_density(&self.circuit, &x, &y, NlpdMode::MomentMatched)?;
                let exact = -log_predictive_density(&self.circuit, &x, &y, NlpdMode::ExactMixture)?;
                Ok((mean, mm, exact))
            })
            .collect::<Result<Vec<_>>>()?;

        let p = self.n_outputs();
        let mut y_hat = DMatrix::from_fn(test.n(), p, |i, j| rows[i].0[j]);
        let n = rows.len() as f64;
        let mut nlpd_mm = rows.iter().map(|r| r.1).sum::<f64>() / n;
        let mut nlpd_exact = rows.iter().map(|r| r.2).sum::<f64>() / n;
        let mut y_ref = ym;
        let standardized = !(original_units && self.standardization.is_some());
        if let (false, Some(s)) = (standardized, &self.standardization) {
            y_hat = s.inverse_y(&y_hat);
            y_ref = test.y.clone();
            // densities pick up the Jacobian of the affine map back to original units
            let log_jac: f64 = s.y_std.iter().map(|v| v.ln()).sum();
            nlpd_mm += log_jac;
            nlpd_exact += log_jac;
        }
        let per = per_output_rmse(&y_ref, &y_hat)?;
        Ok(EvalResult {
            rmse: per.iter().sum::<f64>() / per.len() as f64,
            mae: mae(&y_ref, &y_hat)?,
            mean_nlpd: match nlpd_mode {
                NlpdMode::MomentMatched => nlpd_mm,
                NlpdMode::ExactMixture => nlpd_exact,
            },
            nlpd_mode,
            mean_nlpd_moment_matched: nlpd_mm,
            mean_nlpd_exact_mixture: nlpd_exact,
            per_output_rmse: per,
            n_test: test.n(),
            standardized,
        })
    }
}
