//! Regression metrics: RMSE averaged over outputs, MAE over all entries, and mean NLPD.

use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::Circuit;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{log_predictive_density, NlpdMode};

fn check_shapes(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: targets {:?}, predictions {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("no rows to score".into()));
    }
    Ok(())
}

/// Root mean squared error of each output column.
pub fn per_output_rmse(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_shapes(y, y_hat)?;
    let n = y.nrows() as f64;
    Ok(y.column_iter()
        .zip(y_hat.column_iter())
        .map(|(a, b)| ((a - b).norm_squared() / n).sqrt())
        .collect())
}

/// Mean over outputs of the per-output RMSE (not the RMSE of the pooled errors).
pub fn rmse(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    let per = per_output_rmse(y, y_hat)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn mae(y: &DMatrix<f64>, y_hat: &DMatrix<f64>) -> Result<f64> {
    check_shapes(y, y_hat)?;
    Ok((y - y_hat).abs().sum() / y.len() as f64)
}

/// Mean negative log predictive density of the rows of `test`.
pub fn mean_nlpd(circuit: &Circuit, test: &Dataset, mode: NlpdMode) -> Result<f64> {
    let values = (0..test.n())
        .into_par_iter()
        .map(|i| {
            let y: Vec<f64> = test.y.row(i).iter().copied().collect();
            log_predictive_density(circuit, &test.x_row(i), &y, mode).map(|l| -l)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub rmse: f64,
    pub mae: f64,
    /// NLPD under `nlpd_mode`.
    pub mean_nlpd: f64,
    pub nlpd_mode: NlpdMode,
    pub mean_nlpd_moment_matched: f64,
    pub mean_nlpd_exact_mixture: f64,
    pub per_output_rmse: Vec<f64>,
    pub n_test: usize,
    /// False when errors and densities are in the original target units.
    pub standardized: bool,
}

impl EvalResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

/// One `key=value` pair per line.
impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.nlpd_mode {
            NlpdMode::MomentMatched => "moment_matched",
            NlpdMode::ExactMixture => "exact_mixture",
        };
        writeln!(f, "n_test={}", self.n_test)?;
        writeln!(f, "standardized={}", self.standardized)?;
        writeln!(f, "rmse={}", self.rmse)?;
        writeln!(f, "mae={}", self.mae)?;
        writeln!(f, "mean_nlpd={}", self.mean_nlpd)?;
        writeln!(f, "nlpd_mode={mode}")?;
        writeln!(f, "mean_nlpd_moment_matched={}", self.mean_nlpd_moment_matched)?;
        writeln!(f, "mean_nlpd_exact_mixture={}", self.mean_nlpd_exact_mixture)?;
        for (p, v) in self.per_output_rmse.iter().enumerate() {
            writeln!(f, "rmse_output_{p}={v}")?;
        }
        Ok(())
    }
}
