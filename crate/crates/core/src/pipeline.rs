//! End-to-end fitting: preprocessing, structure construction and training.

use crate::circuit::build;
use crate::config::RunConfig;
use crate::data::{fit_pca, split, Dataset, Standardization};
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::model::Model;
use crate::training::{train, TrainReport};

/// Standardises (and optionally projects) `raw`, builds the circuit and trains it.
pub fn fit(raw: &Dataset, cfg: &RunConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if raw.p() != cfg.pipeline.n_outputs {
        return Err(Error::Schema {
            expected: format!("{} output columns", cfg.pipeline.n_outputs),
            found: format!("{}", raw.p()),
        });
    }
    let standardization = cfg.pipeline.standardize.then(|| Standardization::fit(raw));
    let (mut x, y) = match &standardization {
        Some(s) => (s.transform_x(&raw.x), s.transform_y(&raw.y)),
        None => (raw.x.clone(), raw.y.clone()),
    };
    let pca = match cfg.pipeline.pca_dims {
        Some(k) => {
            let t = fit_pca(&x, k)?;
            x = crate::data::apply_pca(&x, &t)?;
            log::info!(
                "PCA keeps {k} of {} dimensions, {:.4} of the variance",
                raw.d(),
                t.explained_variance_ratio().iter().sum::<f64>()
            );
            Some(t)
        }
        None => None,
    };
    let data = Dataset::new(x, y)?;
    let mut circuit = build(&data, &cfg.structure)?;
    log::info!(
        "built circuit with {} nodes and {} experts",
        circuit.nodes.len(),
        circuit.leaf_ids().len()
    );
    let report = train(&mut circuit, &cfg.train)?;
    let model = Model {
        input_dims: raw.d(),
        column_names: raw.column_names.clone(),
        standardization,
        pca,
        structure: cfg.structure.clone(),
        train: cfg.train.clone(),
        data,
        circuit,
    };
    Ok((model, report))
}

/// Result of fitting on part of a data set and scoring the held-out rows.
#[derive(Debug)]
pub struct HoldoutRun {
    pub model: Model,
    pub report: TrainReport,
    pub eval: EvalResult,
    pub n_train: usize,
}

/// Splits `raw` with the configured fraction and seed, fits on the training part and
/// evaluates on the rest.
pub fn fit_and_evaluate(raw: &Dataset, cfg: &RunConfig) -> Result<HoldoutRun> {
    let fraction = cfg
        .pipeline
        .test_fraction
        .ok_or_else(|| Error::InvalidArgument("a held-out evaluation needs test_fraction".into()))?;
    let (train_part, test_part) = split(raw, fraction, cfg.pipeline.split_seed)?;
    let (model, report) = fit(&train_part, cfg)?;
    let eval = model.evaluate(&test_part, cfg.pipeline.nlpd_mode, cfg.pipeline.unstandardized_metrics)?;
    Ok(HoldoutRun {
        model,
        report,
        eval,
        n_train: train_part.n(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_multioutput;
    use crate::inference::NlpdMode;
    use crate::model::Model;
    use nalgebra::DMatrix;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.structure.leaf_threshold = 25;
        cfg.train.max_epochs = 20;
        cfg.pipeline.n_outputs = 2;
        cfg.pipeline.test_fraction = Some(0.25);
        cfg
    }

    #[test]
    fn model_round_trip_preserves_metrics() {
        let data = synth_multioutput(80, 3, 2, 2).unwrap();
        let run = fit_and_evaluate(&data, &small_config()).unwrap();
        let text = run.model.to_json();
        let back = Model::from_file(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.to_json(), text);
        let (_, test) = split(&data, 0.25, 0).unwrap();
        let again = back.evaluate(&test, NlpdMode::MomentMatched, false).unwrap();
        assert_eq!(again, run.eval);
        assert_eq!(run.eval.n_test, 20);
        assert_eq!(run.n_train, 60);
    }

    #[test]
    fn original_units_shift_nlpd_by_the_log_scale() {
        let data = synth_multioutput(60, 2, 2, 8).unwrap();
        let mut scaled = data.clone();
        scaled.y *= 10.0;
        let (model, _) = fit(&scaled, &small_config()).unwrap();
        let std = model.evaluate(&scaled, NlpdMode::MomentMatched, false).unwrap();
        let orig = model.evaluate(&scaled, NlpdMode::MomentMatched, true).unwrap();
        let y_std = &model.standardization.as_ref().unwrap().y_std;
        let log_jac: f64 = y_std.iter().map(|v| v.ln()).sum();
        assert!((orig.mean_nlpd - std.mean_nlpd - log_jac).abs() < 1e-9);
        for ((o, s), sd) in orig.per_output_rmse.iter().zip(&std.per_output_rmse).zip(y_std) {
            assert!((o - s * sd).abs() < 1e-9 * s * sd);
        }
        assert!(!orig.standardized && std.standardized);
    }

    #[test]
    fn predictions_come_back_in_original_units() {
        let data = synth_multioutput(60, 2, 2, 3).unwrap();
        let mut shifted = data.clone();
        shifted.y.add_scalar_mut(100.0);
        let (model, _) = fit(&shifted, &small_config()).unwrap();
        let preds = model.predict(&shifted.x.rows(0, 5).into_owned()).unwrap();
        for (i, m) in preds.iter().enumerate() {
            for p in 0..2 {
                assert!((m.mean[p] - shifted.y[(i, p)]).abs() < 3.0);
                assert!(m.covariance[(p, p)] >= 0.0);
            }
        }
    }

    #[test]
    fn pca_models_expect_the_original_width() {
        let data = synth_multioutput(60, 4, 2, 3).unwrap();
        let mut cfg = small_config();
        cfg.pipeline.pca_dims = Some(2);
        let (model, _) = fit(&data, &cfg).unwrap();
        assert_eq!(model.circuit.dims, 2);
        assert!(model.predict(&data.x).is_ok());
        let err = model.predict(&DMatrix::zeros(1, 2)).unwrap_err();
        assert_eq!(err.category(), "schema");
    }

    #[test]
    fn output_count_mismatch_is_a_schema_error() {
        let data = synth_multioutput(40, 2, 2, 3).unwrap();
        let (model, _) = fit(&data, &small_config()).unwrap();
        let other = synth_multioutput(10, 2, 3, 3).unwrap();
        let err = model.evaluate(&other, NlpdMode::MomentMatched, false).unwrap_err();
        assert_eq!(err.category(), "schema");
        assert!(err.to_string().contains("2 output") && err.to_string().contains("3 output"));
    }
}
