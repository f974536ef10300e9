//! Hyperparameter initialisation and per-expert marginal-likelihood ascent.
//!
//! Experts share no parameters once the structure is fixed, so each one is
//! optimised independently with Adam on its own log marginal likelihood. Sum
//! weights are renormalised once, after every expert has converged.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::gp_leaf::{GpLeaf, KernelHyperparams};
use crate::inference::posterior_update;

/// How the second parameter of the lengthscale prior is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaParameterization {
    #[default]
    Rate,
    Scale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub early_stop_rel_tol: f64,
    pub early_stop_patience: usize,
    pub init_gamma_shape: f64,
    pub init_gamma_rate: f64,
    pub gamma_parameterization: GammaParameterization,
    pub init_signal_variance: f64,
    pub init_noise_variance: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            max_epochs: 200,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            early_stop_rel_tol: 1e-5,
            early_stop_patience: 10,
            init_gamma_shape: 2.0,
            init_gamma_rate: 3.0,
            gamma_parameterization: GammaParameterization::Rate,
            init_signal_variance: 1.0,
            init_noise_variance: 0.1,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        positive("init_gamma_shape", self.init_gamma_shape)?;
        positive("init_gamma_rate", self.init_gamma_rate)?;
        positive("init_signal_variance", self.init_signal_variance)?;
        positive("init_noise_variance", self.init_noise_variance)?;
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.early_stop_rel_tol.is_nan() || self.early_stop_rel_tol < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "early_stop_rel_tol must be non-negative, got {}",
                self.early_stop_rel_tol
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("early_stop_patience must be at least 1".into()));
        }
        Ok(())
    }

    fn gamma(&self) -> Gamma<f64> {
        let scale = match self.gamma_parameterization {
            GammaParameterization::Rate => 1.0 / self.init_gamma_rate,
            GammaParameterization::Scale => self.init_gamma_rate,
        };
        Gamma::new(self.init_gamma_shape, scale).expect("validated gamma parameters")
    }
}

/// Initial hyperparameters for `leaf_count` experts. Expert `i` draws its lengthscales
/// from its own random stream, so the result does not depend on scheduling.
pub fn init_hyperparams(leaf_count: usize, dims: usize, cfg: &TrainConfig) -> Result<Vec<KernelHyperparams>> {
    cfg.validate()?;
    if dims == 0 {
        return Err(Error::InvalidArgument("experts need at least one covariate".into()));
    }
    let gamma = cfg.gamma();
    (0..leaf_count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(i as u64);
            let ls: Vec<f64> = (0..dims)
                .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
                .collect();
            KernelHyperparams::new(&ls, cfg.init_signal_variance, cfg.init_noise_variance)
        })
        .collect()
}

/// Optimisation history of one expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafTrace {
    pub leaf: NodeId,
    /// Log marginal likelihood before the first step and after each epoch.
    pub mll: Vec<f64>,
    pub best_mll: f64,
    pub epochs: usize,
    /// Set when a step produced hyperparameters the expert could not factorise.
    pub stopped_on_failure: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub init_seconds: f64,
    pub optimize_seconds: f64,
    pub renormalize_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Summed expert log marginal likelihood; entry 0 is before training.
    /// Experts that stopped early contribute their final value to later epochs.
    pub epoch_total_mll: Vec<f64>,
    pub initial_total_mll: f64,
    pub final_total_mll: f64,
    pub root_log_evidence: f64,
    pub leaf_epochs: Vec<usize>,
    pub leaves_stopped_on_failure: usize,
    pub times: PhaseTimes,
}

/// Runs Adam ascent on one expert starting from `init`, leaving it fitted at the best
/// hyperparameters seen. A failure to factorise the initial covariance is an error; a
/// failure after a step ends this expert's optimisation.
pub fn optimize_leaf(leaf: &mut GpLeaf, init: KernelHyperparams, cfg: &TrainConfig) -> Result<LeafTrace> {
    leaf.set_hyperparams(init)?;
    leaf.fit()?;
    let mut theta = leaf.hyperparams.to_vec();
    let mut best_theta = theta.clone();
    let mut best = leaf.mll()?;
    let mut trace = vec![best];
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut flat_epochs = 0;
    let mut stopped_on_failure = false;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);

    for t in 1..=cfg.max_epochs {
        let grad = leaf.mll_gradient()?;
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for k in 0..theta.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
            v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
            theta[k] += cfg.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_epsilon);
        }
        let step = KernelHyperparams::from_slice(&theta).and_then(|h| {
            leaf.set_hyperparams(h)?;
            leaf.fit()?;
            leaf.mll()
        });
        let mll = match step {
            Ok(mll) if mll.is_finite() => mll,
            Ok(_) | Err(_) => {
                log::warn!("expert stopped after epoch {}: step left the stable region", t - 1);
                stopped_on_failure = true;
                break;
            }
        };
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(mll);
        if mll > best {
            best = mll;
            best_theta.clone_from(&theta);
        }
        let rel = (mll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
        if rel < cfg.early_stop_rel_tol {
            flat_epochs += 1;
            if flat_epochs >= cfg.early_stop_patience {
                break;
            }
        } else {
            flat_epochs = 0;
        }
    }

    leaf.set_hyperparams(KernelHyperparams::from_slice(&best_theta)?)?;
    leaf.fit()?;
    Ok(LeafTrace {
        leaf: 0,
        epochs: trace.len() - 1,
        mll: trace,
        best_mll: best,
        stopped_on_failure,
    })
}

/// Initialises and optimises every expert, then replaces the sum weights by posterior weights.
pub fn train(circuit: &mut Circuit, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let leaf_ids = circuit.leaf_ids();
    let inits = init_hyperparams(leaf_ids.len(), circuit.dims, cfg)?;
    let init_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let slot: Vec<Option<usize>> = {
        let mut s = vec![None; circuit.nodes.len()];
        for (i, &id) in leaf_ids.iter().enumerate() {
            s[id] = Some(i);
        }
        s
    };
    let mut traces: Vec<LeafTrace> = circuit
        .nodes
        .par_iter_mut()
        .enumerate()
        .filter_map(|(id, node)| match &mut node.kind {
            NodeKind::Leaf(leaf) => {
                let init = inits[slot[id].expect("every leaf has a slot")].clone();
                Some(
                    optimize_leaf(leaf, init, cfg)
                        .map(|t| LeafTrace { leaf: id, ..t })
                        .map_err(|e| Error::Leaf {
                            leaf: id,
                            source: Box::new(e),
                        }),
                )
            }
            _ => None,
        })
        .collect::<Result<Vec<_>>>()?;
    traces.sort_by_key(|t| t.leaf);
    let optimize_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let root_log_evidence = posterior_update(circuit)?;
    let renormalize_seconds = start.elapsed().as_secs_f64();

    let longest = traces.iter().map(|t| t.mll.len()).max().unwrap_or(1);
    let epoch_total_mll: Vec<f64> = (0..longest)
        .map(|e| traces.iter().map(|t| t.mll[e.min(t.mll.len() - 1)]).sum())
        .collect();
    let final_total_mll = circuit
        .leaves()
        .map(|(_, l)| l.mll())
        .sum::<Result<f64>>()?;
    let report = TrainReport {
        initial_total_mll: epoch_total_mll[0],
        epoch_total_mll,
        final_total_mll,
        root_log_evidence,
        leaf_epochs: traces.iter().map(|t| t.epochs).collect(),
        leaves_stopped_on_failure: traces.iter().filter(|t| t.stopped_on_failure).count(),
        times: PhaseTimes {
            init_seconds,
            optimize_seconds,
            renormalize_seconds,
        },
    };
    log::info!(
        "trained {} experts: total mll {:.4} -> {:.4}, root log-evidence {:.4}",
        traces.len(),
        report.initial_total_mll,
        report.final_total_mll,
        report.root_log_evidence
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build, StructureConfig};
    use crate::data::{synth_multioutput, Dataset};
    use crate::gp_leaf::gram_matrix;
    use crate::math::logsumexp;
    use crate::region::Region;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn gamma_draws_have_the_prior_mean() {
        let cfg = TrainConfig::default();
        let hs = init_hyperparams(1000, 100, &cfg).unwrap();
        let draws: Vec<f64> = hs.iter().flat_map(|h| h.lengthscales()).collect();
        assert_eq!(draws.len(), 100_000);
        assert!(draws.iter().all(|&l| l > 0.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 2.0 / 3.0).abs() < 0.01 * 2.0 / 3.0, "mean {mean}");

        let scale = TrainConfig {
            gamma_parameterization: GammaParameterization::Scale,
            ..cfg
        };
        let hs = init_hyperparams(1000, 100, &scale).unwrap();
        let mean = hs.iter().flat_map(|h| h.lengthscales()).sum::<f64>() / 100_000.0;
        assert!((mean - 6.0).abs() < 0.06, "mean {mean}");
    }

    #[test]
    fn initialisation_is_seeded() {
        let cfg = TrainConfig::default();
        let a = init_hyperparams(5, 3, &cfg).unwrap();
        assert_eq!(a, init_hyperparams(5, 3, &cfg).unwrap());
        // a prefix of experts does not depend on how many follow
        assert_eq!(a[..2], init_hyperparams(2, 3, &cfg).unwrap()[..]);
        let other = init_hyperparams(5, 3, &TrainConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
        assert!(a.iter().all(|h| h.signal_variance() == 1.0 && (h.noise_variance() - 0.1).abs() < 1e-15));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { adam_beta2: 0.0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { init_gamma_rate: -3.0, ..Default::default() },
        ];
        for cfg in bad {
            assert_eq!(cfg.validate().unwrap_err().category(), "invalid-argument");
        }
    }

    fn gp_sample(n: usize, lengthscale: f64, noise: f64, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let h = KernelHyperparams::new(&[lengthscale], 1.0, noise).unwrap();
        let mut k = gram_matrix(&x, &h).unwrap();
        for i in 0..n {
            k[(i, i)] += noise;
        }
        let l = k.cholesky().unwrap().unpack();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        (x, l * z)
    }

    #[test]
    fn recovers_a_known_lengthscale() {
        let (x, y) = gp_sample(200, 0.5, 0.01, 5);
        let mut leaf = GpLeaf::new(0, Region::unbounded(1), KernelHyperparams::new(&[1.0], 1.0, 0.1).unwrap(), &x, &y, (0..200).collect()).unwrap();
        let cfg = TrainConfig {
            max_epochs: 500,
            ..Default::default()
        };
        let init = init_hyperparams(1, 1, &cfg).unwrap().remove(0);
        let trace = optimize_leaf(&mut leaf, init, &cfg).unwrap();
        let ls = leaf.hyperparams.lengthscales()[0];
        assert!((0.3..=0.8).contains(&ls), "lengthscale {ls}, trace len {}", trace.mll.len());
        assert!(trace.best_mll >= trace.mll[0]);
    }

    fn trained(data: &Dataset, m: usize, cfg: &TrainConfig) -> (Circuit, TrainReport) {
        let mut c = build(data, &StructureConfig { leaf_threshold: m, ..Default::default() }).unwrap();
        let r = train(&mut c, cfg).unwrap();
        (c, r)
    }

    #[test]
    fn zero_epochs_keeps_the_initial_hyperparameters() {
        let data = synth_multioutput(60, 2, 2, 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let (c, report) = trained(&data, 20, &cfg);
        let inits = init_hyperparams(c.leaf_ids().len(), 2, &cfg).unwrap();
        for ((_, leaf), h) in c.leaves().zip(&inits) {
            assert_eq!(&leaf.hyperparams, h);
        }
        assert!(report.leaf_epochs.iter().all(|&e| e == 0));
        assert_eq!(report.epoch_total_mll.len(), 1);
        for id in c.sum_ids() {
            if let NodeKind::Sum { log_weights, prior_log_weights, .. } = &c.node(id).kind {
                assert!(logsumexp(log_weights).abs() < 1e-12);
                assert_ne!(log_weights, prior_log_weights);
            }
        }
    }

    #[test]
    fn training_never_lowers_the_total_mll() {
        let cfg = TrainConfig {
            max_epochs: 40,
            ..Default::default()
        };
        for seed in 0..20 {
            let data = synth_multioutput(50, 2, 2, 100 + seed).unwrap();
            let (_, r) = trained(&data, 20, &cfg);
            assert!(r.final_total_mll >= r.initial_total_mll, "seed {seed}: {r:?}");
            assert!(r.leaf_epochs.iter().all(|&e| e <= cfg.max_epochs));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_multioutput(70, 3, 2, 9).unwrap();
        let cfg = TrainConfig {
            max_epochs: 25,
            ..Default::default()
        };
        let (a, _) = trained(&data, 20, &cfg);
        let (b, _) = trained(&data, 20, &cfg);
        let ja = serde_json::to_string(&a.to_json()).unwrap();
        assert_eq!(ja, serde_json::to_string(&b.to_json()).unwrap());
    }

    #[test]
    fn leaf_order_does_not_matter() {
        let data = synth_multioutput(70, 2, 2, 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 15,
            ..Default::default()
        };
        let (reference, _) = trained(&data, 20, &cfg);

        let mut c = build(&data, &StructureConfig { leaf_threshold: 20, ..Default::default() }).unwrap();
        let ids = c.leaf_ids();
        let inits = init_hyperparams(ids.len(), 2, &cfg).unwrap();
        for (i, &id) in ids.iter().enumerate().rev() {
            optimize_leaf(c.leaf_mut(id).unwrap(), inits[i].clone(), &cfg).unwrap();
        }
        posterior_update(&mut c).unwrap();
        assert_eq!(c.to_json(), reference.to_json());
    }
}
