//! Exact posterior inference and moment-matched prediction.
//!
//! Evidence flows bottom-up: a leaf contributes its GP marginal likelihood,
//! products add the log-evidence of their children and sums take a
//! log-sum-exp over prior-weighted children. Posterior sum weights follow as
//! `log w' = log w + log Z_child - log Z_sum`.
//!
//! The predictive distribution at a test point is a mixture of Gaussians over
//! the induced trees reaching that point. [`predict`] returns its mean and
//! full covariance; cross-output covariance arises only from the spread term
//! at sum nodes, since output products are block diagonal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::gp_leaf::jittered_cholesky_factor;
use crate::math::{logsumexp, normal_log_pdf, LN_2PI};

/// Log marginal likelihood of each node's data under its sub-circuit, indexed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceCache {
    pub log_evidence: Vec<f64>,
}

impl EvidenceCache {
    pub fn root(&self, circuit: &Circuit) -> f64 {
        self.log_evidence[circuit.root]
    }
}

/// Computes the log-evidence of every node from the fitted leaves and the prior sum weights.
pub fn evidence(circuit: &Circuit) -> Result<EvidenceCache> {
    let mut z = vec![0.0; circuit.nodes.len()];
    for id in (0..circuit.nodes.len()).rev() {
        z[id] = match &circuit.nodes[id].kind {
            NodeKind::Leaf(leaf) => leaf.mll().map_err(|e| Error::Leaf {
                leaf: id,
                source: Box::new(e),
            })?,
            NodeKind::Sum {
                children,
                prior_log_weights,
                ..
            } => {
                let terms: Vec<f64> = children
                    .iter()
                    .zip(prior_log_weights)
                    .map(|(&c, w)| w + z[c])
                    .collect();
                logsumexp(&terms)
            }
            NodeKind::ProductX { children, .. } | NodeKind::ProductY { children } => {
                children.iter().map(|&c| z[c]).sum()
            }
        };
    }
    Ok(EvidenceCache { log_evidence: z })
}

/// Replaces every sum node's weights by its posterior weights given `evidence`.
pub fn renormalize(circuit: &mut Circuit, evidence: &EvidenceCache) -> Result<()> {
    if evidence.log_evidence.len() != circuit.nodes.len() {
        return Err(Error::InvalidArgument(format!(
            "evidence covers {} nodes, circuit has {}",
            evidence.log_evidence.len(),
            circuit.nodes.len()
        )));
    }
    let z = &evidence.log_evidence;
    for (id, node) in circuit.nodes.iter_mut().enumerate() {
        if let NodeKind::Sum {
            children,
            log_weights,
            prior_log_weights,
        } = &mut node.kind
        {
            let mut post: Vec<f64> = children
                .iter()
                .zip(prior_log_weights.iter())
                .map(|(&c, w)| w + z[c] - z[id])
                .collect();
            // remove the rounding left over by the subtraction
            let norm = logsumexp(&post);
            post.iter_mut().for_each(|w| *w -= norm);
            *log_weights = post;
        }
    }
    Ok(())
}

/// Computes evidence from fitted leaves, renormalises, and returns the root log-evidence.
pub fn posterior_update(circuit: &mut Circuit) -> Result<f64> {
    let ev = evidence(circuit)?;
    renormalize(circuit, &ev)?;
    Ok(ev.root(circuit))
}

/// Mean vector and covariance matrix over all outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveMoments {
    /// Correlation matrix; outputs with zero variance get zero correlation.
    pub fn correlation(&self) -> DMatrix<f64> {
        let c = &self.covariance;
        DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
            let s = (c[(i, i)] * c[(j, j)]).sqrt();
            if i == j {
                1.0
            } else if s > 0.0 {
                c[(i, j)] / s
            } else {
                0.0
            }
        })
    }

    /// Gaussian log density of `y` under these moments.
    pub fn log_density(&self, y: &[f64]) -> Result<f64> {
        let p = self.mean.len();
        if y.len() != p {
            return Err(Error::InvalidArgument(format!(
                "target has {} values, prediction has {p}",
                y.len()
            )));
        }
        let (l, _) = jittered_cholesky_factor(self.covariance.clone(), "predictive covariance")?;
        let r = DVector::from_column_slice(y) - &self.mean;
        let z = l
            .solve_lower_triangular(&r)
            .expect("cholesky factor has a positive diagonal");
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (z.norm_squared() + log_det + p as f64 * LN_2PI))
    }
}

/// Knobs of the moment recursion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomentOptions {
    /// Add each expert's noise variance, giving moments of an observed target instead of the latent function.
    pub include_noise: bool,
    /// Keep the off-diagonal part of the spread term at sum nodes.
    pub cross_terms: bool,
}

impl MomentOptions {
    pub const LATENT: MomentOptions = MomentOptions {
        include_noise: false,
        cross_terms: true,
    };
    pub const OBSERVED: MomentOptions = MomentOptions {
        include_noise: true,
        cross_terms: true,
    };
}

fn check_point(circuit: &Circuit, x_star: &[f64]) -> Result<Vec<f64>> {
    if x_star.len() != circuit.dims {
        return Err(Error::InvalidArgument(format!(
            "test point has {} dimensions, model has {}",
            x_star.len(),
            circuit.dims
        )));
    }
    if x_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("test point contains non-finite values".into()));
    }
    Ok(circuit.node(circuit.root).region.clamp(x_star))
}

/// Index of the child of a covariate product whose cell contains `x`.
pub fn gate(thresholds: &[f64], split_dim: usize, x: &[f64]) -> usize {
    thresholds.partition_point(|&t| t <= x[split_dim])
}

/// Moment-matched predictive distribution of the latent outputs at `x_star`.
pub fn predict(circuit: &Circuit, x_star: &[f64]) -> Result<PredictiveMoments> {
    predict_with(circuit, x_star, MomentOptions::LATENT)
}

/// Moment-matched predictive distribution of a noisy observation at `x_star`.
pub fn predict_observed(circuit: &Circuit, x_star: &[f64]) -> Result<PredictiveMoments> {
    predict_with(circuit, x_star, MomentOptions::OBSERVED)
}

pub fn predict_with(circuit: &Circuit, x_star: &[f64], opts: MomentOptions) -> Result<PredictiveMoments> {
    let x = check_point(circuit, x_star)?;
    let (mean, covariance) = moments(circuit, circuit.root, &x, opts)?;
    Ok(PredictiveMoments { mean, covariance })
}

/// Moments over the node's scope, in scope order.
fn moments(circuit: &Circuit, id: NodeId, x: &[f64], opts: MomentOptions) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let node = circuit.node(id);
    match &node.kind {
        NodeKind::Leaf(leaf) => {
            let (m, mut v) = leaf.posterior(x).map_err(|e| Error::Leaf {
                leaf: id,
                source: Box::new(e),
            })?;
            if opts.include_noise {
                v += leaf.hyperparams.noise_variance();
            }
            Ok((DVector::from_element(1, m), DMatrix::from_element(1, 1, v)))
        }
        NodeKind::ProductX {
            children,
            split_dim,
            thresholds,
        } => moments(circuit, children[gate(thresholds, *split_dim, x)], x, opts),
        NodeKind::ProductY { children } => {
            let k = node.scope.len();
            let mut mean = DVector::zeros(k);
            let mut cov = DMatrix::zeros(k, k);
            for &c in children {
                let (cm, cc) = moments(circuit, c, x, opts)?;
                let slots: Vec<usize> = circuit
                    .node(c)
                    .scope
                    .iter()
                    .map(|p| node.scope.binary_search(p).expect("child scope is inside the parent's"))
                    .collect();
                for (a, &sa) in slots.iter().enumerate() {
                    mean[sa] = cm[a];
                    for (b, &sb) in slots.iter().enumerate() {
                        cov[(sa, sb)] = cc[(a, b)];
                    }
                }
            }
            Ok((mean, cov))
        }
        NodeKind::Sum {
            children,
            log_weights,
            ..
        } => {
            let k = node.scope.len();
            let parts = children
                .iter()
                .map(|&c| moments(circuit, c, x, opts))
                .collect::<Result<Vec<_>>>()?;
            let weights: Vec<f64> = log_weights.iter().map(|w| w.exp()).collect();
            let mut mean = DVector::zeros(k);
            for ((m, _), w) in parts.iter().zip(&weights) {
                mean.axpy(*w, m, 1.0);
            }
            // sum_N w_N (V_N + (m_N - m)(m_N - m)^T), the centred form of the second moment
            let mut cov = DMatrix::zeros(k, k);
            for ((m, v), w) in parts.iter().zip(&weights) {
                cov += v * *w;
                let d = m - &mean;
                for i in 0..k {
                    let wd = w * d[i];
                    if opts.cross_terms {
                        for j in i..k {
                            cov[(i, j)] += wd * d[j];
                        }
                    } else {
                        cov[(i, i)] += wd * d[i];
                    }
                }
            }
            // mirror so the result is exactly symmetric
            for j in 0..k {
                for i in j + 1..k {
                    cov[(i, j)] = cov[(j, i)];
                }
            }
            Ok((mean, cov))
        }
    }
}

/// Which predictive density enters the NLPD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpdMode {
    /// Gaussian with the moment-matched mean and covariance.
    #[default]
    MomentMatched,
    /// The Gaussian mixture over induced trees itself.
    ExactMixture,
}

impl std::str::FromStr for NlpdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moment_matched" | "moment-matched" => Ok(NlpdMode::MomentMatched),
            "exact_mixture" | "exact-mixture" => Ok(NlpdMode::ExactMixture),
            other => Err(Error::InvalidArgument(format!("unknown NLPD mode {other:?}"))),
        }
    }
}

/// Log predictive density of the observed target `y_star` at `x_star`.
pub fn log_predictive_density(circuit: &Circuit, x_star: &[f64], y_star: &[f64], mode: NlpdMode) -> Result<f64> {
    if y_star.len() != circuit.outputs {
        return Err(Error::InvalidArgument(format!(
            "target has {} values, model has {} outputs",
            y_star.len(),
            circuit.outputs
        )));
    }
    match mode {
        NlpdMode::MomentMatched => predict_observed(circuit, x_star)?.log_density(y_star),
        NlpdMode::ExactMixture => {
            let x = check_point(circuit, x_star)?;
            mixture_log_density(circuit, circuit.root, &x, y_star)
        }
    }
}

/// The mixture factorises exactly like the circuit, so no tree enumeration is needed.
fn mixture_log_density(circuit: &Circuit, id: NodeId, x: &[f64], y: &[f64]) -> Result<f64> {
    match &circuit.node(id).kind {
        NodeKind::Leaf(leaf) => {
            let (m, v) = leaf.posterior(x).map_err(|e| Error::Leaf {
                leaf: id,
                source: Box::new(e),
            })?;
            Ok(normal_log_pdf(
                y[leaf.scope_output],
                m,
                v + leaf.hyperparams.noise_variance(),
            ))
        }
        NodeKind::ProductX {
            children,
            split_dim,
            thresholds,
        } => mixture_log_density(circuit, children[gate(thresholds, *split_dim, x)], x, y),
        NodeKind::ProductY { children } => children
            .iter()
            .map(|&c| mixture_log_density(circuit, c, x, y))
            .sum(),
        NodeKind::Sum {
            children,
            log_weights,
            ..
        } => {
            let terms = children
                .iter()
                .zip(log_weights)
                .map(|(&c, w)| Ok(w + mixture_log_density(circuit, c, x, y)?))
                .collect::<Result<Vec<f64>>>()?;
            Ok(logsumexp(&terms))
        }
    }
}
