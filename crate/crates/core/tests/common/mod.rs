//! Reference computations shared by the integration tests. They work from the
//! circuit's node list and dense linear algebra only, never through the
//! library's recursive evidence or moment code.

#![allow(dead_code)]

use momogp::circuit::{build, Circuit, NodeId, NodeKind, StructureConfig};
use momogp::data::{synthesize, SynthSpec};
use momogp::gp_leaf::{matern32, GpLeaf, KernelHyperparams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One induced tree: its log weight and the leaves it contains.
#[derive(Clone, Debug)]
pub struct Tree {
    pub log_weight: f64,
    pub leaves: Vec<NodeId>,
}

/// Every induced tree below `id`, taking sum weights from `prior` or the current weights.
pub fn trees(c: &Circuit, id: NodeId, prior: bool) -> Vec<Tree> {
    match &c.nodes[id].kind {
        NodeKind::Leaf(_) => vec![Tree {
            log_weight: 0.0,
            leaves: vec![id],
        }],
        NodeKind::Sum {
            children,
            log_weights,
            prior_log_weights,
        } => {
            let w = if prior { prior_log_weights } else { log_weights };
            children
                .iter()
                .zip(w)
                .flat_map(|(&ch, lw)| {
                    trees(c, ch, prior).into_iter().map(move |t| Tree {
                        log_weight: t.log_weight + lw,
                        leaves: t.leaves,
                    })
                })
                .collect()
        }
        NodeKind::ProductX { children, .. } | NodeKind::ProductY { children } => {
            let mut acc = vec![Tree {
                log_weight: 0.0,
                leaves: vec![],
            }];
            for &ch in children {
                let sub = trees(c, ch, prior);
                acc = acc
                    .iter()
                    .flat_map(|a| {
                        sub.iter().map(move |b| Tree {
                            log_weight: a.log_weight + b.log_weight,
                            leaves: a.leaves.iter().chain(&b.leaves).copied().collect(),
                        })
                    })
                    .collect();
            }
            acc
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn leaf(c: &Circuit, id: NodeId) -> &GpLeaf {
    match &c.nodes[id].kind {
        NodeKind::Leaf(l) => l,
        _ => panic!("node {id} is not a leaf"),
    }
}

/// Root log marginal likelihood as a log-sum-exp over induced trees under the prior weights.
pub fn brute_force_log_evidence(c: &Circuit) -> f64 {
    let terms: Vec<f64> = trees(c, c.root, true)
        .iter()
        .map(|t| t.log_weight + t.leaves.iter().map(|&l| leaf(c, l).mll().unwrap()).sum::<f64>())
        .collect();
    log_sum_exp(&terms)
}

/// Exact GP posterior by dense LU solves.
pub struct DenseGp {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub h: KernelHyperparams,
}

impl DenseGp {
    pub fn from_leaf(l: &GpLeaf) -> Self {
        DenseGp {
            x: l.train_x(),
            y: l.train_y(),
            h: l.hyperparams.clone(),
        }
    }

    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        matern32(a, b, &self.h).unwrap()
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.x.nrows();
        let noise = self.h.noise_variance();
        DMatrix::from_fn(n, n, |i, j| self.k(&self.row(i), &self.row(j)) + if i == j { noise } else { 0.0 })
    }

    /// Latent posterior mean and variance at `xs`.
    pub fn posterior(&self, xs: &[f64]) -> (f64, f64) {
        let n = self.x.nrows();
        let lu = self.covariance().lu();
        let ks = DVector::from_fn(n, |i, _| self.k(&self.row(i), xs));
        let alpha = lu.solve(&self.y).unwrap();
        let v = lu.solve(&ks).unwrap();
        (ks.dot(&alpha), self.k(xs, xs) - ks.dot(&v))
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.nrows() as f64;
        let lu = self.covariance().lu();
        let alpha = lu.solve(&self.y).unwrap();
        let log_det: f64 = lu.u().diagonal().iter().map(|v| v.abs().ln()).sum();
        -0.5 * (self.y.dot(&alpha) + log_det + n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// One mixture component: log weight, per-output means, latent variances and noise variances.
pub type Component = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

/// Components of the predictive mixture at `x`, one per induced tree.
pub fn mixture_components(c: &Circuit, x: &[f64]) -> Vec<Component> {
    trees(c, c.root, false)
        .into_iter()
        .map(|t| {
            let p = c.outputs;
            let (mut m, mut v, mut s) = (vec![f64::NAN; p], vec![f64::NAN; p], vec![f64::NAN; p]);
            for &id in &t.leaves {
                if c.nodes[id].region.contains(x) {
                    let l = leaf(c, id);
                    let (mean, var) = DenseGp::from_leaf(l).posterior(x);
                    let o = l.scope_output;
                    assert!(m[o].is_nan(), "two experts of one tree claim output {o}");
                    m[o] = mean;
                    v[o] = var;
                    s[o] = l.hyperparams.noise_variance();
                }
            }
            assert!(m.iter().all(|v| !v.is_nan()), "tree leaves an output uncovered");
            (t.log_weight, m, v, s)
        })
        .collect()
}

/// Mean and covariance of the latent predictive mixture, from its raw second moment.
pub fn mixture_moments(c: &Circuit, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let p = c.outputs;
    let mut mean = DVector::zeros(p);
    let mut second = DMatrix::zeros(p, p);
    for (lw, m, v, _) in mixture_components(c, x) {
        let w = lw.exp();
        let mv = DVector::from_vec(m);
        mean += w * &mv;
        second += w * (DMatrix::from_diagonal(&DVector::from_vec(v)) + &mv * mv.transpose());
    }
    let cov = second - &mean * mean.transpose();
    (mean, cov)
}

/// Log density of `y` under the predictive mixture of noisy observations.
pub fn mixture_log_density(c: &Circuit, x: &[f64], y: &[f64]) -> f64 {
    let terms: Vec<f64> = mixture_components(c, x)
        .into_iter()
        .map(|(lw, m, v, s)| {
            lw + (0..y.len())
                .map(|o| {
                    let var = v[o] + s[o];
                    -0.5 * ((y[o] - m[o]).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
                })
                .sum::<f64>()
        })
        .collect();
    log_sum_exp(&terms)
}

/// A small circuit with random structure, random expert hyperparameters, random
/// prior weights and fitted leaves, whose induced-tree count is at most `max_trees`.
pub fn random_circuit(rng: &mut ChaCha8Rng, max_trees: u128) -> Circuit {
    loop {
        let d = rng.random_range(1..=3);
        let p = rng.random_range(1..=3);
        let n = rng.random_range(8..=40);
        let data = synthesize(&SynthSpec {
            n,
            d,
            p,
            n_latent: 2,
            mixing: None,
            noise_std: 0.2,
            seed: rng.random(),
        })
        .unwrap();
        let cfg = StructureConfig {
            k_sum: rng.random_range(1..=3),
            k_prod_x: rng.random_range(2..=3),
            k_prod_y: 2,
            leaf_threshold: rng.random_range(4..=n),
            rng_seed: rng.random(),
            ..Default::default()
        };
        let mut c = build(&data, &cfg).unwrap();
        if c.induced_tree_count() > max_trees {
            continue;
        }
        for id in c.leaf_ids() {
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
            let h = KernelHyperparams::new(&ls, rng.random_range(0.5..2.0), rng.random_range(0.05..0.5)).unwrap();
            c.leaf_mut(id).unwrap().set_hyperparams(h).unwrap();
        }
        for node in &mut c.nodes {
            if let NodeKind::Sum {
                log_weights,
                prior_log_weights,
                ..
            } = &mut node.kind
            {
                let raw: Vec<f64> = log_weights.iter().map(|_| rng.random_range(0.1..1.0f64).ln()).collect();
                let norm = log_sum_exp(&raw);
                *prior_log_weights = raw.iter().map(|w| w - norm).collect();
                log_weights.clone_from(prior_log_weights);
            }
        }
        c.fit_leaves().unwrap();
        return c;
    }
}

/// A random point inside the bounding box of the circuit's training data.
pub fn random_point(rng: &mut ChaCha8Rng, c: &Circuit) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = c
        .leaves()
        .flat_map(|(_, l)| {
            let x = l.train_x();
            (0..x.nrows()).map(move |i| x.row(i).iter().copied().collect::<Vec<f64>>())
        })
        .collect();
    (0..c.dims)
        .map(|d| {
            let lo = rows.iter().map(|r| r[d]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[d]).fold(f64::NEG_INFINITY, f64::max);
            lo + (hi - lo) * rng.random::<f64>()
        })
        .collect()
}
