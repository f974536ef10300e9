//! Structure construction by recursive partitioning of covariates and outputs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Circuit, Node, NodeId, NodeKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp_leaf::{GpLeaf, KernelHyperparams};
use crate::region::Region;

/// How the cut points of a covariate split are chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMode {
    /// Empirical quantiles of the data reaching the node.
    #[default]
    Data,
    /// Equally spaced points of the node's interval (data range where unbounded).
    Interval,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    /// Alternating covariate and output splits.
    #[default]
    Momogp,
    /// Sums over output splits only; every expert sees the full data set.
    Sumgp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    /// Children per sum node.
    pub k_sum: usize,
    /// Cells per covariate split.
    pub k_prod_x: usize,
    /// Groups per output split.
    pub k_prod_y: usize,
    /// Nodes holding at most this many observations stop splitting.
    pub leaf_threshold: usize,
    pub rng_seed: u64,
    pub quantile_mode: QuantileMode,
    pub kind: StructureKind,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            k_sum: 2,
            k_prod_x: 2,
            k_prod_y: 2,
            leaf_threshold: 500,
            rng_seed: 0,
            quantile_mode: QuantileMode::Data,
            kind: StructureKind::Momogp,
        }
    }
}

impl StructureConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.k_sum < 1 {
            return fail("k_sum must be at least 1");
        }
        // a single cell is accepted: it turns the circuit into plain GP experts
        if self.k_prod_x < 1 {
            return fail("k_prod_x must be at least 1");
        }
        if self.k_prod_y < 2 {
            return fail("k_prod_y must be at least 2");
        }
        if self.leaf_threshold < 1 {
            return fail("leaf_threshold must be at least 1");
        }
        Ok(())
    }
}

/// Placeholder hyperparameters for freshly built leaves; training re-initialises them.
fn default_hyperparams(dims: usize) -> KernelHyperparams {
    KernelHyperparams {
        log_lengthscales: vec![0.0; dims],
        log_signal_variance: 0.0,
        log_noise_variance: 0.1f64.ln(),
    }
}

/// Linear-interpolation quantile of sorted values.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Builder<'a> {
    data: &'a Dataset,
    cfg: &'a StructureConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn reserve(&mut self, scope: &[usize], region: &Region, rows: &[usize]) -> NodeId {
        self.nodes.push(Node {
            kind: NodeKind::ProductY { children: vec![] },
            scope: scope.to_vec(),
            region: region.clone(),
            rows: rows.to_vec(),
        });
        self.nodes.len() - 1
    }

    fn column(&self, rows: &[usize], dim: usize) -> Vec<f64> {
        rows.iter().map(|&r| self.data.x[(r, dim)]).collect()
    }

    /// Dimensions sorted by decreasing sample variance over `rows`; ties keep the lower index first.
    fn ranked_dims(&self, rows: &[usize]) -> Vec<usize> {
        let n = rows.len() as f64;
        let var: Vec<f64> = (0..self.data.d())
            .map(|d| {
                let col = self.column(rows, d);
                let mean = col.iter().sum::<f64>() / n;
                col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
            })
            .collect();
        let mut dims: Vec<usize> = (0..self.data.d()).collect();
        dims.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        dims
    }

    fn sum_node(&mut self, rows: &[usize], scope: &[usize], region: &Region) -> NodeId {
        let id = self.reserve(scope, region, rows);
        let dims = self.ranked_dims(rows);
        let children: Vec<NodeId> = (0..self.cfg.k_sum)
            .map(|k| self.product_x(rows, scope, region, dims[k % dims.len()]))
            .collect();
        let w = vec![-(children.len() as f64).ln(); children.len()];
        self.nodes[id].kind = NodeKind::Sum {
            children,
            log_weights: w.clone(),
            prior_log_weights: w,
        };
        id
    }

    fn cut_points(&self, values: &mut [f64], region: &Region, dim: usize) -> Vec<f64> {
        let k = self.cfg.k_prod_x;
        values.sort_by(f64::total_cmp);
        let mut cuts: Vec<f64> = match self.cfg.quantile_mode {
            QuantileMode::Data => (1..k)
                .map(|j| quantile_sorted(values, j as f64 / k as f64))
                .collect(),
            QuantileMode::Interval => {
                let lo = match region.lower[dim] {
                    l if l.is_finite() => l,
                    _ => values[0],
                };
                let hi = match region.upper[dim] {
                    u if u.is_finite() => u,
                    _ => values[values.len() - 1],
                };
                (1..k).map(|j| lo + (hi - lo) * j as f64 / k as f64).collect()
            }
        };
        cuts.retain(|&t| t > region.lower[dim] && t < region.upper[dim]);
        cuts.dedup();

        // merge empty cells into their left neighbour (the first one into its right)
        loop {
            let mut counts = vec![0usize; cuts.len() + 1];
            for v in values.iter() {
                counts[cuts.partition_point(|&t| t <= *v)] += 1;
            }
            match counts.iter().position(|&c| c == 0) {
                None => return cuts,
                Some(0) => {
                    cuts.remove(0);
                }
                Some(i) => {
                    cuts.remove(i - 1);
                }
            }
        }
    }

    fn product_x(&mut self, rows: &[usize], scope: &[usize], region: &Region, dim: usize) -> NodeId {
        let mut values = self.column(rows, dim);
        let cuts = self.cut_points(&mut values, region, dim);
        if cuts.is_empty() && self.cfg.k_prod_x > 1 {
            // no usable cut: the covariate split collapses into a plain output product
            return self.product_y(rows, scope, region, true);
        }
        let id = self.reserve(scope, region, rows);
        let cells = region.split(dim, &cuts);
        let mut cell_rows = vec![Vec::new(); cells.len()];
        for &r in rows {
            cell_rows[cuts.partition_point(|&t| t <= self.data.x[(r, dim)])].push(r);
        }
        // a single cell does not shrink the data, so the recursion must end below it
        let terminal = cells.len() == 1;
        let children = cells
            .iter()
            .zip(&cell_rows)
            .map(|(cell, cr)| self.product_y(cr, scope, cell, terminal))
            .collect();
        self.nodes[id].kind = NodeKind::ProductX {
            children,
            split_dim: dim,
            thresholds: cuts,
        };
        id
    }

    fn node_rng(&self, id: NodeId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.rng_seed);
        rng.set_stream(id as u64);
        rng
    }

    /// Random permutation of `scope` cut into `min(k_prod_y, |scope|)` near-equal groups.
    fn output_groups(&self, id: NodeId, scope: &[usize]) -> Vec<Vec<usize>> {
        let mut perm = scope.to_vec();
        perm.shuffle(&mut self.node_rng(id));
        let parts = self.cfg.k_prod_y.min(perm.len());
        let (base, extra) = (perm.len() / parts, perm.len() % parts);
        let mut groups = Vec::with_capacity(parts);
        let mut start = 0;
        for g in 0..parts {
            let len = base + usize::from(g < extra);
            let mut group = perm[start..start + len].to_vec();
            group.sort_unstable();
            groups.push(group);
            start += len;
        }
        groups
    }

    fn product_y(&mut self, rows: &[usize], scope: &[usize], region: &Region, terminal: bool) -> NodeId {
        let id = self.reserve(scope, region, rows);
        let children = if rows.len() > self.cfg.leaf_threshold && !terminal {
            self.output_groups(id, scope)
                .iter()
                .map(|g| self.sum_node(rows, g, region))
                .collect()
        } else {
            scope.iter().map(|&p| self.leaf(rows, p, region)).collect()
        };
        self.nodes[id].kind = NodeKind::ProductY { children };
        id
    }

    fn leaf(&mut self, rows: &[usize], output: usize, region: &Region) -> NodeId {
        let id = self.reserve(&[output], region, rows);
        let d = self.data.d();
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            x.extend(self.data.x.row(r).iter());
        }
        let y = rows.iter().map(|&r| self.data.y[(r, output)]).collect();
        let leaf = GpLeaf::from_rows(output, region.clone(), default_hyperparams(d), x, y, rows.to_vec())
            .expect("builder hands each leaf the rows inside its region");
        self.nodes[id].kind = NodeKind::Leaf(Box::new(leaf));
        id
    }

    fn sumgp_sum(&mut self, rows: &[usize], scope: &[usize], region: &Region) -> NodeId {
        let id = self.reserve(scope, region, rows);
        let children: Vec<NodeId> = (0..self.cfg.k_sum)
            .map(|_| {
                let pid = self.reserve(scope, region, rows);
                let children = self
                    .output_groups(pid, scope)
                    .iter()
                    .map(|g| match g.as_slice() {
                        [p] => self.leaf(rows, *p, region),
                        _ => self.sumgp_sum(rows, g, region),
                    })
                    .collect();
                self.nodes[pid].kind = NodeKind::ProductY { children };
                pid
            })
            .collect();
        let w = vec![-(children.len() as f64).ln(); children.len()];
        self.nodes[id].kind = NodeKind::Sum {
            children,
            log_weights: w.clone(),
            prior_log_weights: w,
        };
        id
    }
}

/// Builds a circuit over `data`: a root sum whose `k`-th child splits the
/// `k`-th highest-variance covariate at its quantiles, then alternates output
/// splits and sums until a cell holds at most `leaf_threshold` observations,
/// where every remaining output gets its own GP expert.
pub fn build(data: &Dataset, cfg: &StructureConfig) -> Result<Circuit> {
    cfg.validate()?;
    if data.n() == 0 || data.d() == 0 || data.p() == 0 {
        return Err(Error::InvalidArgument("cannot build a circuit on an empty dataset".into()));
    }
    let mut b = Builder {
        data,
        cfg,
        nodes: Vec::new(),
    };
    let rows: Vec<usize> = (0..data.n()).collect();
    let scope: Vec<usize> = (0..data.p()).collect();
    let region = Region::unbounded(data.d());
    let root = match cfg.kind {
        StructureKind::Momogp => b.sum_node(&rows, &scope, &region),
        StructureKind::Sumgp => b.sumgp_sum(&rows, &scope, &region),
    };
    Ok(Circuit {
        nodes: b.nodes,
        root,
        dims: data.d(),
        outputs: data.p(),
    })
}
