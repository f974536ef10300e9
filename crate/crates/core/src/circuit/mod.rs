//! The circuit: a tree of sum, product and GP-leaf nodes.
//!
//! * `Sum` mixes children that model the same outputs over the same region.
//! * `ProductX` cuts its region along one covariate into adjacent cells and
//!   hands each cell to one child. At prediction time it acts as a gate.
//! * `ProductY` splits its output scope into disjoint groups, one per child.
//! * `Leaf` is a single-output exact GP expert.
//!
//! Nodes live in an arena indexed by [`NodeId`]; construction always gives a
//! parent a smaller id than its children.

mod build;
mod json;

use rayon::prelude::*;

pub use build::{build, QuantileMode, StructureConfig, StructureKind};
pub use json::{CircuitJson, NodeJson, NodeKindJson};

use crate::error::{Error, Result};
use crate::gp_leaf::GpLeaf;
use crate::math::logsumexp;
pub use crate::region::Region;

pub type NodeId = usize;

/// Tolerance on `logsumexp(log_weights) == 0` at sum nodes.
pub const WEIGHT_NORM_TOL: f64 = 1e-12;

/// Refuse to enumerate more induced trees than this.
pub const MAX_INDUCED_TREES: u128 = 1_000_000;

#[derive(Clone, Debug)]
pub enum NodeKind {
    Sum {
        children: Vec<NodeId>,
        /// Current weights; posterior weights once the circuit has been renormalised.
        log_weights: Vec<f64>,
        prior_log_weights: Vec<f64>,
    },
    ProductX {
        children: Vec<NodeId>,
        split_dim: usize,
        /// Increasing cut points; child `k` covers `[t_{k-1}, t_k)` along `split_dim`.
        thresholds: Vec<f64>,
    },
    ProductY {
        children: Vec<NodeId>,
    },
    Leaf(Box<GpLeaf>),
}

impl NodeKind {
    pub fn children(&self) -> &[NodeId] {
        match self {
            NodeKind::Sum { children, .. }
            | NodeKind::ProductX { children, .. }
            | NodeKind::ProductY { children } => children,
            NodeKind::Leaf(_) => &[],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Sum { .. } => "sum",
            NodeKind::ProductX { .. } => "product_x",
            NodeKind::ProductY { .. } => "product_y",
            NodeKind::Leaf(_) => "leaf",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    /// Sorted output indices modelled by this node.
    pub scope: Vec<usize>,
    pub region: Region,
    /// Training rows reaching this node, sorted.
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Circuit {
    pub nodes: Vec<Node>,
    pub root: NodeId,
    pub dims: usize,
    pub outputs: usize,
}

impl Circuit {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Leaf(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn leaf(&self, id: NodeId) -> Option<&GpLeaf> {
        match &self.nodes.get(id)?.kind {
            NodeKind::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn leaf_mut(&mut self, id: NodeId) -> Option<&mut GpLeaf> {
        match &mut self.nodes.get_mut(id)?.kind {
            NodeKind::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (NodeId, &GpLeaf)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.kind {
            NodeKind::Leaf(l) => Some((i, &**l)),
            _ => None,
        })
    }

    pub fn sum_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Sum { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Factorises every leaf covariance; leaves are processed in parallel.
    pub fn fit_leaves(&mut self) -> Result<()> {
        self.nodes
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(id, node)| match &mut node.kind {
                NodeKind::Leaf(leaf) => leaf.fit().map_err(|e| Error::Leaf {
                    leaf: id,
                    source: Box::new(e),
                }),
                _ => Ok(()),
            })
    }

    /// Sets every sum node's current weights back to its prior weights.
    pub fn reset_weights(&mut self) {
        for node in &mut self.nodes {
            if let NodeKind::Sum {
                log_weights,
                prior_log_weights,
                ..
            } = &mut node.kind
            {
                log_weights.clone_from(prior_log_weights);
            }
        }
    }

    /// Number of induced trees, saturating at `u128::MAX`.
    pub fn induced_tree_count(&self) -> u128 {
        let mut counts = vec![0u128; self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            let kind = &self.nodes[id].kind;
            counts[id] = match kind {
                NodeKind::Leaf(_) => 1,
                NodeKind::Sum { children, .. } => children
                    .iter()
                    .fold(0u128, |acc, &c| acc.saturating_add(counts[c])),
                NodeKind::ProductX { children, .. } | NodeKind::ProductY { children } => children
                    .iter()
                    .fold(1u128, |acc, &c| acc.saturating_mul(counts[c])),
            };
        }
        counts[self.root]
    }

    /// Lists every induced tree: one child per sum node, all children per product node.
    pub fn enumerate_induced_trees(&self) -> Result<Vec<InducedTree>> {
        let count = self.induced_tree_count();
        if count > MAX_INDUCED_TREES {
            return Err(Error::Capacity(format!(
                "circuit has {count} induced trees, limit is {MAX_INDUCED_TREES}"
            )));
        }
        Ok(self.trees_below(self.root))
    }

    fn trees_below(&self, id: NodeId) -> Vec<InducedTree> {
        match &self.nodes[id].kind {
            NodeKind::Leaf(_) => vec![InducedTree {
                log_prior: 0.0,
                log_weight: 0.0,
                leaves: vec![id],
            }],
            NodeKind::Sum {
                children,
                log_weights,
                prior_log_weights,
            } => children
                .iter()
                .zip(log_weights.iter().zip(prior_log_weights))
                .flat_map(|(&c, (&lw, &lp))| {
                    self.trees_below(c).into_iter().map(move |mut t| {
                        t.log_weight += lw;
                        t.log_prior += lp;
                        t
                    })
                })
                .collect(),
            NodeKind::ProductX { children, .. } | NodeKind::ProductY { children } => {
                let mut acc = vec![InducedTree {
                    log_prior: 0.0,
                    log_weight: 0.0,
                    leaves: Vec::new(),
                }];
                for &c in children {
                    let sub = self.trees_below(c);
                    acc = acc
                        .iter()
                        .flat_map(|a| {
                            sub.iter().map(move |b| {
                                let mut leaves = a.leaves.clone();
                                leaves.extend_from_slice(&b.leaves);
                                InducedTree {
                                    log_prior: a.log_prior + b.log_prior,
                                    log_weight: a.log_weight + b.log_weight,
                                    leaves,
                                }
                            })
                        })
                        .collect();
                }
                acc
            }
        }
    }

    /// Checks every structural invariant and reports each violation found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |node: NodeId, rule: Rule, detail: String| {
            out.push(Violation { node, rule, detail })
        };
        let n = self.nodes.len();
        if self.root >= n {
            bad(self.root, Rule::Graph, "root id out of range".into());
            return out;
        }

        // every node reachable exactly once from the root
        let mut seen = vec![0usize; n];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            seen[id] += 1;
            if seen[id] > 1 {
                bad(id, Rule::Graph, "node reached more than once".into());
                continue;
            }
            for &c in self.nodes[id].kind.children() {
                if c >= n {
                    bad(id, Rule::Graph, format!("child id {c} out of range"));
                } else {
                    stack.push(c);
                }
            }
        }
        for (id, &s) in seen.iter().enumerate() {
            if s == 0 {
                bad(id, Rule::Graph, "node unreachable from root".into());
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.region.dims() != self.dims || !node.region.is_valid() {
                bad(id, Rule::Region, format!("invalid region {:?}", node.region));
            }
            if node.scope.is_empty()
                || node.scope.windows(2).any(|w| w[0] >= w[1])
                || node.scope.iter().any(|&p| p >= self.outputs)
            {
                bad(id, Rule::Scope, format!("malformed scope {:?}", node.scope));
            }
            let children: Vec<&Node> = node
                .kind
                .children()
                .iter()
                .filter(|&&c| c < n)
                .map(|&c| &self.nodes[c])
                .collect();
            match &node.kind {
                NodeKind::Sum {
                    children: ids,
                    log_weights,
                    prior_log_weights,
                } => {
                    if ids.is_empty() {
                        bad(id, Rule::Graph, "sum node without children".into());
                    }
                    for (label, w) in [("posterior", log_weights), ("prior", prior_log_weights)] {
                        if w.len() != ids.len() {
                            bad(id, Rule::Normalization, format!("{} {label} weights for {} children", w.len(), ids.len()));
                        } else if (logsumexp(w)).abs() > WEIGHT_NORM_TOL || w.iter().any(|v| v.is_nan()) {
                            bad(id, Rule::Normalization, format!("{label} log-weights sum to {}", logsumexp(w)));
                        }
                    }
                    for c in &children {
                        if c.scope != node.scope || c.region != node.region {
                            bad(id, Rule::Smoothness, "child scope or region differs from the sum's".into());
                        }
                    }
                }
                NodeKind::ProductX {
                    children: ids,
                    split_dim,
                    thresholds,
                } => {
                    if *split_dim >= self.dims || ids.len() != thresholds.len() + 1 {
                        bad(id, Rule::Partition, format!("{} children for {} thresholds on dim {split_dim}", ids.len(), thresholds.len()));
                        continue;
                    }
                    let cells = node.region.split(*split_dim, thresholds);
                    if cells.iter().any(|c| !c.is_valid()) {
                        bad(id, Rule::Partition, format!("thresholds {thresholds:?} do not cut the region"));
                    }
                    for (c, cell) in children.iter().zip(&cells) {
                        if &c.region != cell {
                            bad(id, Rule::Partition, "child region does not match its cell".into());
                        }
                        if c.scope != node.scope {
                            bad(id, Rule::Smoothness, "child scope differs from the product's".into());
                        }
                    }
                    let mut assigned: Vec<usize> = children.iter().flat_map(|c| c.rows.iter().copied()).collect();
                    assigned.sort_unstable();
                    if assigned != node.rows {
                        bad(id, Rule::Partition, "children's rows do not partition the node's rows".into());
                    }
                }
                NodeKind::ProductY { children: ids } => {
                    if ids.is_empty() {
                        bad(id, Rule::Graph, "product node without children".into());
                    }
                    let mut union: Vec<usize> = children.iter().flat_map(|c| c.scope.iter().copied()).collect();
                    union.sort_unstable();
                    if union != node.scope {
                        bad(id, Rule::Decomposability, format!("children scopes {union:?} do not partition {:?}", node.scope));
                    }
                    for c in &children {
                        if c.region != node.region || c.rows != node.rows {
                            bad(id, Rule::Decomposability, "child region or data differs from the product's".into());
                        }
                    }
                }
                NodeKind::Leaf(leaf) => {
                    if node.scope.len() != 1 || node.scope[0] != leaf.scope_output {
                        bad(id, Rule::Leaf, format!("leaf for output {} has scope {:?}", leaf.scope_output, node.scope));
                    }
                    if leaf.region != node.region || leaf.rows() != node.rows.as_slice() {
                        bad(id, Rule::Leaf, "leaf region or rows differ from the node's".into());
                    }
                }
            }
        }
        out
    }
}

/// A sub-circuit picking one child at every sum node.
#[derive(Clone, Debug, PartialEq)]
pub struct InducedTree {
    /// Sum of the chosen prior edge log-weights.
    pub log_prior: f64,
    /// Sum of the chosen current (posterior after renormalisation) edge log-weights.
    pub log_weight: f64,
    pub leaves: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Graph,
    Region,
    Scope,
    Normalization,
    Smoothness,
    Partition,
    Decomposability,
    Leaf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub node: NodeId,
    pub rule: Rule,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node {}: {:?}: {}", self.node, self.rule, self.detail)
    }
}
