//! JSON form of a circuit.
//!
//! Nodes are written as an array with explicit ids. Leaves carry their
//! hyperparameters and the indices of their training rows; the rows
//! themselves are stored next to the circuit, not inside it.

use serde::{Deserialize, Serialize};

use super::{Circuit, Node, NodeId, NodeKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp_leaf::{GpLeaf, KernelHyperparams};
use crate::region::Region;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitJson {
    pub dims: usize,
    pub outputs: usize,
    pub root: NodeId,
    pub nodes: Vec<NodeJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: NodeId,
    pub scope: Vec<usize>,
    pub region: Region,
    #[serde(flatten)]
    pub kind: NodeKindJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKindJson {
    Sum {
        children: Vec<NodeId>,
        log_weights: Vec<f64>,
        prior_log_weights: Vec<f64>,
    },
    ProductX {
        children: Vec<NodeId>,
        split_dim: usize,
        thresholds: Vec<f64>,
    },
    ProductY {
        children: Vec<NodeId>,
    },
    Leaf {
        output: usize,
        hyperparams: KernelHyperparams,
        rows: Vec<usize>,
    },
}

impl Circuit {
    pub fn to_json(&self) -> CircuitJson {
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeJson {
                id,
                scope: n.scope.clone(),
                region: n.region.clone(),
                kind: match &n.kind {
                    NodeKind::Sum {
                        children,
                        log_weights,
                        prior_log_weights,
                    } => NodeKindJson::Sum {
                        children: children.clone(),
                        log_weights: log_weights.clone(),
                        prior_log_weights: prior_log_weights.clone(),
                    },
                    NodeKind::ProductX {
                        children,
                        split_dim,
                        thresholds,
                    } => NodeKindJson::ProductX {
                        children: children.clone(),
                        split_dim: *split_dim,
                        thresholds: thresholds.clone(),
                    },
                    NodeKind::ProductY { children } => NodeKindJson::ProductY {
                        children: children.clone(),
                    },
                    NodeKind::Leaf(leaf) => NodeKindJson::Leaf {
                        output: leaf.scope_output,
                        hyperparams: leaf.hyperparams.clone(),
                        rows: leaf.rows().to_vec(),
                    },
                },
            })
            .collect();
        CircuitJson {
            dims: self.dims,
            outputs: self.outputs,
            root: self.root,
            nodes,
        }
    }

    /// Rebuilds a circuit from its JSON form and the training data it refers to.
    /// Leaves come back unfitted.
    pub fn from_json(json: &CircuitJson, data: &Dataset) -> Result<Circuit> {
        if data.d() != json.dims || data.p() != json.outputs {
            return Err(Error::Schema {
                expected: format!("{} covariates and {} outputs", json.dims, json.outputs),
                found: format!("{} covariates and {} outputs", data.d(), data.p()),
            });
        }
        let n = json.nodes.len();
        let mut nodes = Vec::with_capacity(n);
        for (i, nj) in json.nodes.iter().enumerate() {
            if nj.id != i {
                return Err(Error::Format(format!("node at position {i} has id {}", nj.id)));
            }
            if let Some(&c) = nj.kind.children().iter().find(|&&c| c <= i || c >= n) {
                return Err(Error::Format(format!("node {i} has invalid child {c}")));
            }
            let (kind, rows) = match &nj.kind {
                NodeKindJson::Sum {
                    children,
                    log_weights,
                    prior_log_weights,
                } => (
                    NodeKind::Sum {
                        children: children.clone(),
                        log_weights: log_weights.clone(),
                        prior_log_weights: prior_log_weights.clone(),
                    },
                    vec![],
                ),
                NodeKindJson::ProductX {
                    children,
                    split_dim,
                    thresholds,
                } => (
                    NodeKind::ProductX {
                        children: children.clone(),
                        split_dim: *split_dim,
                        thresholds: thresholds.clone(),
                    },
                    vec![],
                ),
                NodeKindJson::ProductY { children } => (
                    NodeKind::ProductY {
                        children: children.clone(),
                    },
                    vec![],
                ),
                NodeKindJson::Leaf {
                    output,
                    hyperparams,
                    rows,
                } => {
                    if *output >= data.p() {
                        return Err(Error::Format(format!("leaf {i} models missing output {output}")));
                    }
                    if let Some(&r) = rows.iter().find(|&&r| r >= data.n()) {
                        return Err(Error::Format(format!("leaf {i} refers to missing row {r}")));
                    }
                    let x: Vec<f64> = rows.iter().flat_map(|&r| data.x.row(r).iter().copied().collect::<Vec<_>>()).collect();
                    let y = rows.iter().map(|&r| data.y[(r, *output)]).collect();
                    let leaf = GpLeaf::from_rows(*output, nj.region.clone(), hyperparams.clone(), x, y, rows.clone())
                        .map_err(|e| Error::Leaf {
                            leaf: i,
                            source: Box::new(e),
                        })?;
                    (NodeKind::Leaf(Box::new(leaf)), rows.clone())
                }
            };
            nodes.push(Node {
                kind,
                scope: nj.scope.clone(),
                region: nj.region.clone(),
                rows,
            });
        }
        // children have larger ids, so one reverse pass restores every node's rows
        for id in (0..n).rev() {
            let rows = match &nodes[id].kind {
                NodeKind::Leaf(_) => continue,
                NodeKind::Sum { children, .. } | NodeKind::ProductY { children } => {
                    children.first().map(|&c| nodes[c].rows.clone()).unwrap_or_default()
                }
                NodeKind::ProductX { children, .. } => {
                    let mut r: Vec<usize> = children.iter().flat_map(|&c| nodes[c].rows.iter().copied()).collect();
                    r.sort_unstable();
                    r
                }
            };
            nodes[id].rows = rows;
        }
        if json.root >= n {
            return Err(Error::Format(format!("root {} out of range", json.root)));
        }
        Ok(Circuit {
            nodes,
            root: json.root,
            dims: json.dims,
            outputs: json.outputs,
        })
    }
}

impl NodeKindJson {
    fn children(&self) -> &[NodeId] {
        match self {
            NodeKindJson::Sum { children, .. }
            | NodeKindJson::ProductX { children, .. }
            | NodeKindJson::ProductY { children } => children,
            NodeKindJson::Leaf { .. } => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{build, StructureConfig};
    use crate::data::synth_multioutput;

    #[test]
    fn round_trip_is_lossless() {
        let data = synth_multioutput(80, 3, 3, 12).unwrap();
        let mut c = build(&data, &StructureConfig { leaf_threshold: 15, ..Default::default() }).unwrap();
        // awkward values exercise shortest round-trip formatting
        for (i, id) in c.leaf_ids().into_iter().enumerate() {
            let leaf = c.leaf_mut(id).unwrap();
            let mut h = leaf.hyperparams.clone();
            h.log_lengthscales[0] = 0.1 + i as f64 / 3.0;
            h.log_noise_variance = -std::f64::consts::PI * 1e-7;
            leaf.set_hyperparams(h).unwrap();
        }
        let json = c.to_json();
        let text = serde_json::to_string(&json).unwrap();
        let back: CircuitJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back, json);
        let restored = Circuit::from_json(&back, &data).unwrap();
        assert!(restored.validate().is_empty());
        assert_eq!(restored.to_json(), json);
        for (a, b) in c.nodes.iter().zip(&restored.nodes) {
            assert_eq!(a.rows, b.rows);
        }
    }

    #[test]
    fn shape_mismatch_is_a_schema_error() {
        let data = synth_multioutput(20, 2, 2, 1).unwrap();
        let c = build(&data, &StructureConfig::default()).unwrap();
        let other = synth_multioutput(20, 2, 3, 1).unwrap();
        assert!(matches!(Circuit::from_json(&c.to_json(), &other), Err(Error::Schema { .. })));
    }
}
