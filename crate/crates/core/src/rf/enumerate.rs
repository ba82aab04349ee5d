//! Exact sample-position enumeration over a graph.
//!
//! Each node is assigned the set of input offsets that can influence one
//! output position: the entrance sees only the origin, a `k×k` conv at
//! dilation `r` takes the Minkowski sum of its input set with the tap
//! pattern, and every merge (sum, gated, concat) takes the union of its
//! inputs. Gates scale values but never change which positions are read.

use super::{AnalysisError, RfSrResult, SamplePositionSet};
use crate::netspec::{GraphSpec, NodeKind};
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct Enumeration {
    /// Per node, indexed like `GraphSpec::nodes`.
    pub nodes: Vec<SamplePositionSet>,
    /// Per branch `b ≥ 1`: union of the sets of all nodes in that branch.
    pub branches: BTreeMap<u32, SamplePositionSet>,
    /// Union of the exit sets.
    pub exit_union: SamplePositionSet,
}

impl Enumeration {
    /// Union over all branch sets; falls back to the exit union for graphs
    /// without branch labels.
    pub fn branch_union(&self) -> SamplePositionSet {
        if self.branches.is_empty() {
            return self.exit_union.clone();
        }
        self.branches
            .values()
            .fold(SamplePositionSet::default(), |acc, s| acc.union(s))
    }
}

pub fn enumerate_samples(g: &GraphSpec) -> Result<Enumeration, AnalysisError> {
    g.validate().map_err(AnalysisError::Graph)?;
    let order = g.topo_order().map_err(|v| AnalysisError::Graph(vec![v]))?;
    let mut sets: Vec<Option<SamplePositionSet>> = vec![None; g.nodes.len()];
    for idx in order {
        let node = &g.nodes[idx];
        let inputs = g.inputs_of(idx);
        let set = match node.kind {
            NodeKind::Entrance => SamplePositionSet::origin(),
            kind if kind.is_conv() => {
                let k = node.kernel.unwrap_or(1);
                if k != 1 && k != 3 {
                    return Err(AnalysisError::Unsupported(format!(
                        "node `{}` has kernel {k}; only 1 and 3 are analyzed",
                        node.id
                    )));
                }
                let src = sets[inputs[0].0].as_ref().expect("topological order");
                if k == 1 {
                    src.clone()
                } else {
                    src.dilate(k, node.dilation.unwrap_or(1))
                }
            }
            _ => inputs.iter().fold(SamplePositionSet::default(), |acc, (i, _)| {
                acc.union(sets[*i].as_ref().expect("topological order"))
            }),
        };
        sets[idx] = Some(set);
    }
    let nodes: Vec<SamplePositionSet> = sets.into_iter().map(|s| s.expect("all visited")).collect();

    let mut branches: BTreeMap<u32, SamplePositionSet> = BTreeMap::new();
    for (node, set) in g.nodes.iter().zip(&nodes) {
        if node.branch > 0 {
            let entry = branches.entry(node.branch).or_default();
            *entry = entry.union(set);
        }
    }
    let exit_union = g
        .exits()
        .into_iter()
        .fold(SamplePositionSet::default(), |acc, i| acc.union(&nodes[i]));
    Ok(Enumeration {
        nodes,
        branches,
        exit_union,
    })
}

/// RF/SR of a branched graph: the RF is the largest per-branch side and the
/// sample count is the size of the union of all branch sets.
pub fn rf_sr_gps(g: &GraphSpec) -> Result<RfSrResult, AnalysisError> {
    let e = enumerate_samples(g)?;
    let side = if e.branches.is_empty() {
        e.exit_union.rf_side()
    } else {
        e.branches.values().map(|s| s.rf_side()).max().unwrap_or(0)
    };
    let count = e.branch_union().len() as u64;
    Ok(RfSrResult::new(g.name.clone(), side, count))
}

/// RF side from the longest entrance→exit path, `2 Σ r(k-1)/2 + 1`,
/// computed by dynamic programming without enumerating any positions.
pub fn longest_path_side(g: &GraphSpec) -> Result<u64, AnalysisError> {
    g.validate().map_err(AnalysisError::Graph)?;
    let order = g.topo_order().map_err(|v| AnalysisError::Graph(vec![v]))?;
    let mut radius = vec![0u64; g.nodes.len()];
    for idx in order {
        let node = &g.nodes[idx];
        let upstream = g.inputs_of(idx).iter().map(|(i, _)| radius[*i]).max().unwrap_or(0);
        let own = if node.kind.is_conv() {
            let k = node.kernel.unwrap_or(1) as u64;
            node.dilation.unwrap_or(1) as u64 * (k - 1) / 2
        } else {
            0
        };
        radius[idx] = upstream + own;
    }
    let r = g.exits().into_iter().map(|i| radius[i]).max().unwrap_or(0);
    Ok(2 * r + 1)
}
