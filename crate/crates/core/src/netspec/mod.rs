//! Declarative atrous-convolution DAGs.
//!
//! A [`GraphSpec`] lists nodes (entrances, 1×1 and dilated 3×3 convolutions,
//! merges and exits), directed edges tagged horizontal (same branch) or
//! vertical (from the previous branch), and the gate attachments of every
//! gated merge. The JSON form produced by [`GraphSpec::to_json`] is the
//! contract shared by the runtime, the analyzer and the CLI.

mod builders;
mod builtin;

pub use builders::{build_aspp, build_denseaspp, build_serial, build_supernet, SqueezeMode, SuperNetConfig};
pub use builtin::{Builtin, ChannelProfile, ASPP_RATES, TUNED_GRID, UNTUNED_GRID};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entrance,
    Squeeze1x1,
    Atrous3x3,
    Excite1x1,
    GateMerge,
    SumMerge,
    ConcatMerge,
    Exit,
}

impl NodeKind {
    pub fn is_conv(self) -> bool {
        matches!(self, NodeKind::Squeeze1x1 | NodeKind::Atrous3x3 | NodeKind::Excite1x1)
    }

    pub fn is_merge(self) -> bool {
        matches!(self, NodeKind::GateMerge | NodeKind::SumMerge | NodeKind::ConcatMerge)
    }

    fn expected_kernel(self) -> Option<u32> {
        match self {
            NodeKind::Squeeze1x1 | NodeKind::Excite1x1 => Some(1),
            NodeKind::Atrous3x3 => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        write!(f, "{}", s.as_str().unwrap_or("?"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_ch: Option<u32>,
    /// Output channels of a convolution, or the channel count an entrance
    /// feeds into the graph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_ch: Option<u32>,
    /// 1-based branch index; 0 marks module-level nodes shared by all branches.
    #[serde(default)]
    pub branch: u32,
    /// Position inside the branch: 0 squeeze, 1.. atrous layers, then excite.
    #[serde(default)]
    pub layer: u32,
}

impl NodeSpec {
    pub fn entrance(id: impl Into<String>, channels: u32) -> Self {
        NodeSpec {
            id: id.into(),
            kind: NodeKind::Entrance,
            kernel: None,
            dilation: None,
            in_ch: None,
            out_ch: Some(channels),
            branch: 0,
            layer: 0,
        }
    }

    pub fn conv(id: impl Into<String>, kind: NodeKind, in_ch: u32, out_ch: u32, dilation: Option<u32>) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            kernel: kind.expected_kernel(),
            dilation,
            in_ch: Some(in_ch),
            out_ch: Some(out_ch),
            branch: 0,
            layer: 0,
        }
    }

    pub fn merge(id: impl Into<String>, kind: NodeKind) -> Self {
        NodeSpec {
            id: id.into(),
            kind,
            kernel: None,
            dilation: None,
            in_ch: None,
            out_ch: None,
            branch: 0,
            layer: 0,
        }
    }

    pub fn at(mut self, branch: u32, layer: u32) -> Self {
        self.branch = branch;
        self.layer = layer;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeRole {
    Horizontal,
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub role: EdgeRole,
}

impl EdgeSpec {
    pub fn new(from: impl Into<String>, to: impl Into<String>, role: EdgeRole) -> Self {
        EdgeSpec {
            from: from.into(),
            to: to.into(),
            role,
        }
    }
}

/// Attachment of a gate to a gated merge node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSpec {
    pub merge: String,
    pub vertical: String,
    pub horizontal: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub gates: Vec<GateSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("empty graph: no nodes")]
    Empty,
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("edge {index}: unknown node `{id}`")]
    UnknownNode { index: usize, id: String },
    #[error("edge {index}: duplicate or self edge {from} -> {to}")]
    BadEdge { index: usize, from: String, to: String },
    #[error("cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("gate arity: node `{node}` {detail}")]
    GateArity { node: String, detail: String },
    #[error("node `{node}`: {detail}")]
    Fields { node: String, detail: String },
    #[error("channel mismatch at `{node}`: {detail}")]
    Channels { node: String, detail: String },
    #[error("reachability: node `{node}` {detail}")]
    Reachability { node: String, detail: String },
    #[error("graph has no {0}")]
    Missing(&'static str),
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid graph `{name}`:\n{}", list_violations(.violations))]
    Invalid { name: String, violations: Vec<Violation> },
    #[error("config error: {0}")]
    Config(String),
}

fn list_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}

impl GraphSpec {
    pub fn new(name: impl Into<String>) -> Self {
        GraphSpec {
            name: name.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
            gates: Vec::new(),
        }
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Incoming `(source index, role)` pairs of node `idx`, in edge order.
    pub fn inputs_of(&self, idx: usize) -> Vec<(usize, EdgeRole)> {
        let id = &self.nodes[idx].id;
        self.edges
            .iter()
            .filter(|e| &e.to == id)
            .filter_map(|e| self.node_index(&e.from).map(|i| (i, e.role)))
            .collect()
    }

    pub fn gate_for(&self, merge_id: &str) -> Option<&GateSpec> {
        self.gates.iter().find(|g| g.merge == merge_id)
    }

    /// Distinct branch indices > 0, ascending.
    pub fn branches(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .map(|n| n.branch)
            .filter(|b| *b > 0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn exits(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind == NodeKind::Exit)
            .collect()
    }

    pub fn entrances(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].kind == NodeKind::Entrance)
            .collect()
    }

    /// Kahn's algorithm; among ready nodes the smallest id goes first, so the
    /// order depends only on the graph, never on node listing order.
    pub fn topo_order(&self) -> Result<Vec<usize>, Violation> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &self.edges {
            if let (Some(f), Some(t)) = (self.node_index(&e.from), self.node_index(&e.to)) {
                indegree[t] += 1;
                succ[f].push(t);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| (self.nodes[i].id.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(first) = ready.pop_first() {
            let i = first.1;
            order.push(i);
            for &t in &succ[i] {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert((self.nodes[t].id.as_str(), t));
                }
            }
        }
        if order.len() < n {
            let mut stuck: Vec<String> = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            stuck.sort();
            return Err(Violation::Cycle(stuck));
        }
        Ok(order)
    }

    /// Checks structure, per-kind fields, channel compatibility along edges,
    /// gate arity and entrance/exit reachability.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return Err(vec![Violation::Empty]);
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                out.push(Violation::DuplicateId(n.id.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (index, e) in self.edges.iter().enumerate() {
            for id in [&e.from, &e.to] {
                if !seen.contains(id.as_str()) {
                    out.push(Violation::UnknownNode { index, id: id.clone() });
                }
            }
            if e.from == e.to || !edge_set.insert((e.from.as_str(), e.to.as_str())) {
                out.push(Violation::BadEdge {
                    index,
                    from: e.from.clone(),
                    to: e.to.clone(),
                });
            }
        }
        if !out.is_empty() {
            return Err(out);
        }
        for n in &self.nodes {
            check_fields(n, &mut out);
        }
        self.check_gates(&mut out);
        let order = match self.topo_order() {
            Ok(o) => o,
            Err(v) => {
                out.push(v);
                return Err(out);
            }
        };
        self.check_reachability(&mut out);
        if out.is_empty() {
            if let Err(v) = self.channels_in_order(&order) {
                out.push(v);
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    fn check_gates(&self, out: &mut Vec<Violation>) {
        let mut per_merge: BTreeMap<&str, usize> = BTreeMap::new();
        for g in &self.gates {
            *per_merge.entry(g.merge.as_str()).or_default() += 1;
            match self.node(&g.merge) {
                Some(n) if n.kind == NodeKind::GateMerge => {}
                _ => out.push(Violation::GateArity {
                    node: g.merge.clone(),
                    detail: "has a gate attachment but is not a gate_merge".into(),
                }),
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let ins = self.inputs_of(i);
            match n.kind {
                NodeKind::GateMerge => {
                    let v: Vec<_> = ins.iter().filter(|(_, r)| *r == EdgeRole::Vertical).collect();
                    let h: Vec<_> = ins.iter().filter(|(_, r)| *r == EdgeRole::Horizontal).collect();
                    if ins.len() != 2 || v.len() != 1 || h.len() != 1 {
                        out.push(Violation::GateArity {
                            node: n.id.clone(),
                            detail: format!(
                                "needs one vertical and one horizontal input, has {} vertical / {} horizontal",
                                v.len(),
                                h.len()
                            ),
                        });
                        continue;
                    }
                    match (per_merge.get(n.id.as_str()), self.gate_for(&n.id)) {
                        (Some(1), Some(g)) => {
                            let (vid, hid) = (&self.nodes[v[0].0].id, &self.nodes[h[0].0].id);
                            if &g.vertical != vid || &g.horizontal != hid {
                                out.push(Violation::GateArity {
                                    node: n.id.clone(),
                                    detail: format!(
                                        "gate lists ({}, {}) but edges bring ({vid}, {hid})",
                                        g.vertical, g.horizontal
                                    ),
                                });
                            }
                        }
                        _ => out.push(Violation::GateArity {
                            node: n.id.clone(),
                            detail: "needs exactly one gate attachment".into(),
                        }),
                    }
                }
                NodeKind::Entrance if !ins.is_empty() => out.push(Violation::Reachability {
                    node: n.id.clone(),
                    detail: "entrance has incoming edges".into(),
                }),
                NodeKind::Squeeze1x1 | NodeKind::Atrous3x3 | NodeKind::Excite1x1 | NodeKind::Exit
                    if ins.len() > 1 =>
                {
                    out.push(Violation::Fields {
                        node: n.id.clone(),
                        detail: format!("{} takes one input, has {} (add a merge node)", n.kind, ins.len()),
                    })
                }
                _ => {}
            }
        }
    }

    fn check_reachability(&self, out: &mut Vec<Violation>) {
        if self.entrances().is_empty() {
            out.push(Violation::Missing("entrance"));
        }
        if self.exits().is_empty() {
            out.push(Violation::Missing("exit"));
        }
        let n = self.nodes.len();
        let mut has_in = vec![false; n];
        let mut has_out = vec![false; n];
        for e in &self.edges {
            if let (Some(f), Some(t)) = (self.node_index(&e.from), self.node_index(&e.to)) {
                has_out[f] = true;
                has_in[t] = true;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.kind != NodeKind::Entrance && !has_in[i] {
                out.push(Violation::Reachability {
                    node: node.id.clone(),
                    detail: "has no incoming edge".into(),
                });
            }
            if node.kind != NodeKind::Exit && !has_out[i] {
                out.push(Violation::Reachability {
                    node: node.id.clone(),
                    detail: "has no outgoing edge".into(),
                });
            }
        }
    }

    /// Output channel count of every node (indexed like `nodes`).
    pub fn channels(&self) -> Result<Vec<u32>, Violation> {
        let order = self.topo_order()?;
        self.channels_in_order(&order)
    }

    fn channels_in_order(&self, order: &[usize]) -> Result<Vec<u32>, Violation> {
        let mut ch = vec![0u32; self.nodes.len()];
        for &i in order {
            let node = &self.nodes[i];
            let ins: Vec<u32> = self.inputs_of(i).iter().map(|(s, _)| ch[*s]).collect();
            let mismatch = |detail: String| Violation::Channels {
                node: node.id.clone(),
                detail,
            };
            ch[i] = match node.kind {
                NodeKind::Entrance => node.out_ch.unwrap_or(0),
                NodeKind::Squeeze1x1 | NodeKind::Atrous3x3 | NodeKind::Excite1x1 => {
                    let want = node.in_ch.unwrap_or(0);
                    if ins.first() != Some(&want) {
                        return Err(mismatch(format!("expects {want} input channels, receives {ins:?}")));
                    }
                    node.out_ch.unwrap_or(0)
                }
                NodeKind::GateMerge | NodeKind::SumMerge | NodeKind::Exit => {
                    if ins.is_empty() || ins.iter().any(|c| *c != ins[0]) {
                        return Err(mismatch(format!("inputs must agree on channels, got {ins:?}")));
                    }
                    ins[0]
                }
                NodeKind::ConcatMerge => ins.iter().sum(),
            };
        }
        Ok(ch)
    }

    /// Canonical JSON: sorted keys, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("graph spec serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("json value serializes");
        s.push('\n');
        s
    }

    /// Parses and validates a graph spec.
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        let g: GraphSpec = serde_json::from_str(text).map_err(|e| SpecError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        g.validate().map_err(|violations| SpecError::Invalid {
            name: g.name.clone(),
            violations,
        })?;
        Ok(g)
    }

    /// Like [`validate`](Self::validate) but wrapped as a [`SpecError`].
    pub fn ensure_valid(&self) -> Result<(), SpecError> {
        self.validate().map_err(|violations| SpecError::Invalid {
            name: self.name.clone(),
            violations,
        })
    }

    pub(crate) fn checked(self) -> Result<Self, SpecError> {
        match self.validate() {
            Ok(()) => Ok(self),
            Err(violations) => Err(SpecError::Invalid {
                name: self.name,
                violations,
            }),
        }
    }
}

fn check_fields(n: &NodeSpec, out: &mut Vec<Violation>) {
    let mut bad = |detail: String| {
        out.push(Violation::Fields {
            node: n.id.clone(),
            detail,
        })
    };
    if n.kind.is_conv() {
        let want = n.kind.expected_kernel();
        if n.kernel != want {
            bad(format!("{} needs kernel {:?}, has {:?}", n.kind, want, n.kernel));
        }
        if n.in_ch.unwrap_or(0) == 0 || n.out_ch.unwrap_or(0) == 0 {
            bad("convolutions need positive in_ch and out_ch".into());
        }
    } else if n.kernel.is_some() || n.in_ch.is_some() {
        bad(format!("{} takes no kernel or in_ch", n.kind));
    }
    match (n.kind, n.dilation) {
        (NodeKind::Atrous3x3, Some(r)) if r > 0 => {}
        (NodeKind::Atrous3x3, _) => bad("atrous3x3 needs a positive dilation".into()),
        (_, Some(_)) => bad(format!("{} takes no dilation", n.kind)),
        _ => {}
    }
    match n.kind {
        NodeKind::Entrance if n.out_ch.unwrap_or(0) == 0 => bad("entrance needs positive out_ch".into()),
        k if k.is_merge() || k == NodeKind::Exit => {
            if n.out_ch.is_some() {
                bad(format!("{k} derives its channels from its inputs"));
            }
        }
        _ => {}
    }
}
