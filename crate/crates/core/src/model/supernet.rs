//! Runtime network built from a graph spec.

use super::gate::{gate_forward, GateModule};
use super::params::{BlockSpec, ConvBlock, ParamSet, Session};
use super::{ModelError, Result};
use crate::netspec::{EdgeRole, GraphSpec, NodeKind};
use crate::tensor::{NormMode, Tensor4, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the fusion conv applied to the graph output.
    pub head_ch: usize,
    /// Adds a 1×1 classifier producing this many logits per pixel.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperNetModel {
    pub graph: GraphSpec,
    pub config: ModelConfig,
    pub params: ParamSet,
    convs: BTreeMap<String, ConvBlock>,
    pub gates: BTreeMap<String, GateModule>,
    fuse: ConvBlock,
    classifier: Option<ConvBlock>,
    order: Vec<usize>,
    in_ch: usize,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Option<Var>,
    /// Gate merge id → `(M_v', M_h')`.
    pub masks: BTreeMap<String, (Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Value of the branch's last node in topological order.
    pub output: Var,
    /// Atrous outputs keyed by layer, the vertical feeds of the next branch.
    pub intermediates: BTreeMap<u32, Var>,
    /// Every node evaluated in this branch, by node index.
    pub values: BTreeMap<usize, Var>,
}

/// Detached results of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor4,
    pub logits: Option<Tensor4>,
    pub masks: BTreeMap<String, (Tensor4, Tensor4)>,
}

impl SuperNetModel {
    pub fn new(graph: GraphSpec, config: ModelConfig, seed: u64) -> Result<Self> {
        graph.ensure_valid()?;
        let entrances = graph.entrances();
        let exits = graph.exits();
        if exits.len() != 1 {
            return Err(ModelError::Graph(format!("runtime needs exactly one exit, found {}", exits.len())));
        }
        let in_ch = graph.nodes[entrances[0]].out_ch.unwrap_or(0) as usize;
        if entrances.iter().any(|&i| graph.nodes[i].out_ch != Some(in_ch as u32)) {
            return Err(ModelError::Graph("entrances disagree on channel count".into()));
        }
        let channels = graph.channels().map_err(|v| ModelError::Graph(v.to_string()))?;
        let order = graph.topo_order().map_err(|v| ModelError::Graph(v.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut convs = BTreeMap::new();
        let mut gates = BTreeMap::new();
        for &idx in &order {
            let node = &graph.nodes[idx];
            if node.kind.is_conv() {
                let spec = BlockSpec::conv_bn_relu(
                    node.in_ch.unwrap_or(0) as usize,
                    node.out_ch.unwrap_or(0) as usize,
                    node.kernel.unwrap_or(1) as usize,
                    node.dilation.unwrap_or(1) as usize,
                );
                convs.insert(node.id.clone(), ConvBlock::new(&mut params, &node.id, spec, &mut rng)?);
            } else if node.kind == NodeKind::GateMerge {
                let gate = graph
                    .gate_for(&node.id)
                    .ok_or_else(|| ModelError::Graph(format!("no gate entry for `{}`", node.id)))?;
                let ch = |id: &str| graph.node_index(id).map_or(0, |i| channels[i] as usize);
                let module = GateModule::new(
                    &mut params,
                    &format!("{}.gate", node.id),
                    ch(&gate.vertical),
                    ch(&gate.horizontal),
                    &mut rng,
                )?;
                gates.insert(node.id.clone(), module);
            }
        }
        let exit_ch = channels[exits[0]] as usize;
        let fuse = ConvBlock::new(
            &mut params,
            "head.fuse",
            BlockSpec::conv_bn_relu(exit_ch, config.head_ch, 1, 1),
            &mut rng,
        )?;
        let classifier = match config.num_classes {
            Some(k) => Some(ConvBlock::new(
                &mut params,
                "head.classifier",
                BlockSpec {
                    in_ch: config.head_ch,
                    out_ch: k,
                    kernel: 1,
                    dilation: 1,
                    bn: false,
                    relu: false,
                },
                &mut rng,
            )?),
            None => None,
        };
        Ok(SuperNetModel {
            graph,
            config,
            params,
            convs,
            gates,
            fuse,
            classifier,
            order,
            in_ch,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    /// Trainable scalar count.
    pub fn count_params(&self) -> u64 {
        self.params.trainable_count()
    }

    pub fn conv_block(&self, node_id: &str) -> Option<&ConvBlock> {
        self.convs.get(node_id)
    }

    /// Forces every gate to emit unit masks, turning each gated merge into a
    /// plain sum.
    pub fn set_unit_gates(&mut self) {
        for gate in self.gates.values() {
            gate.set_constant_masks(&mut self.params, 1.0, 1.0);
        }
    }

    fn eval_node(
        &self,
        s: &mut Session,
        idx: usize,
        inputs: &[(Var, EdgeRole)],
        x: Var,
    ) -> Result<Var> {
        let node = &self.graph.nodes[idx];
        Ok(match node.kind {
            NodeKind::Entrance => x,
            k if k.is_conv() => s.conv_block(&self.params, &self.convs[&node.id], inputs[0].0)?,
            NodeKind::SumMerge => {
                let mut acc = inputs[0].0;
                for (v, _) in &inputs[1..] {
                    acc = s.tape.add(acc, *v)?;
                }
                acc
            }
            NodeKind::GateMerge => {
                let pick = |role| inputs.iter().find(|(_, r)| *r == role).map(|(v, _)| *v);
                let (xv, xh) = (pick(EdgeRole::Vertical), pick(EdgeRole::Horizontal));
                let (Some(xv), Some(xh)) = (xv, xh) else {
                    return Err(ModelError::Graph(format!("gate `{}` lacks an input", node.id)));
                };
                let out = gate_forward(s, &self.params, &self.gates[&node.id], xv, xh)?;
                s.masks.insert(node.id.clone(), (out.mask_v, out.mask_h));
                out.o
            }
            NodeKind::ConcatMerge => {
                let vars: Vec<Var> = inputs.iter().map(|(v, _)| *v).collect();
                s.tape.concat_channels(&vars)?
            }
            _ => inputs[0].0,
        })
    }

    /// Evaluates the nodes of one branch. Inputs from outside the branch are
    /// looked up in `shared`, except vertical edges, which must be supplied
    /// through `vertical_feeds` keyed by the receiving node's layer.
    pub fn branch_forward(
        &self,
        s: &mut Session,
        branch: u32,
        x: Var,
        shared: &BTreeMap<usize, Var>,
        vertical_feeds: &BTreeMap<u32, Var>,
    ) -> Result<BranchOutput> {
        let mut values = BTreeMap::new();
        let mut intermediates = BTreeMap::new();
        let mut last = None;
        for &idx in self.order.iter().filter(|&&i| self.graph.nodes[i].branch == branch) {
            let node = &self.graph.nodes[idx];
            let mut inputs = Vec::new();
            for (src, role) in self.graph.inputs_of(idx) {
                let from_branch = self.graph.nodes[src].branch == branch;
                let v = if from_branch {
                    values.get(&src).copied()
                } else if role == EdgeRole::Vertical {
                    Some(*vertical_feeds.get(&node.layer).ok_or_else(|| {
                        ModelError::Graph(format!(
                            "node `{}` needs a vertical feed at layer {} that was not supplied",
                            node.id, node.layer
                        ))
                    })?)
                } else {
                    shared.get(&src).copied()
                };
                let v = v.ok_or_else(|| {
                    ModelError::Graph(format!(
                        "input `{}` of `{}` is not available",
                        self.graph.nodes[src].id, node.id
                    ))
                })?;
                inputs.push((v, role));
            }
            let y = self.eval_node(s, idx, &inputs, x)?;
            if node.kind == NodeKind::Atrous3x3 {
                intermediates.insert(node.layer, y);
            }
            values.insert(idx, y);
            last = Some(y);
        }
        let output = last.ok_or_else(|| ModelError::Graph(format!("branch {branch} has no nodes")))?;
        Ok(BranchOutput {
            output,
            intermediates,
            values,
        })
    }

    /// Shared nodes first, then branches in ascending order (each fed the
    /// previous branch's intermediates), then the remaining shared nodes,
    /// the fusion conv and the optional classifier.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<ForwardOutput> {
        let xs = s.tape.shape(x);
        if xs.c != self.in_ch {
            return Err(ModelError::Tensor(TensorError::Shape(format!(
                "input has {} channels, graph expects {}",
                xs.c, self.in_ch
            ))));
        }
        let mut values: BTreeMap<usize, Var> = BTreeMap::new();
        let shared_pass = |s: &mut Session, values: &mut BTreeMap<usize, Var>| -> Result<()> {
            for &idx in &self.order {
                if self.graph.nodes[idx].branch != 0 || values.contains_key(&idx) {
                    continue;
                }
                let inputs: Option<Vec<(Var, EdgeRole)>> = self
                    .graph
                    .inputs_of(idx)
                    .into_iter()
                    .map(|(src, role)| values.get(&src).map(|v| (*v, role)))
                    .collect();
                if let Some(inputs) = inputs {
                    let y = self.eval_node(s, idx, &inputs, x)?;
                    values.insert(idx, y);
                }
            }
            Ok(())
        };
        shared_pass(s, &mut values)?;
        let mut feeds = BTreeMap::new();
        for b in self.graph.branches() {
            let out = self.branch_forward(s, b, x, &values, &feeds)?;
            values.extend(out.values);
            feeds = out.intermediates;
        }
        shared_pass(s, &mut values)?;
        let exit = self.graph.exits()[0];
        let y = *values
            .get(&exit)
            .ok_or_else(|| ModelError::Graph("exit was never reached".into()))?;
        let features = s.conv_block(&self.params, &self.fuse, y)?;
        let logits = match &self.classifier {
            Some(c) => Some(s.conv_block(&self.params, c, features)?),
            None => None,
        };
        Ok(ForwardOutput {
            features,
            logits,
            masks: s.masks.clone(),
        })
    }

    /// Runs a forward pass and detaches the results. In train mode the
    /// running statistics are not updated.
    pub fn infer(&self, x: &Tensor4, mode: NormMode) -> Result<Inference> {
        let mut s = Session::new(&self.params, mode);
        let xv = s.tape.constant(x.clone());
        let out = self.forward(&mut s, xv)?;
        Ok(Inference {
            features: s.tape.value(out.features).clone(),
            logits: out.logits.map(|l| s.tape.value(l).clone()),
            masks: out
                .masks
                .iter()
                .map(|(k, (v, h))| (k.clone(), (s.tape.value(*v).clone(), s.tape.value(*h).clone())))
                .collect(),
        })
    }
}
