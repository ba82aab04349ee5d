//! Parameter storage, conv+BN+ReLU blocks, tape binding and counting.

use super::{ModelError, Result};
use crate::netspec::{GraphSpec, SpecError};
use crate::tensor::{BatchNormParams, BatchStats, NormMode, Tape, Tensor4, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor4,
    /// Running BN statistics are stored alongside but never trained.
    pub trainable: bool,
}

/// Named tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor4, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel() as u64)
            .sum()
    }

    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    pub fn set_trainable_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.trainable_count() as usize;
        if flat.len() != expected {
            return Err(ModelError::Config(format!(
                "flat parameter vector has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut at = 0;
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let n = e.tensor.numel();
            e.tensor.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnBlock {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Convolution with bias, optionally followed by batch norm and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BnBlock>,
    pub relu: bool,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub bn: bool,
    pub relu: bool,
}

impl BlockSpec {
    pub fn conv_bn_relu(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        BlockSpec {
            in_ch,
            out_ch,
            kernel,
            dilation,
            bn: true,
            relu: true,
        }
    }
}

impl ConvBlock {
    /// He-normal weights, zero bias, unit BN scale, zero BN shift.
    pub fn new(params: &mut ParamSet, prefix: &str, spec: BlockSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kernel % 2 == 0 || spec.dilation == 0 {
            return Err(ModelError::Config(format!(
                "{prefix}: kernel {} dilation {} (need odd kernel, positive dilation)",
                spec.kernel, spec.dilation
            )));
        }
        let fan_in = (spec.in_ch * spec.kernel * spec.kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let wshape = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
        let wdata: Vec<f64> = (0..wshape.iter().product::<usize>()).map(|_| normal.sample(rng)).collect();
        let weight = params.add(format!("{prefix}.weight"), Tensor4::from_vec(wshape, wdata)?, true);
        let bias = params.add(format!("{prefix}.bias"), Tensor4::zeros([1, spec.out_ch, 1, 1]), true);
        let bn = spec.bn.then(|| {
            let ch = [1, spec.out_ch, 1, 1];
            BnBlock {
                gamma: params.add(format!("{prefix}.bn.gamma"), Tensor4::full(ch, 1.0), true),
                beta: params.add(format!("{prefix}.bn.beta"), Tensor4::zeros(ch), true),
                running_mean: params.add(format!("{prefix}.bn.running_mean"), Tensor4::zeros(ch), false),
                running_var: params.add(format!("{prefix}.bn.running_var"), Tensor4::full(ch, 1.0), false),
            }
        });
        Ok(ConvBlock {
            weight,
            bias,
            bn,
            relu: spec.relu,
            kernel: spec.kernel,
            dilation: spec.dilation,
        })
    }

    pub fn out_ch(&self, params: &ParamSet) -> usize {
        params.get(self.weight).shape().n
    }

    pub fn in_ch(&self, params: &ParamSet) -> usize {
        params.get(self.weight).shape().c
    }
}

/// A forward pass in progress: trainable parameters bound as tape leaves,
/// batch statistics collected for a later running-stat update, and gate
/// masks recorded for inspection.
pub struct Session {
    pub tape: Tape,
    vars: Vec<Option<Var>>,
    mode: NormMode,
    stats: Vec<(BnBlock, BatchStats)>,
    pub masks: BTreeMap<String, (Var, Var)>,
}

impl Session {
    pub fn new(params: &ParamSet, mode: NormMode) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .iter()
            .map(|(_, e)| e.trainable.then(|| tape.leaf(e.tensor.clone().with_requires_grad(true))))
            .collect();
        Session {
            tape,
            vars,
            mode,
            stats: Vec::new(),
            masks: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("trainable parameter is bound")
    }

    pub fn conv_block(&mut self, params: &ParamSet, block: &ConvBlock, x: Var) -> Result<Var> {
        let (w, b) = (self.param(block.weight), self.param(block.bias));
        let mut y = self.tape.conv2d_same(x, w, Some(b), block.dilation)?;
        if let Some(bn) = block.bn {
            let (g, be) = (self.param(bn.gamma), self.param(bn.beta));
            y = match self.mode {
                NormMode::Train => {
                    let (y, stats) = self.tape.batchnorm_train(y, g, be, crate::tensor::ops::BN_EPS)?;
                    self.stats.push((bn, stats));
                    y
                }
                NormMode::Eval => self.tape.batchnorm_eval(
                    y,
                    g,
                    be,
                    params.get(bn.running_mean).data(),
                    params.get(bn.running_var).data(),
                    crate::tensor::ops::BN_EPS,
                )?,
            };
        }
        if block.relu {
            y = self.tape.relu(y);
        }
        Ok(y)
    }

    /// Gradients of all trainable parameters, flattened in parameter order.
    /// Parameters the loss does not reach get zeros.
    pub fn flat_grads(&self, params: &ParamSet) -> Vec<f64> {
        let mut out = Vec::with_capacity(params.trainable_count() as usize);
        for (id, e) in params.iter().filter(|(_, e)| e.trainable) {
            match self.tape.grad(self.param(id)) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, e.tensor.numel())),
            }
        }
        out
    }

    /// Folds the collected batch statistics into the running estimates.
    pub fn apply_running_stats(&self, params: &mut ParamSet) {
        for (bn, stats) in &self.stats {
            let mut p = BatchNormParams::identity(stats.mean.len(), NormMode::Train);
            p.running_mean = params.get(bn.running_mean).data().to_vec();
            p.running_var = params.get(bn.running_var).data().to_vec();
            crate::tensor::ops::update_running_stats(&mut p, &stats.mean, &stats.var, stats.count);
            params.get_mut(bn.running_mean).data_mut().copy_from_slice(&p.running_mean);
            params.get_mut(bn.running_var).data_mut().copy_from_slice(&p.running_var);
        }
    }
}

/// Which parameter kinds a static count includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CountPolicy {
    pub conv_bias: bool,
    pub bn_affine: bool,
}

impl CountPolicy {
    /// Conv weights only, the convention of published model-size tables.
    pub const WEIGHTS_ONLY: CountPolicy = CountPolicy {
        conv_bias: false,
        bn_affine: false,
    };
    /// Everything the runtime trains: weights, biases and BN scale/shift.
    pub const ALL: CountPolicy = CountPolicy {
        conv_bias: true,
        bn_affine: true,
    };

    fn conv(self, in_ch: u64, out_ch: u64, k: u64, bn: bool) -> u64 {
        let mut n = k * k * in_ch * out_ch;
        if self.conv_bias {
            n += out_ch;
        }
        if self.bn_affine && bn {
            n += 2 * out_ch;
        }
        n
    }

    /// Parameters of one gate over inputs with `c_v` and `c_h` channels.
    pub fn gate(self, c_v: u64, c_h: u64) -> u64 {
        self.conv(c_v, 1, 1, true) + self.conv(c_h, 1, 1, true) + self.conv(2, 2, 1, true)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub per_node: BTreeMap<String, u64>,
    /// Sum over all gates; included in `total`.
    pub gates: u64,
}

/// Static parameter count of a graph. Every conv node is assumed to be
/// followed by batch norm, as in the runtime.
pub fn count_graph_params(g: &GraphSpec, policy: CountPolicy) -> std::result::Result<ParamCount, SpecError> {
    g.ensure_valid()?;
    let channels = g.channels().map_err(|v| SpecError::Invalid {
        name: g.name.clone(),
        violations: vec![v],
    })?;
    let mut per_node = BTreeMap::new();
    let mut gates = 0;
    for node in &g.nodes {
        if node.kind.is_conv() {
            let k = node.kernel.unwrap_or(1) as u64;
            let n = policy.conv(
                node.in_ch.unwrap_or(0) as u64,
                node.out_ch.unwrap_or(0) as u64,
                k,
                true,
            );
            per_node.insert(node.id.clone(), n);
        }
    }
    for gate in &g.gates {
        let ch = |id: &str| g.node_index(id).map_or(0, |i| channels[i] as u64);
        let n = policy.gate(ch(&gate.vertical), ch(&gate.horizontal));
        per_node.insert(format!("{}.gate", gate.merge), n);
        gates += n;
    }
    Ok(ParamCount {
        total: per_node.values().sum(),
        per_node,
        gates,
    })
}
