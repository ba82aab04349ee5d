//! Reverse-mode differentiation over a linear record of executed ops.

use super::kernels::{self, ConvGeom};
use super::ops::check_labels;
use super::{Result, Shape, Tensor4, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch norm, for updating the
/// running estimates outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    MulMask {
        x: Var,
        m: Var,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor4,
        labels: Vec<i64>,
        ignore_index: i64,
        counted: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
}

/// Records differentiable ops in execution order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    visits: Vec<Var>,
    relu_grad_scale: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            visits: Vec::new(),
            relu_grad_scale: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients flow into it iff `requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor4) -> Var {
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor4) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Nodes visited by the last backward pass, in visiting order.
    pub fn backward_visits(&self) -> &[Var] {
        &self.visits
    }

    /// Scales every ReLU input gradient by `factor`. Only useful as a
    /// negative control for gradient checking.
    #[doc(hidden)]
    pub fn corrupt_relu_backward(&mut self, factor: f64) {
        self.relu_grad_scale = factor;
    }

    /// On/off state of every recorded ReLU input element, in tape order.
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, value: Tensor4, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad,
            op => inputs(op).iter().any(|v| self.nodes[v.0].value.requires_grad),
        };
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, padding: usize) -> Result<Var> {
        let kernel = self.shape(w).h;
        if dilation == 0 {
            return Err(TensorError::Config("dilation must be positive".into()));
        }
        let geom = ConvGeom {
            kernel,
            dilation,
            padding,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(out, Op::Conv { x, w, b, geom }))
    }

    /// Same-size convolution: padding is `dilation * (k - 1) / 2`.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let k = self.shape(w).h;
        if k % 2 == 0 {
            return Err(TensorError::Config(format!(
                "same-size padding needs an odd kernel, got k={k}"
            )));
        }
        self.conv2d(x, w, b, dilation, dilation * (k - 1) / 2)
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        kernels::check_bn_operands(xv, self.value(gamma), self.value(beta))?;
        let s = xv.shape();
        let count = s.n * s.plane();
        if count < 2 {
            return Err(TensorError::Config(format!(
                "train-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let (mean, var) = kernels::channel_moments(xv);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::channel_affine_normalize(
            xv,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let node = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((node, BatchStats { mean, var, count }))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        kernels::check_bn_operands(xv, self.value(gamma), self.value(beta))?;
        let c = xv.shape().c;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::Shape(format!("running stats do not cover {c} channels")));
        }
        if running_var.iter().any(|v| *v <= 0.0) {
            return Err(TensorError::Config("running variance must be positive".into()));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::channel_affine_normalize(
            xv,
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = super::ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = super::ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let y = super::ops::mul_channel_broadcast(self.value(x), self.value(m))?;
        Ok(self.push(y, Op::MulMask { x, m }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4> = xs.iter().map(|v| self.value(*v)).collect();
        let y = super::ops::concat_channels(&refs)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn split_channels(&mut self, x: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let parts = super::ops::split_channels(self.value(x), sizes)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(parts.len());
        for (part, c) in parts.into_iter().zip(sizes) {
            out.push(self.push(part, Op::Slice { x, start }));
            start += c;
        }
        Ok(out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor4::scalar(s), Op::Sum(x))
    }

    /// `sum(x * weights)` for a fixed weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor4) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(TensorError::Shape(format!(
                "weighted sum of {} with weights {}",
                self.shape(x),
                weights.shape()
            )));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor4::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy over non-ignored pixels. Returns the scalar
    /// loss node and the tape-free summary (true-class probabilities etc.).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[i64],
        ignore_index: i64,
    ) -> Result<(Var, super::CrossEntropyOutput)> {
        let lv = self.value(logits);
        check_labels(lv.shape(), labels, ignore_index)?;
        let summary = super::ops::softmax_cross_entropy(lv, labels, ignore_index)?;
        let probs = kernels::softmax_channels(lv);
        let node = self.push(
            Tensor4::scalar(summary.loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore_index,
                counted: summary.counted,
            },
        );
        Ok((node, summary))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient and
    /// stores the result in each node's `grad` field.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.shape() != Shape::scalar() {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got {}",
                node.value.shape()
            )));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(TensorError::Usage("backward from a value with no recorded ops".into()));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.visits.clear();
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.visits.push(Var(i));
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let gout = Tensor4::from_vec(node.value.shape(), g.to_vec()).expect("grad shape");
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &gout,
                    *geom,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    send(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let (sum_g, sum_gx) = kernels::channel_grad_sums(g, xhat, s);
                    send(*gamma, sum_gx);
                    send(*beta, sum_g);
                }
                if self.needs(*x) {
                    let gx = if *batch_stats {
                        kernels::bn_train_input_grad(g, xhat, gam, inv_std, s)
                    } else {
                        let p = s.plane();
                        let mut gx = g.to_vec();
                        for n in 0..s.n {
                            for c in 0..s.c {
                                let k = gam[c] * inv_std[c];
                                let base = (n * s.c + c) * p;
                                gx[base..base + p].iter_mut().for_each(|v| *v *= k);
                            }
                        }
                        gx
                    };
                    send(*x, gx);
                }
            }
            Op::Relu(x) => {
                let scale = self.relu_grad_scale;
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(xv, gv)| if *xv > 0.0 { gv * scale } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::MulMask { x, m } => {
                let s = node.value.shape();
                let p = s.plane();
                let (xd, md) = (self.value(*x).data(), self.value(*m).data());
                if self.needs(*x) {
                    let mut gx = vec![0.0; s.numel()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * p;
                            for j in 0..p {
                                gx[base + j] = g[base + j] * md[n * p + j];
                            }
                        }
                    }
                    send(*x, gx);
                }
                if self.needs(*m) {
                    let mut gm = vec![0.0; s.n * p];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * p;
                            for j in 0..p {
                                gm[n * p + j] += g[base + j] * xd[base + j];
                            }
                        }
                    }
                    send(*m, gm);
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let p = s.plane();
                let mut offset = 0;
                for part in parts {
                    let c = self.shape(*part).c;
                    if self.needs(*part) {
                        let mut gp = Vec::with_capacity(s.n * c * p);
                        for n in 0..s.n {
                            let start = (n * s.c + offset) * p;
                            gp.extend_from_slice(&g[start..start + c * p]);
                        }
                        send(*part, gp);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let c = node.value.shape().c;
                let p = xs.plane();
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    let dst = (n * xs.c + start) * p;
                    gx[dst..dst + c * p].copy_from_slice(&g[n * c * p..(n + 1) * c * p]);
                }
                send(*x, gx);
            }
            Op::Sum(x) => {
                send(*x, vec![g[0]; self.value(*x).numel()]);
            }
            Op::WeightedSum { x, weights } => {
                send(*x, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore_index,
                counted,
            } => {
                let s = probs.shape();
                let p = s.plane();
                let mut gl = vec![0.0; s.numel()];
                if *counted > 0 {
                    let scale = g[0] / *counted as f64;
                    for n in 0..s.n {
                        for j in 0..p {
                            let l = labels[n * p + j];
                            if l == *ignore_index {
                                continue;
                            }
                            for c in 0..s.c {
                                let idx = (n * s.c + c) * p + j;
                                let onehot = if c == l as usize { 1.0 } else { 0.0 };
                                gl[idx] = scale * (probs.data()[idx] - onehot);
                            }
                        }
                    }
                }
                send(*logits, gl);
            }
        }
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu(x) | Op::Sum(x) => vec![*x],
        Op::Add(a, b) => vec![*a, *b],
        Op::MulMask { x, m } => vec![*x, *m],
        Op::Concat(parts) => parts.clone(),
        Op::Slice { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}
