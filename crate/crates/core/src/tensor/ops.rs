//! Tape-free versions of every tensor op.
//!
//! These share kernels with [`Tape`](super::Tape), so a value computed here is
//! bit-identical to the value recorded on a tape for the same inputs.

use super::kernels::{self, ConvGeom};
use super::{Result, Shape, Tensor4, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Weights of a stride-1 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor4,
    /// `(1, out_ch, 1, 1)`
    pub bias: Tensor4,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    /// Convolution whose output has the same spatial size as its input.
    pub fn same(weight: Tensor4, bias: Tensor4, dilation: usize) -> Result<Self> {
        let k = weight.shape().h;
        if k % 2 == 0 {
            return Err(TensorError::Config(format!(
                "same-size padding needs an odd kernel, got k={k}"
            )));
        }
        if dilation == 0 {
            return Err(TensorError::Config("dilation must be positive".into()));
        }
        Ok(ConvParams {
            weight,
            bias,
            dilation,
            padding: dilation * (k - 1) / 2,
        })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, dilation: usize) -> Result<Self> {
        ConvParams::same(
            Tensor4::zeros([out_ch, in_ch, kernel, kernel]),
            Tensor4::zeros([1, out_ch, 1, 1]),
            dilation,
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape().n
    }

    pub(crate) fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel(),
            dilation: self.dilation,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: NormMode,
}

impl BatchNormParams {
    /// Unit scale, zero shift, zero mean, unit variance.
    pub fn identity(channels: usize, mode: NormMode) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            mode,
        }
    }
}

pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    kernels::conv2d_forward(x, &p.weight, Some(&p.bias), p.geom())
}

pub fn conv1x1(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    if p.kernel() != 1 || p.padding != 0 {
        return Err(TensorError::Config(format!(
            "conv1x1 given kernel {} padding {}",
            p.kernel(),
            p.padding
        )));
    }
    conv2d(x, p)
}

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics and folds them into the running estimates; eval mode uses the
/// running estimates and leaves them untouched.
pub fn batchnorm(x: &Tensor4, p: &mut BatchNormParams) -> Result<Tensor4> {
    let s = x.shape();
    let gamma = Tensor4::from_vec([1, s.c, 1, 1], p.gamma.clone())?;
    let beta = Tensor4::from_vec([1, s.c, 1, 1], p.beta.clone())?;
    kernels::check_bn_operands(x, &gamma, &beta)?;
    match p.mode {
        NormMode::Train => {
            let count = s.n * s.plane();
            if count < 2 {
                return Err(TensorError::Config(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {count}"
                )));
            }
            let (mean, var) = kernels::channel_moments(x);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            let (y, _) = kernels::channel_affine_normalize(x, &mean, &inv_std, &p.gamma, &p.beta);
            update_running_stats(p, &mean, &var, count);
            Ok(y)
        }
        NormMode::Eval => {
            if p.running_var.iter().any(|v| *v <= 0.0) {
                return Err(TensorError::Config("running variance must be positive".into()));
            }
            let inv_std: Vec<f64> = p.running_var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
            let (y, _) = kernels::channel_affine_normalize(x, &p.running_mean, &inv_std, &p.gamma, &p.beta);
            Ok(y)
        }
    }
}

/// Exponential moving average of batch statistics; the variance estimate is
/// the unbiased one.
pub(crate) fn update_running_stats(p: &mut BatchNormParams, mean: &[f64], var: &[f64], count: usize) {
    let unbias = count as f64 / (count as f64 - 1.0);
    for c in 0..mean.len() {
        p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * mean[c];
        p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * var[c] * unbias;
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.grad = None;
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!("add of {} and {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_vec(a.shape(), data)
}

pub(crate) fn check_mask_operands(x: Shape, m: Shape) -> Result<()> {
    if m.c != 1 || m.n != x.n || m.h != x.h || m.w != x.w {
        return Err(TensorError::Shape(format!(
            "mask {m} cannot broadcast over {x}; need (n, 1, h, w)"
        )));
    }
    Ok(())
}

/// Multiplies every channel of `x` by the single-channel mask `m`.
pub fn mul_channel_broadcast(x: &Tensor4, m: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    check_mask_operands(s, m.shape())?;
    let p = s.plane();
    let mut out = Tensor4::zeros(s);
    let (xd, md) = (x.data(), m.data());
    let od = out.data_mut();
    for n in 0..s.n {
        let mplane = &md[n * p..(n + 1) * p];
        for c in 0..s.c {
            let base = (n * s.c + c) * p;
            for i in 0..p {
                od[base + i] = xd[base + i] * mplane[i];
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::Shape("concat of an empty list".into()))?
        .shape();
    let mut total = 0;
    for x in xs {
        let s = x.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(TensorError::Shape(format!("concat of {first} and {s}")));
        }
        total += s.c;
    }
    let out_shape = first.with_channels(total);
    let p = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for x in xs {
            let c = x.shape().c;
            data.extend_from_slice(&x.data()[n * c * p..(n + 1) * c * p]);
        }
    }
    Tensor4::from_vec(out_shape, data)
}

pub fn split_channels(x: &Tensor4, sizes: &[usize]) -> Result<Vec<Tensor4>> {
    let s = x.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(TensorError::Shape(format!(
            "split sizes {sizes:?} do not sum to {} channels",
            s.c
        )));
    }
    let p = s.plane();
    let mut outs: Vec<Vec<f64>> = sizes.iter().map(|c| Vec::with_capacity(s.n * c * p)).collect();
    for n in 0..s.n {
        let mut start = (n * s.c) * p;
        for (out, c) in outs.iter_mut().zip(sizes) {
            out.extend_from_slice(&x.data()[start..start + c * p]);
            start += c * p;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, c)| Tensor4::from_vec(s.with_channels(*c), d))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossEntropyOutput {
    pub loss: f64,
    /// `(n, 1, h, w)`: probability of the true class, 0 where ignored.
    pub true_prob: Tensor4,
    /// Number of pixels that contributed to the mean.
    pub counted: usize,
    /// Set when every pixel was ignored; the loss is then defined as 0.
    pub all_ignored: bool,
}

pub(crate) fn check_labels(logits: Shape, labels: &[i64], ignore_index: i64) -> Result<()> {
    if labels.len() != logits.n * logits.plane() {
        return Err(TensorError::Shape(format!(
            "{} labels for logits {logits}",
            labels.len()
        )));
    }
    if let Some(bad) = labels
        .iter()
        .find(|&&l| l != ignore_index && (l < 0 || l as usize >= logits.c))
    {
        return Err(TensorError::Config(format!(
            "label {bad} outside [0, {}) and not the ignore index {ignore_index}",
            logits.c
        )));
    }
    Ok(())
}

/// Mean per-pixel negative log-likelihood over non-ignored pixels.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[i64], ignore_index: i64) -> Result<CrossEntropyOutput> {
    let s = logits.shape();
    check_labels(s, labels, ignore_index)?;
    let probs = kernels::softmax_channels(logits);
    let p = s.plane();
    let mut true_prob = Tensor4::zeros(s.with_channels(1));
    let mut total = 0.0;
    let mut counted = 0;
    for n in 0..s.n {
        for i in 0..p {
            let l = labels[n * p + i];
            if l == ignore_index {
                continue;
            }
            let l = l as usize;
            true_prob.data_mut()[n * p + i] = probs.data()[(n * s.c + l) * p + i];
            total += kernels::pixel_nll(logits, n, i, l);
            counted += 1;
        }
    }
    if counted == 0 {
        log::warn!("cross entropy: every pixel carries the ignore label");
    }
    Ok(CrossEntropyOutput {
        loss: if counted == 0 { 0.0 } else { total / counted as f64 },
        true_prob,
        counted,
        all_ignored: counted == 0,
    })
}
