// Raw forward/backward kernels shared by the pure ops and the tape.
//
// All loops run in a fixed order so results are bit-reproducible.

use super::{Result, Shape, Tensor4, TensorError};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn output_shape(&self, x: Shape, out_ch: usize) -> Result<Shape> {
        let reach = self.dilation * (self.kernel - 1);
        let oh = (x.h + 2 * self.padding).checked_sub(reach);
        let ow = (x.w + 2 * self.padding).checked_sub(reach);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(Shape::new(x.n, out_ch, oh, ow)),
            _ => Err(TensorError::Shape(format!(
                "input {x} too small for kernel {} dilation {} padding {}",
                self.kernel, self.dilation, self.padding
            ))),
        }
    }

    /// Signed input offset of tap `t` along one axis.
    #[inline]
    fn offset(&self, t: usize) -> isize {
        (t * self.dilation) as isize - self.padding as isize
    }
}

/// Output rows (or columns) `o` with `o + d` inside `[0, input)`.
#[inline]
fn valid_range(d: isize, input: usize, output: usize) -> Option<(usize, usize)> {
    let lo = (-d).max(0) as usize;
    let hi = (input as isize - d).min(output as isize);
    if hi <= lo as isize {
        None
    } else {
        Some((lo, hi as usize))
    }
}

pub(crate) fn check_conv_operands(x: &Tensor4, w: &Tensor4, bias: Option<&Tensor4>) -> Result<()> {
    let ws = w.shape();
    if ws.h != ws.w {
        return Err(TensorError::Config(format!("non-square kernel {ws}")));
    }
    if x.shape().c != ws.c {
        return Err(TensorError::Shape(format!(
            "conv input has {} channels, weight expects {}",
            x.shape().c,
            ws.c
        )));
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(TensorError::Shape(format!(
                "bias has {} entries, conv has {} output channels",
                b.numel(),
                ws.n
            )));
        }
    }
    Ok(())
}

pub(crate) fn conv2d_forward(x: &Tensor4, w: &Tensor4, bias: Option<&Tensor4>, g: ConvGeom) -> Result<Tensor4> {
    check_conv_operands(x, w, bias)?;
    let xs = x.shape();
    let ws = w.shape();
    let os = g.output_shape(xs, ws.n)?;
    let mut out = Tensor4::zeros(os);
    let k = g.kernel;
    let (xp, op) = (xs.plane(), os.plane());
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for n in 0..xs.n {
        for oc in 0..ws.n {
            let obase = (n * ws.n + oc) * op;
            let oplane = &mut od[obase..obase + op];
            if let Some(b) = bias {
                oplane.fill(b.data()[oc]);
            }
            for ic in 0..ws.c {
                let xbase = (n * xs.c + ic) * xp;
                let xplane = &xd[xbase..xbase + xp];
                for ky in 0..k {
                    let dy = g.offset(ky);
                    let Some((y0, y1)) = valid_range(dy, xs.h, os.h) else { continue };
                    for kx in 0..k {
                        let dx = g.offset(kx);
                        let Some((x0, x1)) = valid_range(dx, xs.w, os.w) else { continue };
                        let wv = wd[((oc * ws.c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy as isize + dy) as usize;
                            let orow = &mut oplane[oy * os.w + x0..oy * os.w + x1];
                            let ix0 = (x0 as isize + dx) as usize;
                            let irow = &xplane[iy * xs.w + ix0..iy * xs.w + ix0 + (x1 - x0)];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub(crate) fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    gout: &Tensor4,
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let xs = x.shape();
    let ws = w.shape();
    let os = gout.shape();
    let k = g.kernel;
    let (xp, op) = (xs.plane(), os.plane());
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    let mut gx = need_x.then(|| vec![0.0; xs.numel()]);
    let mut gw = need_w.then(|| vec![0.0; ws.numel()]);
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; ws.n];
        for n in 0..os.n {
            for (oc, slot) in gb.iter_mut().enumerate() {
                let base = (n * os.c + oc) * op;
                *slot += gd[base..base + op].iter().sum::<f64>();
            }
        }
        gb
    });
    if !(need_x || need_w) {
        return (gx, gw, gb);
    }
    for n in 0..xs.n {
        for oc in 0..ws.n {
            let gbase = (n * os.c + oc) * op;
            let gplane = &gd[gbase..gbase + op];
            for ic in 0..ws.c {
                let xbase = (n * xs.c + ic) * xp;
                for ky in 0..k {
                    let dy = g.offset(ky);
                    let Some((y0, y1)) = valid_range(dy, xs.h, os.h) else { continue };
                    for kx in 0..k {
                        let dx = g.offset(kx);
                        let Some((x0, x1)) = valid_range(dx, xs.w, os.w) else { continue };
                        let widx = ((oc * ws.c + ic) * k + ky) * k + kx;
                        let ix0 = (x0 as isize + dx) as usize;
                        let len = x1 - x0;
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = 0.0;
                            for oy in y0..y1 {
                                let iy = (oy as isize + dy) as usize;
                                let grow = &gplane[oy * os.w + x0..oy * os.w + x1];
                                let xrow = &xd[xbase + iy * xs.w + ix0..xbase + iy * xs.w + ix0 + len];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            gw[widx] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = wd[widx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in y0..y1 {
                                let iy = (oy as isize + dy) as usize;
                                let grow = &gplane[oy * os.w + x0..oy * os.w + x1];
                                let xrow = &mut gx[xbase + iy * xs.w + ix0..xbase + iy * xs.w + ix0 + len];
                                for (o, gv) in xrow.iter_mut().zip(grow) {
                                    *o += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel batch mean and biased variance over (n, h, w).
pub(crate) fn channel_moments(x: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        let mut acc = 0.0;
        for n in 0..s.n {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        let m = acc / count;
        let mut acc2 = 0.0;
        for n in 0..s.n {
            acc2 += x.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[c] = m;
        var[c] = acc2 / count;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel. Returns (y, xhat).
pub(crate) fn channel_affine_normalize(
    x: &Tensor4,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Tensor4, Vec<f64>) {
    let s = x.shape();
    let p = s.plane();
    let mut y = Tensor4::zeros(s);
    let mut xhat = vec![0.0; s.numel()];
    let xd = x.data();
    let yd = y.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * p;
            for i in base..base + p {
                let h = (xd[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                yd[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

pub(crate) fn check_bn_operands(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4) -> Result<()> {
    let c = x.shape().c;
    if gamma.numel() != c || beta.numel() != c {
        return Err(TensorError::Shape(format!(
            "batch norm over {c} channels given gamma/beta of {}/{} entries",
            gamma.numel(),
            beta.numel()
        )));
    }
    let s = x.shape();
    if s.n == 0 || s.plane() == 0 {
        return Err(TensorError::Config(format!("batch norm over empty batch or plane {s}")));
    }
    Ok(())
}

/// Sums per channel of `gy` and `gy * xhat`.
pub(crate) fn channel_grad_sums(gy: &[f64], xhat: &[f64], s: Shape) -> (Vec<f64>, Vec<f64>) {
    let p = s.plane();
    let mut sum_g = vec![0.0; s.c];
    let mut sum_gx = vec![0.0; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * p;
            for i in base..base + p {
                sum_g[c] += gy[i];
                sum_gx[c] += gy[i] * xhat[i];
            }
        }
    }
    (sum_g, sum_gx)
}

/// Input gradient of train-mode batch normalization.
pub(crate) fn bn_train_input_grad(
    gy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
    s: Shape,
) -> Vec<f64> {
    let (sum_g, sum_gx) = channel_grad_sums(gy, xhat, s);
    let count = (s.n * s.plane()) as f64;
    let p = s.plane();
    let mut gx = vec![0.0; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma[c] * inv_std[c] / count;
            let base = (n * s.c + c) * p;
            for i in base..base + p {
                gx[i] = scale * (count * gy[i] - sum_g[c] - xhat[i] * sum_gx[c]);
            }
        }
    }
    gx
}

/// Numerically stable per-pixel softmax over the channel axis.
pub(crate) fn softmax_channels(logits: &Tensor4) -> Tensor4 {
    let s = logits.shape();
    let p = s.plane();
    let mut probs = Tensor4::zeros(s);
    let ld = logits.data();
    let pd = probs.data_mut();
    for n in 0..s.n {
        for i in 0..p {
            let at = |c: usize| (n * s.c + c) * p + i;
            let max = (0..s.c).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (ld[at(c)] - max).exp();
                pd[at(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                pd[at(c)] /= z;
            }
        }
    }
    probs
}

/// Per-pixel `-log softmax(logits)[label]`, computed via log-sum-exp.
pub(crate) fn pixel_nll(logits: &Tensor4, n: usize, i: usize, label: usize) -> f64 {
    let s = logits.shape();
    let p = s.plane();
    let ld = logits.data();
    let at = |c: usize| (n * s.c + c) * p + i;
    let max = (0..s.c).map(|c| ld[at(c)]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + (0..s.c).map(|c| (ld[at(c)] - max).exp()).sum::<f64>().ln();
    lse - ld[at(label)]
}
