//! SGD with momentum and weight decay, plus the finite-difference oracle.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One in-place update: `v = momentum*v + grad + wd*theta; theta -= lr*v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], cfg: SgdConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((theta, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *theta;
        *theta -= cfg.lr * *v;
    }
}

/// Central-difference estimate of the gradient of `f` at `theta`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + step;
            let plus = f(&probe);
            probe[i] = theta[i] - step;
            let minus = f(&probe);
            probe[i] = theta[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Floor on the denominator of [`relative_error`], so that coordinates whose
/// true gradient is (numerically) zero are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_linear() {
        let g = finite_diff_grad(|t| 5.0 * t[0] - 2.0, &[0.25], 1e-3);
        assert!((g[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn plain_descent() {
        let mut theta = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut theta, &[0.5, -1.0], &mut v, cfg);
        assert_eq!(theta, vec![1.0 - 0.1 * 0.5, -2.0 + 0.1]);
        let before = theta.clone();
        sgd_step(&mut theta, &[0.0, 0.0], &mut vec![0.0; 2], cfg);
        assert_eq!(theta, before);
    }

    #[test]
    fn two_steps_match_scalar_recursion() {
        let cfg = SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        };
        let mut theta = vec![0.7];
        let mut v = vec![0.0];
        let grads = [0.3, -0.2];
        for g in grads {
            sgd_step(&mut theta, &[g], &mut v, cfg);
        }
        let (mut t, mut vel) = (0.7f64, 0.0f64);
        for g in grads {
            vel = 0.9 * vel + g + 0.0005 * t;
            t -= 0.01 * vel;
        }
        assert_eq!(theta[0], t);
        assert_eq!(v[0], vel);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
