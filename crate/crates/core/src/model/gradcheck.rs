//! Whole-model gradient check against central finite differences.

use super::params::Session;
use super::supernet::SuperNetModel;
use super::Result;
use crate::tensor::{relative_error, NormMode, Tensor4, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Coordinates checked per parameter block; 0 checks all of them.
    pub samples_per_block: usize,
    pub seed: u64,
    pub mode: NormMode,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            tol: 1e-4,
            samples_per_block: 0,
            seed: 0,
            mode: NormMode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates left out because their ±step probes switch some ReLU even
    /// at the smallest retried step; a central difference across a kink
    /// does not estimate the derivative.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockReport>,
    pub pass: bool,
}

/// Loss used for checking: the model output (logits if present, features
/// otherwise) contracted with fixed random weights.
fn loss_node(model: &SuperNetModel, s: &mut Session, x: Var, seed: u64) -> Result<Var> {
    let out = model.forward(s, x)?;
    let y = out.logits.unwrap_or(out.features);
    let w = Tensor4::uniform(s.tape.shape(y), -1.0, 1.0, seed ^ 0x9e37_79b9);
    Ok(s.tape.weighted_sum(y, &w)?)
}

/// Loss value and ReLU pattern at the given parameters and input.
fn probe_loss(model: &SuperNetModel, x: &Tensor4, cfg: &GradcheckConfig) -> Result<(f64, Vec<bool>)> {
    let mut s = Session::new(&model.params, cfg.mode);
    let xv = s.tape.constant(x.clone());
    let l = loss_node(model, &mut s, xv, cfg.seed)?;
    Ok((s.tape.value(l).item(), s.tape.relu_pattern()))
}

/// Candidate coordinates in check order. When sampling, draws a few spares
/// so that kinked coordinates can be replaced.
fn candidates(numel: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if samples == 0 || samples >= numel {
        return (0..numel).collect();
    }
    rand::seq::index::sample(rng, numel, (8 * samples).min(numel)).into_vec()
}

struct BlockCheck<'a> {
    cfg: &'a GradcheckConfig,
    base: &'a [bool],
}

impl BlockCheck<'_> {
    /// `perturb(i, delta)` evaluates the loss with coordinate `i` shifted by
    /// `delta`, leaving it restored afterwards.
    fn run(
        &self,
        name: String,
        analytic: &[f64],
        coords: Vec<usize>,
        mut perturb: impl FnMut(usize, f64) -> Result<(f64, Vec<bool>)>,
    ) -> Result<BlockReport> {
        let want = match self.cfg.samples_per_block {
            0 => usize::MAX,
            n => n,
        };
        let (mut checked, mut kinks, mut worst) = (0, 0, 0.0f64);
        'coords: for i in coords {
            if checked == want {
                break;
            }
            // Near a kink, shrink the step a few times before giving up.
            for shrink in [1.0, 0.25, 0.0625] {
                let h = self.cfg.step * shrink;
                let (up, pu) = perturb(i, h)?;
                let (down, pd) = perturb(i, -h)?;
                if pu == self.base && pd == self.base {
                    checked += 1;
                    worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
                    continue 'coords;
                }
            }
            kinks += 1;
        }
        Ok(BlockReport {
            name,
            checked,
            kinks,
            max_rel_err: worst,
            pass: worst < self.cfg.tol && (checked > 0 || analytic.is_empty()),
        })
    }
}

/// Compares analytic gradients of every trainable block and of the input
/// with central differences. Coordinates whose probes cross a ReLU kink are
/// skipped and counted. `corrupt_relu` scales the ReLU backward rule in the
/// analytic pass only, as a negative control.
pub fn gradcheck_model(
    model: &SuperNetModel,
    x: &Tensor4,
    cfg: &GradcheckConfig,
    corrupt_relu: Option<f64>,
) -> Result<GradcheckReport> {
    let mut s = Session::new(&model.params, cfg.mode);
    if let Some(f) = corrupt_relu {
        s.tape.corrupt_relu_backward(f);
    }
    let xv = s.tape.leaf(x.clone().with_requires_grad(true));
    let loss = loss_node(model, &mut s, xv, cfg.seed)?;
    s.tape.backward(loss)?;
    let base = s.tape.relu_pattern();
    let check = BlockCheck { cfg, base: &base };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut blocks = Vec::new();

    let grad_of = |v: Var, numel: usize| s.tape.grad(v).map_or_else(|| vec![0.0; numel], |g| g.to_vec());
    let gx = grad_of(xv, x.numel());
    let mut xp = x.clone();
    let coords = candidates(x.numel(), cfg.samples_per_block, &mut rng);
    blocks.push(check.run("input".into(), &gx, coords, |i, d| {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + d;
        let r = probe_loss(model, &xp, cfg);
        xp.data_mut()[i] = orig;
        r
    })?);

    let mut probe = model.clone();
    for id in model.params.trainable_ids() {
        let numel = model.params.get(id).numel();
        let g = grad_of(s.param(id), numel);
        let coords = candidates(numel, cfg.samples_per_block, &mut rng);
        let name = model.params.entry(id).name.clone();
        blocks.push(check.run(name, &g, coords, |i, d| {
            let orig = model.params.get(id).data()[i];
            probe.params.get_mut(id).data_mut()[i] = orig + d;
            let r = probe_loss(&probe, x, cfg);
            probe.params.get_mut(id).data_mut()[i] = orig;
            r
        })?);
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradcheckReport { blocks, pass })
}
