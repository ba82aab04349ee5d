//! Poly LR, OHEM loss, mIoU and the toy training loop.

use super::data::{gen_synthetic_dataset, SyntheticDataset};
use super::params::Session;
use super::supernet::SuperNetModel;
use super::{ModelError, Result};
use crate::tensor::{ops, sgd_step, NormMode, SgdConfig, Tape, Tensor4, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const IGNORE_INDEX: i64 = -1;

fn default_num_classes() -> usize {
    4
}
fn default_train_images() -> usize {
    64
}
fn default_val_images() -> usize {
    16
}
fn default_eval_every() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub ohem_threshold: f64,
    pub ohem_min_keep: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_train_images")]
    pub train_images: usize,
    #[serde(default = "default_val_images")]
    pub val_images: usize,
    /// Held-out evaluation period in iterations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop at the first evaluation reaching this held-out mIoU.
    #[serde(default)]
    pub stop_miou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            power: 0.9,
            max_iter: 2000,
            weight_decay: 0.0005,
            momentum: 0.9,
            ohem_threshold: 0.7,
            ohem_min_keep: 64,
            batch: 2,
            crop: 16,
            seed: 0,
            num_classes: default_num_classes(),
            train_images: default_train_images(),
            val_images: default_val_images(),
            eval_every: default_eval_every(),
            stop_miou: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold < 1.0) {
            return fail(format!("ohem_threshold must be in (0, 1), got {}", self.ohem_threshold));
        }
        if !(self.power > 0.0) {
            return fail(format!("power must be positive, got {}", self.power));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return fail("base_lr > 0, weight_decay >= 0 and momentum in [0, 1) required".into());
        }
        if self.max_iter == 0 || self.batch == 0 || self.eval_every == 0 {
            return fail("max_iter, batch and eval_every must be positive".into());
        }
        if self.train_images == 0 || self.val_images == 0 {
            return fail("train_images and val_images must be positive".into());
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter/max_iter)^power`, clamped to 0 past the end.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> f64 {
    let t = iter.min(cfg.max_iter) as f64 / cfg.max_iter as f64;
    cfg.base_lr * (1.0 - t).powf(cfg.power)
}

/// Indices of the pixels OHEM trains on: every labeled pixel with true-class
/// probability below `threshold`, topped up with the next hardest pixels
/// until `min_keep` (or every labeled pixel) is reached. Ties are broken by
/// pixel index. Returned in ascending index order.
pub fn ohem_select(true_prob: &[f64], labels: &[i64], ignore_index: i64, threshold: f64, min_keep: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != ignore_index).collect();
    ranked.sort_by(|&a, &b| true_prob[a].total_cmp(&true_prob[b]).then(a.cmp(&b)));
    let hard = ranked.iter().take_while(|&&i| true_prob[i] < threshold).count();
    let keep = hard.max(min_keep.min(ranked.len()));
    let mut selected = ranked[..keep].to_vec();
    selected.sort_unstable();
    selected
}

#[derive(Clone, Debug)]
pub struct OhemOutput {
    pub loss: Var,
    pub selected: Vec<usize>,
    pub labeled: usize,
    /// No labeled pixels: the loss is 0.
    pub no_labels: bool,
}

/// Mean cross-entropy over the OHEM-selected pixels. Selection is a hard
/// choice and does not carry gradient.
pub fn ohem_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[i64],
    threshold: f64,
    min_keep: usize,
) -> Result<OhemOutput> {
    let summary = ops::softmax_cross_entropy(tape.value(logits), labels, IGNORE_INDEX)?;
    let selected = ohem_select(summary.true_prob.data(), labels, IGNORE_INDEX, threshold, min_keep);
    let labeled = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    let mut masked = vec![IGNORE_INDEX; labels.len()];
    for &i in &selected {
        masked[i] = labels[i];
    }
    let (loss, out) = tape.softmax_cross_entropy(logits, &masked, IGNORE_INDEX)?;
    Ok(OhemOutput {
        loss,
        selected,
        labeled,
        no_labels: out.all_ignored,
    })
}

/// Per-pixel arg-max over channels, lowest class on ties.
pub fn argmax_channels(logits: &Tensor4) -> Vec<i64> {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for i in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if logits.data()[(n * s.c + c) * plane + i] > logits.data()[(n * s.c + best) * plane + i] {
                    best = c;
                }
            }
            out.push(best as i64);
        }
    }
    out
}

/// Mean IoU over classes that occur in the prediction or the ground truth;
/// pixels labeled [`IGNORE_INDEX`] are skipped. Returns 0 if no class occurs.
pub fn miou(pred: &[i64], labels: &[i64], num_classes: usize) -> f64 {
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if l == IGNORE_INDEX {
            continue;
        }
        let (p, l) = (p as usize, l as usize);
        if p == l {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[l] += 1;
        }
    }
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Held-out mIoU with eval-mode batch norm, accumulated over the whole set.
pub fn evaluate(model: &SuperNetModel, data: &SyntheticDataset) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for i in 0..data.len() {
        let (x, l) = data.batch(&[i]);
        let out = model.infer(&x, NormMode::Eval)?;
        let logits = out
            .logits
            .ok_or_else(|| ModelError::Config("model has no classifier".into()))?;
        pred.extend(argmax_channels(&logits));
        gt.extend(l);
    }
    Ok(miou(&pred, &gt, data.num_classes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    pub final_miou: f64,
}

/// Seed used for the held-out split, distinct from the training split.
pub fn val_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_7e57
}

/// SGD with momentum and weight decay on OHEM loss over synthetic data.
/// Every iteration is recorded; held-out mIoU is attached every
/// `eval_every` iterations and at the last one.
pub fn train_toy(model: &mut SuperNetModel, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if model.config.num_classes != Some(cfg.num_classes) {
        return Err(ModelError::Config(format!(
            "model classifier has {:?} classes, config asks for {}",
            model.config.num_classes, cfg.num_classes
        )));
    }
    let train = gen_synthetic_dataset(cfg.seed, cfg.train_images, cfg.crop, cfg.num_classes)?;
    let val = gen_synthetic_dataset(val_seed(cfg.seed), cfg.val_images, cfg.crop, cfg.num_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut velocity = vec![0.0; model.params.trainable_count() as usize];
    let mut history = Vec::with_capacity(cfg.max_iter);
    let mut final_miou = 0.0;
    for iter in 0..cfg.max_iter {
        let lr = poly_lr(cfg, iter);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train.len())).collect();
        let (x, labels) = train.batch(&idx);
        let mut s = Session::new(&model.params, NormMode::Train);
        let xv = s.tape.constant(x);
        let out = model.forward(&mut s, xv)?;
        let logits = out.logits.expect("classifier checked above");
        let ohem = ohem_loss(&mut s.tape, logits, &labels, cfg.ohem_threshold, cfg.ohem_min_keep)?;
        let loss = s.tape.value(ohem.loss).item();
        if !loss.is_finite() {
            return Err(ModelError::Divergence { iter, loss });
        }
        s.tape.backward(ohem.loss)?;
        let grads = s.flat_grads(&model.params);
        s.apply_running_stats(&mut model.params);
        let mut theta = model.params.flatten_trainable();
        sgd_step(
            &mut theta,
            &grads,
            &mut velocity,
            SgdConfig {
                lr,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            },
        );
        model.params.set_trainable_from_flat(&theta)?;
        let last = iter + 1 == cfg.max_iter;
        let mut record = MetricRecord {
            iter,
            lr,
            loss,
            miou: None,
        };
        let mut stop = false;
        if (iter + 1) % cfg.eval_every == 0 || last {
            final_miou = evaluate(model, &val)?;
            record.miou = Some(final_miou);
            log::info!("iter {iter}: lr {lr:.6} loss {loss:.5} held-out mIoU {final_miou:.4}");
            stop = cfg.stop_miou.is_some_and(|t| final_miou >= t);
        }
        history.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainReport { history, final_miou })
}

/// Mean loss per consecutive window of `window` iterations (a trailing
/// partial window is dropped).
pub fn windowed_loss(history: &[MetricRecord], window: usize) -> Vec<f64> {
    history
        .chunks_exact(window)
        .map(|w| w.iter().map(|r| r.loss).sum::<f64>() / window as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    #[test]
    fn poly_lr_values() {
        let cfg = TrainConfig::default();
        assert_eq!(poly_lr(&cfg, 0), 0.01);
        assert_eq!(poly_lr(&cfg, cfg.max_iter), 0.0);
        let half = 0.01 * 0.5f64.powf(0.9);
        assert!((poly_lr(&cfg, 1000) - half).abs() < 1e-15);
        assert_eq!(poly_lr(&cfg, 5000), 0.0);
    }

    #[test]
    fn ohem_confident_pixels_top_up() {
        let p = [0.99, 0.995, 0.991, 0.999, 0.992, 0.993];
        let labels = [0; 6];
        assert_eq!(ohem_select(&p, &labels, IGNORE_INDEX, 0.7, 4), vec![0, 2, 4, 5]);
    }

    #[test]
    fn ohem_all_hard_equals_plain_ce() {
        let logits = Tensor4::from_fn([1, 3, 2, 2], |_, c, y, x| 0.1 * (c + y + x) as f64);
        let labels = vec![0, 1, 2, 0];
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone());
        let out = ohem_loss(&mut tape, l, &labels, 0.7, 1).unwrap();
        assert_eq!(out.selected, vec![0, 1, 2, 3]);
        let plain = ops::softmax_cross_entropy(&logits, &labels, IGNORE_INDEX).unwrap();
        assert_eq!(tape.value(out.loss).item(), plain.loss);
    }

    #[test]
    fn ohem_never_selects_ignored_and_handles_empty() {
        let p = [0.1, 0.2, 0.3];
        assert_eq!(ohem_select(&p, &[IGNORE_INDEX, 1, IGNORE_INDEX], IGNORE_INDEX, 0.7, 5), vec![1]);
        let mut tape = Tape::new();
        let l = tape.constant(Tensor4::zeros([1, 2, 1, 2]));
        let out = ohem_loss(&mut tape, l, &[IGNORE_INDEX; 2], 0.7, 1).unwrap();
        assert!(out.no_labels);
        assert_eq!(tape.value(out.loss).item(), 0.0);
    }

    #[test]
    fn ohem_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor4::from_fn([1, 3, 3, 3], |_, _, _, _| rng.random_range(-2.0..2.0));
        let labels: Vec<i64> = (0..9).map(|i| (i % 3) as i64).collect();
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone().with_requires_grad(true));
        let out = ohem_loss(&mut tape, l, &labels, 0.5, 3).unwrap();
        tape.backward(out.loss).unwrap();
        let analytic = tape.grad(l).unwrap().to_vec();
        let selected = out.selected.clone();
        let numeric = finite_diff_grad(
            |theta| {
                let t = Tensor4::from_vec([1, 3, 3, 3], theta.to_vec()).unwrap();
                let mut masked = vec![IGNORE_INDEX; 9];
                for &i in &selected {
                    masked[i] = labels[i];
                }
                ops::softmax_cross_entropy(&t, &masked, IGNORE_INDEX).unwrap().loss
            },
            logits.data(),
            1e-5,
        );
        for (a, b) in analytic.iter().zip(&numeric) {
            assert!(relative_error(*a, *b) < 1e-6);
        }
    }

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[0, 1, 1, 0], &[0, 1, 1, 0], 2), 1.0);
        assert_eq!(miou(&[1, 1, 0, 0], &[0, 0, 1, 1], 2), 0.0);
        // Confusion: class 0 → I 1, U 3; class 1 → I 1, U 3.
        assert!((miou(&[0, 0, 1, 1], &[0, 1, 0, 1], 2) - (1.0 / 3.0)).abs() < 1e-15);
        // Class 0: pred {0,1,2}, gt {0,1} → I 2, U 3. Class 1: pred {3}, gt {2,3} → I 1, U 2.
        assert!((miou(&[0, 0, 0, 1], &[0, 0, 1, 1], 2) - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        // Absent classes do not count; ignored pixels are skipped.
        assert_eq!(miou(&[0, 2], &[0, IGNORE_INDEX], 4), 1.0);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let t = Tensor4::from_vec([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
        let t = Tensor4::from_vec([1, 2, 1, 1], vec![2.0, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ohem_threshold = 1.0;
        assert!(cfg.validate().is_err());
        cfg.ohem_threshold = 0.7;
        cfg.power = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn windowed_loss_means() {
        let h: Vec<MetricRecord> = (0..5)
            .map(|i| MetricRecord {
                iter: i,
                lr: 0.0,
                loss: i as f64,
                miou: None,
            })
            .collect();
        assert_eq!(windowed_loss(&h, 2), vec![0.5, 2.5]);
    }
}
