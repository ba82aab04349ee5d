//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance`; pass criterion numbers after
//! `--` to run a subset.

use gpsnet::model::{
    count_graph_params, gate_forward, gradcheck_model, ohem_loss, ohem_select, CountPolicy, GateModule,
    GradcheckConfig, ModelConfig, ParamSet, Session, SuperNetModel, IGNORE_INDEX,
};
use gpsnet::netspec::{
    build_aspp, build_denseaspp, build_serial, build_supernet, Builtin, ChannelProfile, GraphSpec, SqueezeMode,
    SuperNetConfig,
};
use gpsnet::rf::{
    enumerate_samples, longest_path_side, reference_report, rf_sr_aspp, rf_sr_gps, rf_sr_serial, Offset,
};
use gpsnet::tensor::{finite_diff_grad, ops, relative_error, NormMode, Tape, Tensor4};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

const ASPP_SR_TOL: f64 = 0.0005;
const DENSEASPP_SR_TOL: f64 = 0.002;
const SUPERNET_SR_TOL: f64 = 0.005;
const SUPERNET_ENUM_LIMIT: Duration = Duration::from_secs(60);
const TUNED_SIDE_RANGE: (u64, u64) = (165, 301);
const GATE_OVERHEAD_LIMIT: f64 = 0.01;
const GRAD_TOL: f64 = 1e-4;
const GATE_IDENTITY_TOL: f64 = 1e-12;
const MIOU_TARGET: f64 = 0.9;
const TRAIN_ITER_LIMIT: usize = 2000;
const TRAIN_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reference(b: Builtin) -> GraphSpec {
    b.build(ChannelProfile::Reference).expect("builtin")
}

fn weights_only(g: &GraphSpec) -> u64 {
    count_graph_params(g, CountPolicy::WEIGHTS_ONLY).expect("count").total
}

fn c1_aspp() -> Check {
    let g = reference(Builtin::Aspp);
    let r = rf_sr_gps(&g).map_err(|e| e.to_string())?;
    let params = weights_only(&g);
    let detail = format!(
        "rf_side {} sr {:.5} (33/5329 = {:.5}) params {params}",
        r.rf_side,
        r.sr,
        33.0 / 5329.0
    );
    ensure(
        r.rf_side == 73
            && r.sample_count == 33
            && r.sr == 33.0 / 5329.0
            && (r.sr - 0.006).abs() <= ASPP_SR_TOL
            && params == 18_874_368,
        detail,
    )
}

fn c2_denseaspp() -> Check {
    let g = reference(Builtin::DenseAspp);
    let r = rf_sr_gps(&g).map_err(|e| e.to_string())?;
    let path = longest_path_side(&g).map_err(|e| e.to_string())?;
    ensure(
        r.rf_side == 147 && path == 147 && (r.sr - 0.070).abs() <= DENSEASPP_SR_TOL,
        format!("rf_side {} (longest path {path}) sr {:.5}", r.rf_side, r.sr),
    )
}

fn c3_supernet() -> Check {
    let mut parts = Vec::new();
    let mut ok = true;
    for b in [Builtin::SupernetUntuned, Builtin::GpsUntuned] {
        let g = reference(b);
        let t = Instant::now();
        let r = rf_sr_gps(&g).map_err(|e| e.to_string())?;
        let took = t.elapsed();
        ok &= r.rf_side == 219 && (r.sr - 0.125).abs() <= SUPERNET_SR_TOL && took < SUPERNET_ENUM_LIMIT;
        parts.push(format!("{b}: rf_side {} sr {:.5} in {:.2?}", r.rf_side, r.sr, took));
    }
    ensure(ok, parts.join("; "))
}

fn c4_tuned() -> Check {
    let untuned = rf_sr_gps(&reference(Builtin::GpsUntuned)).map_err(|e| e.to_string())?;
    let tuned = rf_sr_gps(&reference(Builtin::GpsTuned)).map_err(|e| e.to_string())?;
    let report = reference_report().map_err(|e| e.to_string())?;
    let row = report
        .rows
        .iter()
        .find(|r| r.method == "gps-tuned")
        .ok_or("report has no gps-tuned row")?;
    let published = row.published.as_ref().ok_or("gps-tuned row lacks the published comparison")?;
    let text = report.to_text();
    let delta_printed = published.rf_side == 199
        && published.sr == 0.843
        && published.rf_side_delta == row.rf_side as i64 - 199
        && (published.sr_delta - (row.sr - 0.843)).abs() < 1e-12
        && text.lines().any(|l| l.starts_with("gps-tuned") && l.contains("199") && l.contains("0.843"));
    ensure(
        tuned.sr > untuned.sr
            && (TUNED_SIDE_RANGE.0..=TUNED_SIDE_RANGE.1).contains(&tuned.rf_side)
            && delta_printed,
        format!(
            "tuned sr {:.5} > untuned {:.5}; tuned rf_side {} in [{}, {}]; delta vs (199, 0.843) = ({:+}, {:+.5}) printed: {delta_printed}",
            tuned.sr,
            untuned.sr,
            tuned.rf_side,
            TUNED_SIDE_RANGE.0,
            TUNED_SIDE_RANGE.1,
            published.rf_side_delta,
            published.sr_delta
        ),
    )
}

fn c5_params() -> Check {
    let supernet = weights_only(&reference(Builtin::SupernetUntuned));
    let dense = weights_only(&reference(Builtin::DenseAspp));
    let aspp = weights_only(&reference(Builtin::Aspp));
    let gps = weights_only(&reference(Builtin::GpsUntuned));
    let overhead = (gps - supernet) as f64 / supernet as f64;
    ensure(
        supernet < dense && dense < aspp && overhead < GATE_OVERHEAD_LIMIT,
        format!(
            "supernet {supernet} < denseaspp {dense} < aspp {aspp}; gate overhead {} ({:.4}%)",
            gps - supernet,
            overhead * 100.0
        ),
    )
}

fn c6_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = Vec::new();
    for _ in 0..100 {
        let len = rng.random_range(1..=3);
        let chain: Vec<(u32, u32)> = (0..len).map(|_| (3, rng.random_range(1..=8))).collect();
        let closed = rf_sr_serial(&chain).map_err(|e| e.to_string())?;
        let e = enumerate_samples(&build_serial(&chain, 2).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if (closed.rf_side, closed.sample_count) != (e.exit_union.rf_side(), e.exit_union.len() as u64) {
            mismatches.push(format!("chain {chain:?}"));
        }
    }
    let pool: Vec<u32> = (1..=36).collect();
    for _ in 0..50 {
        let n = rng.random_range(1..=5);
        let rates: Vec<u32> = pool.choose_multiple(&mut rng, n).copied().collect();
        let closed = rf_sr_aspp(3, &rates).map_err(|e| e.to_string())?;
        let e = enumerate_samples(&build_aspp(&rates, 2, 2).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        if (closed.rf_side, closed.sample_count) != (e.exit_union.rf_side(), e.exit_union.len() as u64) {
            mismatches.push(format!("aspp {rates:?}"));
        }
    }
    ensure(
        mismatches.is_empty(),
        format!("100 serial chains + 50 ASPPs, {} mismatches {mismatches:?}", mismatches.len()),
    )
}

/// Random graph of the given family (serial, ASPP, DenseASPP, SuperNet)
/// with rf_side at most 31.
fn random_small_graph(rng: &mut ChaCha8Rng, family: usize) -> GraphSpec {
    loop {
        let g = match family % 4 {
            0 => {
                let len = rng.random_range(1..=3);
                let chain: Vec<(u32, u32)> = (0..len)
                    .map(|_| (if rng.random_bool(0.8) { 3 } else { 1 }, rng.random_range(1..=7)))
                    .collect();
                build_serial(&chain, 2)
            }
            1 => {
                let n = rng.random_range(1..=4);
                let rates: Vec<u32> = (1..=15).collect::<Vec<_>>().choose_multiple(rng, n).copied().collect();
                build_aspp(&rates, 2, 2)
            }
            2 => {
                let n = rng.random_range(2..=3);
                let rates: Vec<u32> = (0..n).map(|_| rng.random_range(1..=6)).collect();
                build_denseaspp(&rates, 2, 2)
            }
            _ => {
                let branches = rng.random_range(2..=3);
                build_supernet(&SuperNetConfig {
                    grid: (0..branches)
                        .map(|_| (rng.random_range(1..=5), rng.random_range(1..=5)))
                        .collect(),
                    in_ch: 2,
                    bottleneck_ch: 2,
                    out_ch: 2,
                    gated: rng.random_bool(0.5),
                    squeeze: if rng.random_bool(0.5) { SqueezeMode::PerBranch } else { SqueezeMode::Shared },
                })
            }
        }
        .expect("generated graph is valid");
        if longest_path_side(&g).expect("side") <= 31 {
            return g;
        }
    }
}

/// All-ones convolutions, zero biases, identity batch norm, unit gates.
fn impulse_model(g: GraphSpec) -> SuperNetModel {
    let mut m = SuperNetModel::new(g, ModelConfig { head_ch: 1, num_classes: None }, 0).expect("model");
    for e in m.params.iter_mut() {
        let fill = if e.name.ends_with(".weight") || e.name.ends_with(".gamma") || e.name.ends_with(".running_var") {
            1.0
        } else {
            0.0
        };
        e.tensor.data_mut().fill(fill);
    }
    m.set_unit_gates();
    m
}

fn c7_impulse() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut summary = Vec::new();
    let mut ok = true;
    for i in 0..10 {
        let g = random_small_graph(&mut rng, i);
        let name = g.name.clone();
        let expected = enumerate_samples(&g).map_err(|e| e.to_string())?.exit_union;
        let side = expected.rf_side() as usize;
        let radius = (side - 1) / 2;
        let size = 4 * radius + 1;
        let center = 2 * radius;
        let m = impulse_model(g);
        let mut x = Tensor4::zeros([1, m.in_ch(), size, size]);
        for c in 0..m.in_ch() {
            x.set(0, c, center, center, 1.0);
        }
        let y = m.infer(&x, NormMode::Eval).map_err(|e| e.to_string())?.features;
        let mut support = BTreeSet::new();
        for yy in 0..size {
            for xx in 0..size {
                if (0..y.shape().c).any(|c| y.at(0, c, yy, xx) > 0.0) {
                    // Output at p reads input p + o; the impulse sits at the center.
                    support.insert(Offset::new(center as i32 - xx as i32, center as i32 - yy as i32));
                }
            }
        }
        let want: BTreeSet<Offset> = expected.iter().collect();
        let same = support == want;
        ok &= same;
        summary.push(format!("{name}:{}{}", want.len(), if same { "" } else { "!" }));
    }
    ensure(ok, format!("support == enumeration for 10 graphs [{}]", summary.join(" ")))
}

fn gate_grad_error() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = ParamSet::default();
    let gate = GateModule::new(&mut params, "gate", 3, 3, &mut rng).map_err(|e| e.to_string())?;
    let xv = Tensor4::uniform([2, 3, 5, 5], -1.0, 1.0, 1);
    let xh = Tensor4::uniform([2, 3, 5, 5], -1.0, 1.0, 2);
    let w = Tensor4::uniform([2, 3, 5, 5], -1.0, 1.0, 3);
    let loss = |params: &ParamSet, xv: &Tensor4, xh: &Tensor4| -> f64 {
        let mut s = Session::new(params, NormMode::Train);
        let (a, b) = (s.tape.constant(xv.clone()), s.tape.constant(xh.clone()));
        let out = gate_forward(&mut s, params, &gate, a, b).expect("gate");
        let l = s.tape.weighted_sum(out.o, &w).expect("loss");
        s.tape.value(l).item()
    };
    let mut s = Session::new(&params, NormMode::Train);
    let a = s.tape.leaf(xv.clone().with_requires_grad(true));
    let b = s.tape.leaf(xh.clone().with_requires_grad(true));
    let out = gate_forward(&mut s, &params, &gate, a, b).map_err(|e| e.to_string())?;
    let l = s.tape.weighted_sum(out.o, &w).map_err(|e| e.to_string())?;
    s.tape.backward(l).map_err(|e| e.to_string())?;
    let analytic_p = s.flat_grads(&params);
    let theta = params.flatten_trainable();
    let numeric_p = finite_diff_grad(
        |t| {
            let mut p = params.clone();
            p.set_trainable_from_flat(t).expect("flat");
            loss(&p, &xv, &xh)
        },
        &theta,
        1e-6,
    );
    let numeric_v = finite_diff_grad(
        |t| loss(&params, &Tensor4::from_vec(xv.shape(), t.to_vec()).expect("shape"), &xh),
        xv.data(),
        1e-6,
    );
    let numeric_h = finite_diff_grad(
        |t| loss(&params, &xv, &Tensor4::from_vec(xh.shape(), t.to_vec()).expect("shape")),
        xh.data(),
        1e-6,
    );
    let pairs = analytic_p
        .iter()
        .zip(&numeric_p)
        .chain(s.tape.grad(a).expect("grad").iter().zip(&numeric_v))
        .chain(s.tape.grad(b).expect("grad").iter().zip(&numeric_h));
    Ok(pairs.map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max))
}

fn c8_gradients() -> Check {
    let gate_err = gate_grad_error()?;
    let g = build_supernet(&SuperNetConfig {
        grid: vec![(1, 2), (2, 3)],
        in_ch: 4,
        bottleneck_ch: 3,
        out_ch: 4,
        gated: true,
        squeeze: SqueezeMode::PerBranch,
    })
    .map_err(|e| e.to_string())?;
    let m = SuperNetModel::new(g, ModelConfig { head_ch: 4, num_classes: None }, 8).map_err(|e| e.to_string())?;
    let x = Tensor4::uniform([1, 4, 9, 9], -1.0, 1.0, 9);
    let cfg = GradcheckConfig {
        tol: GRAD_TOL,
        ..Default::default()
    };
    let r = gradcheck_model(&m, &x, &cfg, None).map_err(|e| e.to_string())?;
    let net_err = r.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    let checked: usize = r.blocks.iter().map(|b| b.checked).sum();
    let kinks: usize = r.blocks.iter().map(|b| b.kinks).sum();
    ensure(
        gate_err < GRAD_TOL && r.pass,
        format!(
            "gate module max rel err {gate_err:.2e}; 2-branch gated SuperNet max rel err {net_err:.2e} over {checked} coordinates in {} blocks ({kinks} skipped at ReLU kinks)",
            r.blocks.len()
        ),
    )
}

fn small_supernet(gated: bool) -> GraphSpec {
    build_supernet(&SuperNetConfig {
        grid: vec![(1, 2), (3, 3), (2, 5)],
        in_ch: 4,
        bottleneck_ch: 4,
        out_ch: 6,
        gated,
        squeeze: SqueezeMode::PerBranch,
    })
    .expect("graph")
}

fn c9_gate_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params = ParamSet::default();
    let gate = GateModule::new(&mut params, "gate", 4, 4, &mut rng).map_err(|e| e.to_string())?;
    let xv = Tensor4::uniform([2, 4, 6, 6], -2.0, 2.0, 4);
    let xh = Tensor4::uniform([2, 4, 6, 6], -2.0, 2.0, 5);
    let mut identity_err = 0.0f64;
    let mut min_mask = f64::INFINITY;
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut s = Session::new(&params, mode);
        let (a, b) = (s.tape.constant(xv.clone()), s.tape.constant(xh.clone()));
        let out = gate_forward(&mut s, &params, &gate, a, b).map_err(|e| e.to_string())?;
        let (mv, mh) = (s.tape.value(out.mask_v), s.tape.value(out.mask_h));
        let recomputed = ops::add(
            &ops::mul_channel_broadcast(&xv, mv).map_err(|e| e.to_string())?,
            &ops::mul_channel_broadcast(&xh, mh).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        identity_err = identity_err.max(recomputed.max_abs_diff(s.tape.value(out.o)));
        min_mask = mv.data().iter().chain(mh.data()).copied().fold(min_mask, f64::min);
    }

    let x = Tensor4::uniform([2, 4, 11, 11], -1.0, 1.0, 6);
    let mut gated = SuperNetModel::new(small_supernet(true), ModelConfig { head_ch: 5, num_classes: None }, 9)
        .map_err(|e| e.to_string())?;
    for (_, (v, h)) in gated.infer(&x, NormMode::Train).map_err(|e| e.to_string())?.masks {
        min_mask = v.data().iter().chain(h.data()).copied().fold(min_mask, f64::min);
    }
    let mut plain = SuperNetModel::new(small_supernet(false), ModelConfig { head_ch: 5, num_classes: None }, 9)
        .map_err(|e| e.to_string())?;
    let names: Vec<String> = plain.params.iter().map(|(_, e)| e.name.clone()).collect();
    for name in names {
        let src = gated.params.find(&name).ok_or(format!("gated model lacks `{name}`"))?;
        let dst = plain.params.find(&name).expect("listed");
        *plain.params.get_mut(dst) = gated.params.get(src).clone();
    }
    gated.set_unit_gates();
    let mut bitwise = true;
    for mode in [NormMode::Train, NormMode::Eval] {
        let a = gated.infer(&x, mode).map_err(|e| e.to_string())?.features;
        let b = plain.infer(&x, mode).map_err(|e| e.to_string())?.features;
        bitwise &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    }
    ensure(
        identity_err <= GATE_IDENTITY_TOL && min_mask >= 0.0 && bitwise,
        format!("|O - (Mv*Xv + Mh*Xh)| max {identity_err:.1e}; min mask {min_mask}; unit gates == sum merge bitwise: {bitwise}"),
    )
}

/// Brute-force OHEM oracle: rank every labeled pixel by (probability,
/// index) with pairwise comparisons and keep the lowest ranks.
fn ohem_oracle(p: &[f64], labels: &[i64], threshold: f64, min_keep: usize) -> Vec<usize> {
    let labeled: Vec<usize> = (0..p.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    let hard = labeled.iter().filter(|&&i| p[i] < threshold).count();
    let keep = hard.max(min_keep.min(labeled.len()));
    labeled
        .iter()
        .copied()
        .filter(|&i| {
            let rank = labeled.iter().filter(|&&j| p[j] < p[i] || (p[j] == p[i] && j < i)).count();
            rank < keep
        })
        .collect()
}

fn c10_ohem() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = 0;
    let mut trials = 0;
    for t in 0..300 {
        let n = rng.random_range(1..=120);
        let classes = rng.random_range(2..=5);
        let labels: Vec<i64> = (0..n)
            .map(|_| if rng.random_bool(0.2) { IGNORE_INDEX } else { rng.random_range(0..classes) as i64 })
            .collect();
        let threshold = rng.random_range(0.05..0.95);
        let min_keep = rng.random_range(0..=150);
        let probs: Vec<f64> = if t % 2 == 0 {
            // Coarse grid to force ties.
            (0..n).map(|_| rng.random_range(0..20) as f64 / 20.0).collect()
        } else {
            let logits = Tensor4::from_fn([1, classes, 1, n], |_, _, _, _| rng.random_range(-3.0..3.0));
            let mut tape = Tape::new();
            let l = tape.constant(logits.clone());
            let out = ohem_loss(&mut tape, l, &labels, threshold, min_keep).map_err(|e| e.to_string())?;
            let probs: Vec<f64> = (0..n)
                .map(|i| {
                    let z: Vec<f64> = (0..classes).map(|c| logits.at(0, c, 0, i)).collect();
                    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    let label = labels[i].max(0) as usize;
                    (z[label] - max).exp() / denom
                })
                .collect();
            trials += 1;
            if out.selected != ohem_oracle(&probs, &labels, threshold, min_keep) {
                failures += 1;
            }
            probs
        };
        let got = ohem_select(&probs, &labels, IGNORE_INDEX, threshold, min_keep);
        let labeled = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        trials += 1;
        if got != ohem_oracle(&probs, &labels, threshold, min_keep)
            || got.len() < min_keep.min(labeled)
            || got.iter().any(|&i| labels[i] == IGNORE_INDEX)
        {
            failures += 1;
        }
    }
    ensure(failures == 0, format!("{trials} random selections vs oracle, {failures} mismatches"))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_gpsnet")
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/train-toy.json")
}

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`gpsnet {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn c11_training() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    let config = shipped_config();
    let t = Instant::now();
    run_cli(&["train-toy", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])?;
    let took = t.elapsed();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let miou = summary["final_miou"].as_f64().ok_or("summary lacks final_miou")?;
    let iterations = summary["iterations"].as_u64().ok_or("summary lacks iterations")? as usize;
    let windows: Vec<f64> = summary["window_loss"]
        .as_array()
        .ok_or("summary lacks window_loss")?
        .iter()
        .filter_map(|v| v.as_f64())
        .collect();
    let monotone = windows.len() >= 2 && windows.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = windows.iter().map(|w| format!("{w:.4}")).collect();
    ensure(
        miou >= MIOU_TARGET && iterations <= TRAIN_ITER_LIMIT && monotone && took < TRAIN_TIME_LIMIT,
        format!(
            "held-out mIoU {miou:.4} after {iterations} iterations in {took:.0?}; 100-iteration window losses [{}] decreasing: {monotone}",
            shown.join(", ")
        ),
    )
}

fn read_tree(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.push((entry.file_name().to_string_lossy().into_owned(), bytes));
    }
    files.sort();
    Ok(files)
}

fn c12_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(shipped_config()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    config["head_ch"] = 16.into();
    config["train"]["max_iter"] = 30.into();
    config["train"]["eval_every"] = 10.into();
    let short = root.join("short.json");
    std::fs::write(&short, config.to_string()).map_err(|e| e.to_string())?;
    let short = short.to_str().unwrap().to_string();

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("analyze", vec!["analyze".into()]),
        ("analyze-json", vec!["analyze".into(), "--builtin".into(), "gps-tuned".into(), "--format".into(), "json".into()]),
        ("render-samples", vec!["render-samples".into(), "--builtin".into(), "gps-tuned".into()]),
        (
            "forward",
            ["forward", "--builtin", "gps-untuned", "--shape", "1,8,17,17", "--seed", "3"].map(String::from).to_vec(),
        ),
        (
            "gradcheck",
            ["gradcheck", "--builtin", "gps-untuned", "--shape", "1,4,9,9", "--seed", "3", "--samples", "1"]
                .map(String::from)
                .to_vec(),
        ),
        ("train-toy", vec!["train-toy".into(), "--config".into(), short]),
        ("gates-dump", vec!["gates-dump".into(), "--image".into(), "2".into()]),
    ];
    let mut outputs = Vec::new();
    for (name, args) in &commands {
        let mut runs = Vec::new();
        for run in 0..2 {
            let out = root.join(format!("{name}-{run}"));
            let mut full = args.clone();
            if *name == "gates-dump" {
                full.extend(["--checkpoint".into(), root.join(format!("train-toy-{run}/checkpoint.bin")).to_string_lossy().into_owned()]);
            }
            let stdout = if *name == "analyze-json" {
                let refs: Vec<&str> = full.iter().map(String::as_str).collect();
                run_cli(&refs)?
            } else {
                full.extend(["--out".into(), out.to_string_lossy().into_owned()]);
                let refs: Vec<&str> = full.iter().map(String::as_str).collect();
                run_cli(&refs)?
            };
            let mut files = if out.exists() { read_tree(&out)? } else { Vec::new() };
            files.push(("<stdout>".into(), stdout));
            runs.push(files);
        }
        let same = runs[0] == runs[1];
        outputs.push(format!("{name}:{}", if same { runs[0].len() - 1 } else { usize::MAX }));
        if !same {
            return Err(format!("`{name}` outputs differ between runs"));
        }
    }
    Ok(format!("two runs byte-identical for every command (files: {})", outputs.join(" ")))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "ASPP rf/sr/params", c1_aspp),
        (2, "DenseASPP rf/sr", c2_denseaspp),
        (3, "SuperNet / untuned GPS rf/sr", c3_supernet),
        (4, "tuned GPS substitute properties", c4_tuned),
        (5, "parameter ordering and gate overhead", c5_params),
        (6, "closed forms equal enumeration", c6_oracles),
        (7, "impulse response equals enumeration", c7_impulse),
        (8, "gradient suite", c8_gradients),
        (9, "gate identities", c9_gate_identities),
        (10, "OHEM selection oracle", c10_ohem),
        (11, "toy training", c11_training),
        (12, "CLI determinism", c12_determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {status} {name} [{:.1?}]: {detail}", t.elapsed());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
