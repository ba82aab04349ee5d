use gpsnet::model::{
    read_trained_checkpoint, train_toy, write_trained_checkpoint, ModelConfig, SuperNetModel, TrainConfig,
};
use gpsnet::netspec::{Builtin, ChannelProfile, GraphSpec};
use gpsnet::rf::{enumerate_samples, render::render_graph, rf_sr_gps};
use gpsnet::tensor::{NormMode, Tensor4};

#[test]
fn spec_json_round_trip_preserves_analysis() {
    for b in Builtin::ALL {
        let g = b.build(ChannelProfile::Reference).unwrap();
        let back = GraphSpec::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let (x, y) = (rf_sr_gps(&g).unwrap(), rf_sr_gps(&back).unwrap());
        assert_eq!((x.rf_side, x.sample_count), (y.rf_side, y.sample_count), "{b}");
    }
}

#[test]
fn desk_and_reference_profiles_sample_the_same_positions() {
    for b in Builtin::ALL {
        let r = enumerate_samples(&b.build(ChannelProfile::Reference).unwrap()).unwrap();
        let d = enumerate_samples(&b.build(ChannelProfile::Desk { in_ch: 3 }).unwrap()).unwrap();
        assert_eq!(r.branch_union(), d.branch_union(), "{b}");
    }
}

#[test]
fn render_union_matches_enumeration() {
    let g = Builtin::GpsUntuned.build(ChannelProfile::Reference).unwrap();
    let files = render_graph(&g).unwrap();
    let csv = &files.iter().find(|(n, _)| n == "union.csv").unwrap().1;
    let rows = csv.lines().count() - 1;
    assert_eq!(rows, enumerate_samples(&g).unwrap().branch_union().len());
}

#[test]
fn short_training_is_deterministic_and_checkpoints_exactly() {
    let cfg = TrainConfig {
        max_iter: 6,
        batch: 2,
        crop: 10,
        ohem_min_keep: 32,
        train_images: 6,
        val_images: 2,
        eval_every: 3,
        seed: 4,
        ..Default::default()
    };
    let build = || {
        let g = Builtin::GpsTuned.build(ChannelProfile::Desk { in_ch: 3 }).unwrap();
        SuperNetModel::new(g, ModelConfig { head_ch: 8, num_classes: Some(4) }, cfg.seed).unwrap()
    };
    let (mut a, mut b) = (build(), build());
    let ra = train_toy(&mut a, &cfg).unwrap();
    let rb = train_toy(&mut b, &cfg).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.history.len(), 6);
    assert!(ra.history.iter().all(|r| r.loss.is_finite()));
    assert_eq!(ra.history.iter().filter(|r| r.miou.is_some()).count(), 2);

    let mut buf = Vec::new();
    write_trained_checkpoint(&a, Some(&cfg), &mut buf).unwrap();
    let (restored, stored) = read_trained_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(stored, Some(cfg));
    let x = Tensor4::uniform([1, 3, 10, 10], 0.0, 1.0, 1);
    assert_eq!(
        restored.infer(&x, NormMode::Eval).unwrap().logits,
        a.infer(&x, NormMode::Eval).unwrap().logits
    );
}
