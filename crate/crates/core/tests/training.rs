use echodepth_core::fusion::FusionKind;
use echodepth_core::metrics::{compute_metrics, MetricsAccumulator, RelMode, DELTA_THRESHOLDS, MIN_PREDICTION};
use echodepth_core::model::{Batch, Modalities, Model, ModelKind};
use echodepth_core::nets::NetConfig;
use echodepth_core::params::Ctx;
use echodepth_core::scene::{render_sample, DatasetConfig, Profile, RenderedSample};
use echodepth_core::train::{evaluate, train, TrainConfig};
use echodepth_tensor::Tensor;
use proptest::prelude::*;

fn samples(n: u64) -> (DatasetConfig, Vec<RenderedSample>) {
    let cfg = DatasetConfig::for_profile(Profile::Matterport);
    let pulse = cfg.pulse().unwrap();
    let s = (0..n).map(|i| render_sample(100 + i, &cfg, &pulse).unwrap()).collect();
    (cfg, s)
}

fn net(cfg: &DatasetConfig) -> NetConfig {
    NetConfig::toy(32, cfg.spectro.shape())
}

struct Oracle {
    rmse: f64,
    rel: f64,
    log10: f64,
    delta: [f64; 3],
}

fn oracle_metrics(pred: &[f64], truth: &[f64]) -> Oracle {
    let mut n = 0.0;
    let (mut se, mut rel, mut lg) = (0.0, 0.0, 0.0);
    let mut hits = [0.0; 3];
    for (&p, &t) in pred.iter().zip(truth) {
        if t <= 0.0 {
            continue;
        }
        n += 1.0;
        se += (p - t).powi(2);
        let q = if p > 0.0 { p } else { 1e-3 };
        rel += (q - t).abs() / t;
        lg += (q.log10() - t.log10()).abs();
        let ratio = if q > t { q / t } else { t / q };
        for (h, thr) in hits.iter_mut().zip([1.25, 1.5625, 1.953125]) {
            if ratio < thr {
                *h += 1.0;
            }
        }
    }
    Oracle {
        rmse: (se / n).sqrt(),
        rel: rel / n,
        log10: lg / n,
        delta: hits.map(|h| h / n),
    }
}

#[test]
fn threshold_comparison_is_strict() {
    let r = compute_metrics(&[5.0], &[4.0]).unwrap();
    assert_eq!(r.delta1, 0.0);
    assert_eq!(r.delta2, 1.0);
    assert_eq!(DELTA_THRESHOLDS[1], 1.25 * 1.25);
}

#[test]
fn nonpositive_predictions_are_clamped_for_ratios() {
    let r = compute_metrics(&[0.0, -1.0], &[1.0, 1.0]).unwrap();
    assert_eq!(r.n_clamped, 2);
    assert!((r.log10 + MIN_PREDICTION.log10()).abs() < 1e-12);
    assert!((r.rmse - (2.5f64).sqrt()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_match_per_pixel_loop(
        pairs in prop::collection::vec((-1.0f64..12.0, prop_oneof![Just(0.0), 0.1f64..10.0]), 1..200)
    ) {
        prop_assume!(pairs.iter().any(|p| p.1 > 0.0));
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let got = compute_metrics(&pred, &truth).unwrap();
        let want = oracle_metrics(&pred, &truth);
        prop_assert!((got.rmse - want.rmse).abs() <= 1e-12);
        prop_assert!((got.rel - want.rel).abs() <= 1e-12);
        prop_assert!((got.log10 - want.log10).abs() <= 1e-12);
        prop_assert_eq!([got.delta1, got.delta2, got.delta3], want.delta);
        prop_assert!(got.delta1 <= got.delta2 && got.delta2 <= got.delta3);
    }

    #[test]
    fn sharded_accumulation_matches_single_pass(
        pred in prop::collection::vec(0.1f64..10.0, 2..60),
        cut in 1usize..59,
    ) {
        let truth: Vec<f64> = pred.iter().map(|p| p * 1.1 + 0.05).collect();
        let cut = cut.min(pred.len() - 1);
        let mut a = MetricsAccumulator::new(RelMode::Absolute);
        let mut b = MetricsAccumulator::new(RelMode::Absolute);
        a.add(&pred[..cut], &truth[..cut], None).unwrap();
        b.add(&pred[cut..], &truth[cut..], None).unwrap();
        a.merge(&b);
        let mut whole = MetricsAccumulator::new(RelMode::Absolute);
        for (p, t) in pred.iter().zip(&truth) {
            whole.add_pixel(*p, *t);
        }
        let (x, y) = (a.report().unwrap(), whole.report().unwrap());
        prop_assert_eq!(x.n_valid, y.n_valid);
        prop_assert!((x.rmse - y.rmse).abs() < 1e-12);
    }
}

#[test]
fn training_is_deterministic() {
    let (cfg, set) = samples(6);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        eval_val: true,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = Model::new(ModelKind::Fused(FusionKind::Bilinear), net(&cfg), 9).unwrap();
        let out = train(&mut m, &set, Some(&set[..2]), &tc, |_, _| Ok(())).unwrap();
        (m.store, out.records)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 4);
    assert!(ra.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn every_kind_trains_without_nan() {
    let (cfg, set) = samples(4);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 2,
        eval_val: false,
        ..TrainConfig::default()
    };
    for kind in [
        ModelKind::Fused(FusionKind::Dot),
        ModelKind::Fused(FusionKind::Concat),
        ModelKind::Subset(Modalities::ECHO),
        ModelKind::Subset(Modalities::IMG),
        ModelKind::Subset(Modalities::ECHO_MAT),
    ] {
        let mut m = Model::new(kind, net(&cfg), 1).unwrap();
        let out = train(&mut m, &set, None, &tc, |_, _| Ok(())).unwrap();
        assert_eq!(out.steps, 4);
        assert!(out.final_loss.is_finite());
        assert!(m.store.iter().all(|(_, p)| p.value.all_finite()));
        let ev = evaluate(&m, &set, RelMode::Absolute).unwrap();
        assert!(ev.report.rmse.is_finite());
    }
}

#[test]
fn parallel_evaluation_matches_serial_pass() {
    let (cfg, set) = samples(5);
    let m = Model::new(ModelKind::Fused(FusionKind::Bilinear), net(&cfg), 4).unwrap();
    let ev = evaluate(&m, &set, RelMode::Absolute).unwrap();
    let mut acc = MetricsAccumulator::new(RelMode::Absolute);
    for s in &set {
        let batch = Batch::from_samples(&[s]).unwrap();
        let mut ctx = Ctx::new(&m.store, false);
        let out = m.forward(&mut ctx, &batch).unwrap();
        let mut one = MetricsAccumulator::new(RelMode::Absolute);
        one.add(ctx.g.value(out.depth).data(), batch.depth.data(), Some(&batch.mask)).unwrap();
        acc.merge(&one);
    }
    assert_eq!(ev.report, acc.report().unwrap());
}

#[test]
fn dot_model_equals_identity_bilinear_model() {
    let (cfg, set) = samples(2);
    let mut nc = net(&cfg);
    nc.fusion_channels = 1;
    let mut bil = Model::new(ModelKind::Fused(FusionKind::Bilinear), nc.clone(), 3).unwrap();
    let mut dot = Model::new(ModelKind::Fused(FusionKind::Dot), nc.clone(), 3).unwrap();
    let n = nc.feature_dim;
    let eye = Tensor::from_fn(&[1, n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    for name in ["fusion.a_img", "fusion.a_mat"] {
        let id = bil.store.id(name).unwrap();
        *bil.store.value_mut(id) = eye.clone();
    }
    for name in ["fusion.b_img", "fusion.b_mat", "fusion.adapter.bias"] {
        let store = if name.contains("adapter") { &mut dot.store } else { &mut bil.store };
        let id = store.id(name).unwrap();
        *store.value_mut(id) = Tensor::zeros(&[if name.contains("adapter") { 2 } else { 1 }]);
    }
    let id = dot.store.id("fusion.adapter.weight").unwrap();
    *dot.store.value_mut(id) = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    for (name, p) in dot.store.iter().map(|(_, p)| (p.name.clone(), p)) {
        if !name.starts_with("fusion.") {
            assert_eq!(&p.value, bil.store.value(bil.store.id(&name).unwrap()), "{name}");
        }
    }
    let refs: Vec<&RenderedSample> = set.iter().collect();
    let batch = Batch::from_samples(&refs).unwrap();
    let depth = |m: &Model| {
        let mut ctx = Ctx::new(&m.store, false);
        let out = m.forward(&mut ctx, &batch).unwrap();
        ctx.g.value(out.depth).clone()
    };
    assert_eq!(depth(&bil), depth(&dot));
}
