mod common;

use featjnd::discrepancy::DiscrepancyConfig;
use featjnd::estimator::{self, Mode};
use featjnd::nn;
use featjnd::taskbench::TaskHead;
use featjnd::tensor::Tensor3;
use featjnd::training::{self, TrainCache, Trainer};

use common::*;

#[test]
fn zero_delta_gives_zero_loss_for_both_bundle_kinds() {
    for bundle in [small_cls(), small_pyramid()] {
        let disc = DiscrepancyConfig::new(bundle.task(), 4.0);
        for f in bundle.train_features.iter().take(4) {
            let zero: Vec<Tensor3> = f.iter().map(|l| Tensor3::zeros(l.shape())).collect();
            let align = bundle.head.align(f);
            let eval = |x: &[Tensor3]| Ok(bundle.head.outputs(x, &align));
            let t = training::featjnd_loss(f, &zero, eval, &disc, 200.0, Default::default()).unwrap();
            assert_eq!((t.loss, t.discrepancy, t.magnitude), (0.0, 0.0, 0.0));
        }
    }
}

#[test]
fn head_null_space_perturbation_costs_only_its_magnitude() {
    // Pooling then a linear layer ignores any perturbation whose spatial
    // mean is zero in every channel.
    let bundle = small_cls();
    let f = &bundle.train_features[0];
    let s = f[0].shape();
    let mut delta = Tensor3::zeros(s);
    for c in 0..s.channels {
        delta.set(c, 0, 0, 0.5 + c as f64);
        delta.set(c, s.height - 1, s.width - 1, -(0.5 + c as f64));
    }
    let disc = DiscrepancyConfig::new(bundle.task(), 4.0);
    let align = bundle.head.align(f);
    let eval = |x: &[Tensor3]| Ok(bundle.head.outputs(x, &align));
    let t = training::featjnd_loss(f, std::slice::from_ref(&delta), eval, &disc, 50.0, Default::default()).unwrap();
    assert!(t.discrepancy.abs() < 1e-12, "discrepancy {}", t.discrepancy);
    assert!((t.loss + delta.l2_norm()).abs() < 1e-9, "loss {} vs -|δ| {}", t.loss, -delta.l2_norm());
}

#[test]
fn loss_is_linear_in_lambda() {
    let bundle = small_cls();
    let f = &bundle.train_features[3];
    let mut rng = nn::rng(7, 0);
    let delta: Vec<Tensor3> = f
        .iter()
        .map(|l| Tensor3::from_vec(l.shape(), nn::normal_init(&mut rng, l.shape().len(), 0.5)).unwrap())
        .collect();
    let disc = DiscrepancyConfig::new(bundle.task(), 4.0);
    let align = bundle.head.align(f);
    let loss = |lambda: f64| {
        let eval = |x: &[Tensor3]| Ok(bundle.head.outputs(x, &align));
        training::featjnd_loss(f, &delta, eval, &disc, lambda, Default::default()).unwrap()
    };
    let (one, two) = (loss(30.0), loss(60.0));
    assert!(one.discrepancy > 0.0);
    let diff = two.loss - one.loss;
    assert!((diff - 30.0 * one.discrepancy).abs() <= 1e-9 * diff.abs().max(1.0));
}

#[test]
fn zero_epochs_return_the_initialization() {
    let bundle = small_cls();
    let est = small_estimator(&bundle);
    let cfg = quick_train(0);
    let (params, log) = training::train_loop(&bundle, &est, &cfg).unwrap();
    assert!(log.is_empty());
    assert_eq!(params, estimator::init_estimator(&est, cfg.seed).unwrap());
}

#[test]
fn training_is_deterministic_grows_delta_and_keeps_the_task_frozen() {
    let bundle = small_cls();
    let before = bundle.checksum();
    let est = small_estimator(&bundle);
    let cfg = quick_train(4);
    let (p1, log1) = training::train_loop(&bundle, &est, &cfg).unwrap();
    let (p2, log2) = training::train_loop(&bundle, &est, &cfg).unwrap();
    assert_eq!(log1, log2);
    assert_eq!(p1.checksum(), p2.checksum());
    assert_eq!(bundle.checksum(), before);

    let init = estimator::init_estimator(&est, cfg.seed).unwrap();
    let cache = TrainCache::new(&bundle);
    let all: Vec<usize> = (0..bundle.train.len()).collect();
    let at = |p| training::batch_loss_and_grad(p, &est, &bundle, &cache, &cfg, &all, Mode::Inference).unwrap().0;
    let (start, end) = (at(&init), at(&p1));
    assert!(end.magnitude > start.magnitude, "|δ| {} -> {}", start.magnitude, end.magnitude);
    // The discrepancy stays small relative to the magnitude it buys.
    assert!(cfg.lambda_t * end.discrepancy < end.magnitude, "D {} at |δ| {}", end.discrepancy, end.magnitude);
}

#[test]
fn steps_clip_gradients_and_never_touch_the_task() {
    let bundle = small_pyramid();
    let before = (bundle.backbone_checksum(), bundle.head_checksum());
    let est = small_estimator(&bundle);
    let mut cfg = quick_train(1);
    cfg.grad_clip_norm = 1e-3;
    let cache = TrainCache::new(&bundle);
    let mut trainer = Trainer::new(est, cfg).unwrap();
    for b in 0..3 {
        let batch: Vec<usize> = (b * 8..(b + 1) * 8).collect();
        let r = trainer.train_step(&bundle, &cache, &batch).unwrap();
        assert!(r.grad_norm > 1e-3);
        assert!((r.clip_scale * r.grad_norm - 1e-3).abs() < 1e-12);
        assert_eq!((bundle.backbone_checksum(), bundle.head_checksum()), before);
    }
}

#[test]
fn clip_arithmetic() {
    let mut g = vec![vec![3.0, 0.0], vec![4.0]];
    let (norm, scale) = nn::clip_grad_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((scale - 0.2).abs() < 1e-15);
    assert!((nn::grad_norm(&g) - 1.0).abs() < 1e-15);
}
