//! Property tests for the invariants each module promises.

use featjnd::attribution;
use featjnd::discrepancy::{self, DiscrepancyConfig, HeadOutputs, Matrix, TaskKind};
use featjnd::estimator::{self, EstimatorConfig, Mode};
use featjnd::evaluation;
use featjnd::feature::{decode_feature, encode_feature, load_feature, save_feature, FeaturePyramid, FeatureTensor};
use featjnd::metrics;
use featjnd::quantization::{self, TokenMap};
use featjnd::tensor::{Shape3, Tensor3};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = Shape3> {
    (1usize..5, 1usize..7, 1usize..7).prop_map(|(c, h, w)| Shape3::new(c, h, w))
}

fn feature(range: f32) -> impl Strategy<Value = FeatureTensor> {
    shape().prop_flat_map(move |s| {
        prop::collection::vec(-range..range, s.len()).prop_map(move |v| FeatureTensor::new(s, v).unwrap())
    })
}

fn feature_pair() -> impl Strategy<Value = (FeatureTensor, FeatureTensor)> {
    shape().prop_flat_map(|s| {
        (prop::collection::vec(-5.0f32..5.0, s.len()), prop::collection::vec(-5.0f32..5.0, s.len()))
            .prop_map(move |(a, b)| (FeatureTensor::new(s, a).unwrap(), FeatureTensor::new(s, b).unwrap()))
    })
}

fn tensor(s: Shape3, range: f64) -> impl Strategy<Value = Tensor3> {
    prop::collection::vec(-range..range, s.len()).prop_map(move |v| Tensor3::from_vec(s, v).unwrap())
}

fn nonzero(f: &FeatureTensor) -> bool {
    f.values().iter().any(|v| *v != 0.0)
}

fn scaled(f: &FeatureTensor, k: f32) -> FeatureTensor {
    FeatureTensor::new(f.shape(), f.values().iter().map(|v| v * k).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // feature_core

    #[test]
    fn files_round_trip_bit_exactly(t in feature(1e6)) {
        let back = decode_feature(&encode_feature(&t)).unwrap();
        prop_assert_eq!(&back, &t);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.fjnd");
        save_feature(&t, &p).unwrap();
        let loaded = load_feature(&p).unwrap();
        prop_assert!(loaded.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn l2_norm_scales_with_abs_alpha(t in feature(10.0), alpha in -8.0f32..8.0) {
        let n = t.l2_norm();
        let s = scaled(&t, alpha).l2_norm();
        // One f32 rounding per scaled element.
        prop_assert!((s - alpha.abs() as f64 * n).abs() <= 1e-6 * (alpha.abs() as f64 * n) + 1e-30);
    }

    #[test]
    fn pyramid_maps_keep_level_order_and_ids(levels in prop::collection::vec(feature(3.0), 1..4)) {
        let n = levels.len();
        let p = FeaturePyramid::with_default_ids(levels.clone(), 2).unwrap();
        let mapped = p.try_map(|l| Ok(scaled(l, 2.0))).unwrap();
        prop_assert_eq!(mapped.level_ids(), p.level_ids());
        for i in 0..n {
            prop_assert_eq!(&mapped.levels()[i], &scaled(&levels[i], 2.0));
        }
    }

    // metrics

    #[test]
    fn nrmse_identities(f in feature(5.0), k in -64i32..64) {
        prop_assume!(nonzero(&f));
        prop_assert_eq!(metrics::nrmse(&f, &f, metrics::DEFAULT_EPS).unwrap(), 0.0);
        // Power-of-two multiples of 1/8 keep γf exact.
        let gamma = k as f64 / 8.0;
        let g = FeatureTensor::new(f.shape(), f.values().iter().map(|v| (*v as f64 * gamma) as f32).collect()).unwrap();
        if g.values().iter().zip(f.values()).all(|(a, b)| *a as f64 == *b as f64 * gamma) {
            let r = metrics::nrmse(&f, &g, 0.0).unwrap();
            prop_assert!((r - (gamma - 1.0).abs()).abs() <= 1e-12 * (1.0 + r));
        }
    }

    #[test]
    fn nmse_is_nrmse_squared((f, g) in feature_pair()) {
        prop_assume!(nonzero(&f));
        let r = metrics::nrmse(&f, &g, 0.0).unwrap();
        let m = metrics::nmse(&f, &g, 0.0).unwrap();
        prop_assert!((m - r * r).abs() <= 1e-12 * m.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn cosine_ignores_positive_scale_but_nrmse_does_not((f, g) in feature_pair(), e in -3i32..4) {
        prop_assume!(nonzero(&f) && nonzero(&g));
        let k = 2f32.powi(e);
        let c = metrics::cosine(&f, &g).unwrap();
        prop_assert!((metrics::cosine(&f, &scaled(&g, k)).unwrap() - c).abs() < 1e-12);
        prop_assert!((metrics::cosine(&scaled(&f, k), &g).unwrap() - c).abs() < 1e-12);
        if e != 0 {
            let a = metrics::nrmse(&f, &g, 0.0).unwrap();
            let b = metrics::nrmse(&f, &scaled(&g, k), 0.0).unwrap();
            prop_assert!(a != b, "nrmse unchanged by scaling g by {}", k);
        }
    }

    // discrepancy

    #[test]
    fn kl_is_nonnegative_shift_invariant_and_zero_on_equal(
        y in prop::collection::vec(-6.0f64..6.0, 2..8),
        shift in -20.0f64..20.0,
        t in 0.5f64..6.0,
        seed in 0u64..1000,
    ) {
        let mut rng = featjnd::nn::rng(seed, 0);
        let yt: Vec<f64> = featjnd::nn::normal_init(&mut rng, y.len(), 3.0);
        let base = discrepancy::kl_temperature(&y, &yt, t).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert_eq!(discrepancy::kl_temperature(&y, &y, t).unwrap(), 0.0);
        let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let yts: Vec<f64> = yt.iter().map(|v| v + shift).collect();
        prop_assert!((discrepancy::kl_temperature(&ys, &yt, t).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
        prop_assert!((discrepancy::kl_temperature(&y, &yts, t).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn all_discrepancies_vanish_on_identical_outputs(data in prop::collection::vec(-4.0f64..4.0, 16 * 6), t in 0.5f64..5.0) {
        let m = |rows: usize, cols: usize, off: usize| Matrix::new(rows, cols, data[off..off + rows * cols].to_vec()).unwrap();
        let out = HeadOutputs {
            rpn_logits: Some(m(4, 2, 0)),
            rpn_reg: Some(m(4, 4, 8)),
            roi_logits: Some(m(3, 4, 24)),
            roi_reg: Some(m(3, 4, 36)),
            mask_logits: Some(m(3, 16, 48)),
            cls_logits: Some(m(1, 5, 0)),
        };
        for task in [TaskKind::Classification, TaskKind::Detection, TaskKind::InstanceSegmentation] {
            let cfg = DiscrepancyConfig::new(task, t);
            prop_assert_eq!(discrepancy::discrepancy(&out, &out, &cfg).unwrap(), 0.0);
            let mut other = out.clone();
            other.roi_reg.as_mut().unwrap().data[0] += 1.0;
            other.cls_logits.as_mut().unwrap().data[0] += 1.0;
            prop_assert!(discrepancy::discrepancy(&out, &other, &cfg).unwrap() >= 0.0);
        }
    }

    // estimator

    #[test]
    fn estimator_preserves_shape_clamps_and_is_deterministic(
        input in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| tensor(Shape3::new(3, h, w), 50.0)),
        seed in 0u64..100,
        bound in 0.05f64..2.0,
    ) {
        let cfg = EstimatorConfig { hidden_width: 6, num_residual_blocks: 1, clamp_bound: bound, ..EstimatorConfig::new(3) };
        let mut params = estimator::init_estimator(&cfg, seed).unwrap();
        // Enlarge the projection so the clamp is exercised.
        let proj = params.set.tensors.len() - 2;
        params.set.get_mut(proj).iter_mut().for_each(|v| *v *= 400.0);
        let (a, _) = estimator::forward_batch(&params, &cfg, std::slice::from_ref(&input), Mode::Inference).unwrap();
        let (b, _) = estimator::forward_batch(&params, &cfg, std::slice::from_ref(&input), Mode::Inference).unwrap();
        prop_assert_eq!(a[0].shape(), input.shape());
        prop_assert!(a[0].data().iter().all(|v| v.abs() <= bound));
        prop_assert!(a[0].data().iter().zip(b[0].data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // quantization

    #[test]
    fn quantizer_error_is_bounded_and_idempotent(x in -1e4f64..1e4, e in -4.0f64..2.0) {
        let step = 10f64.powf(e);
        let q = quantization::quantize_value(x, step);
        prop_assert!((x - q).abs() <= step / 2.0 + f64::EPSILON * x.abs().max(q.abs()));
        prop_assert_eq!(quantization::quantize_value(q, step), q);
    }

    #[test]
    fn tensor_quantization_is_idempotent(f in tensor(Shape3::new(2, 3, 4), 20.0), steps in prop::collection::vec(1e-3f64..3.0, 12)) {
        let s = TokenMap::new(3, 4, steps).unwrap();
        let q = quantization::quantize(&f, &s).unwrap();
        prop_assert_eq!(&quantization::quantize(&q, &s).unwrap(), &q);
        for c in 0..2 {
            for t in 0..12 {
                let (a, b) = (f.plane(c)[t], q.plane(c)[t]);
                prop_assert!((a - b).abs() <= s.values[t] / 2.0 + f64::EPSILON * a.abs().max(b.abs()));
            }
        }
    }

    #[test]
    fn budgets_are_exact_and_permutation_invariant(
        values in prop::collection::vec(prop_oneof![Just(0.0f64), 1e-4f64..50.0], 1..80),
        sigma in 1e-3f64..10.0,
        seed in 0u64..1000,
    ) {
        let n = values.len();
        let s = TokenMap::new(1, n, values).unwrap();
        let floor = quantization::relative_floor(&s, quantization::DEFAULT_FLOOR_FACTOR);
        prop_assume!(floor > 0.0);
        let steps = quantization::budget_steps(&s, sigma, floor).unwrap();
        prop_assert!(quantization::verify_budget(&steps, sigma, 1e-10));
        let perm = quantization::permute_baseline(&s, seed);
        let mut sorted_a = s.values.clone();
        let mut sorted_b = perm.values.clone();
        sorted_a.sort_by(f64::total_cmp);
        sorted_b.sort_by(f64::total_cmp);
        prop_assert_eq!(sorted_a, sorted_b);
        prop_assert_eq!(
            quantization::solve_lambda(&s, sigma, floor).unwrap(),
            quantization::solve_lambda(&perm, sigma, floor).unwrap()
        );
        let psteps = quantization::budget_steps(&perm, sigma, floor).unwrap();
        prop_assert_eq!(quantization::noise_budget(&psteps), quantization::noise_budget(&steps));
    }

    // attribution

    #[test]
    fn attribution_is_exact_on_linear_models(
        (w, x) in (tensor(Shape3::new(2, 3, 3), 3.0), tensor(Shape3::new(2, 3, 3), 3.0)),
        k in 1usize..60,
    ) {
        let a = attribution::integrated_attribution(|p: &Tensor3| Ok((w.dot(p)?, w.clone())), &x, k).unwrap();
        for ((av, wv), xv) in a.data().iter().zip(w.data()).zip(x.data()) {
            prop_assert!((av - wv * xv).abs() <= 1e-12 * (1.0 + (wv * xv).abs()));
        }
        let again = attribution::integrated_attribution(|p: &Tensor3| Ok((w.dot(p)?, w.clone())), &x, k).unwrap();
        prop_assert_eq!(a, again);
    }

    #[test]
    fn completeness_error_shrinks_with_more_steps((w, x) in (tensor(Shape3::new(1, 2, 3), 1.0), tensor(Shape3::new(1, 2, 3), 2.0))) {
        // h(x) = Σ tanh(w_i x_i) + (w·x)²
        let h = |p: &Tensor3| -> featjnd::Result<(f64, Tensor3)> {
            let d = w.dot(p)?;
            let v = p.data().iter().zip(w.data()).map(|(a, b)| (a * b).tanh()).sum::<f64>() + d * d;
            let g = p.zip_map(&w, |a, b| b * (1.0 - (a * b).tanh().powi(2)) + 2.0 * d * b)?;
            Ok((v, g))
        };
        let gap = h(&x).unwrap().0 - h(&x.scale(0.0)).unwrap().0;
        prop_assume!(gap.abs() > 1e-3);
        let err = |k| {
            let a = attribution::integrated_attribution(h, &x, k).unwrap();
            (a.data().iter().sum::<f64>() - gap).abs()
        };
        let (e10, e100, e1000) = (err(10), err(100), err(1000));
        prop_assert!(e100 <= e10 && e1000 <= e100, "{} {} {}", e10, e100, e1000);
    }
}

#[test]
fn kl_is_asymmetric_somewhere() {
    let mut rng = featjnd::nn::rng(3, 0);
    let found = (0..100).any(|_| {
        let y = featjnd::nn::normal_init(&mut rng, 4, 2.0);
        let yt = featjnd::nn::normal_init(&mut rng, 4, 2.0);
        let a = discrepancy::kl_temperature(&y, &yt, 2.0).unwrap();
        let b = discrepancy::kl_temperature(&yt, &y, 2.0).unwrap();
        (a - b).abs() > 1e-6
    });
    assert!(found);
}

#[test]
fn interpolation_stays_inside_each_curve() {
    let curve = [(0.1, 0.9), (0.5, 0.7), (1.0, 0.2)];
    assert_eq!(evaluation::interpolate(&curve, 0.05), None);
    assert_eq!(evaluation::interpolate(&curve, 1.01), None);
    assert!((evaluation::interpolate(&curve, 0.3).unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(evaluation::interpolate(&curve, 1.0), Some(0.2));
}
