mod common;

use approx::assert_abs_diff_eq;
use cpr_core::features::{FeatureGrad, FeatureMap};
use cpr_core::geometry::{build_bag, build_negatives, MapExtent, Point, PointBag, SamplingRegion};
use cpr_core::refiner::{
    bag_forward, focal_term, loss_ann, loss_cpr, loss_mil, loss_neg, loss_var, sigmoid, variance_supervision,
    CprHead, CprLossConfig, Linear, LinearGrad, LossWeights, NegNormalization, ObjectLabel, VarReduction,
    VarTarget,
};
use proptest::prelude::*;
use rand::Rng;

fn label(id: u64, category: usize, x: f64, y: f64) -> ObjectLabel {
    ObjectLabel {
        object_id: id,
        category,
        annotated: Point::new(x, y),
    }
}

fn bag_of(points: Vec<Point>) -> PointBag {
    PointBag {
        object_id: 1,
        category: 0,
        points,
    }
}

#[test]
fn default_weights() {
    let w = LossWeights::default();
    assert_eq!((w.alpha_ann, w.alpha_neg, w.gamma), (0.5, 3.0, 2.0));
}

#[test]
fn focal_values() {
    assert!(focal_term(1.0, true, 2.0) < 1e-12);
    let half = 0.25 * std::f64::consts::LN_2;
    assert_abs_diff_eq!(focal_term(0.5, true, 2.0), half, epsilon = 1e-12);
    assert_abs_diff_eq!(half, 0.173287, epsilon = 1e-6);
    assert_abs_diff_eq!(focal_term(0.5, false, 2.0), half, epsilon = 1e-12);
    assert!(focal_term(0.0, true, 2.0).is_finite());
    assert!(focal_term(1.0, false, 2.0).is_finite());
}

#[test]
fn singleton_bag() {
    let mut rng = common::seeded(1);
    let f = common::random_map(&mut rng, 5, 5, 3);
    let head = common::random_head(&mut rng, 3, 2);
    let p = Point::new(2.3, 1.7);
    let s = bag_forward(&f, &bag_of(vec![p]), &head).unwrap();
    let cls = head.scores_at(&f, p).unwrap();
    for c in 0..2 {
        assert_abs_diff_eq!(s.ins_at(0)[c], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.bag[c], cls[c], epsilon = 1e-12);
    }
}

#[test]
fn equal_features_give_uniform_instance_weights() {
    let mut f = FeatureMap::zeros(4, 4, 2, 8);
    for (i, v) in f.data.iter_mut().enumerate() {
        *v = if i % 2 == 0 { 0.3 } else { -0.7 };
    }
    let mut rng = common::seeded(2);
    let head = common::random_head(&mut rng, 2, 3);
    let pts = vec![Point::new(0.0, 0.0), Point::new(1.5, 2.0), Point::new(3.0, 0.5), Point::new(2.0, 2.0)];
    let s = bag_forward(&f, &bag_of(pts), &head).unwrap();
    for p in 0..4 {
        for c in 0..3 {
            assert_abs_diff_eq!(s.ins_at(p)[c], 0.25, epsilon = 1e-12);
        }
    }
}

#[test]
fn five_point_bag_matches_reference() {
    let mut rng = common::seeded(3);
    let f = common::random_map(&mut rng, 6, 6, 4);
    let head = common::random_head(&mut rng, 4, 3);
    let pts: Vec<Point> = (0..5).map(|_| Point::new(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0))).collect();
    let s = bag_forward(&f, &bag_of(pts.clone()), &head).unwrap();
    let want = common::ref_bag_score(&f, &pts, &head);
    for c in 0..3 {
        assert_abs_diff_eq!(s.bag[c], want[c], epsilon = 1e-6);
        let over: f64 = (0..5).map(|p| s.over[p * 3 + c]).sum();
        assert_abs_diff_eq!(over, s.bag[c], epsilon = 1e-12);
    }
}

#[test]
fn instance_weights_sum_to_one() {
    common::check_softmax(500, 4).unwrap();
}

/// Features that make category 0 certain on the unit disc around (2, 2) and absent elsewhere.
fn separable_instance() -> (FeatureMap, CprHead, Vec<ObjectLabel>, Vec<SamplingRegion>) {
    let mut f = FeatureMap::zeros(5, 5, 1, 8);
    for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
        f.data[y * 5 + x] = 1.0;
    }
    let head = CprHead {
        cls: Linear {
            in_dim: 1,
            out_dim: 1,
            weight: vec![80.0],
            bias: vec![-40.0],
        },
        ins: Linear {
            in_dim: 1,
            out_dim: 1,
            weight: vec![1.0],
            bias: vec![0.0],
        },
    };
    let labels = vec![label(1, 0, 2.0, 2.0)];
    let regions = vec![SamplingRegion::new(1, 0, Point::new(2.0, 2.0), 1)];
    (f, head, labels, regions)
}

#[test]
fn separable_features_drive_the_loss_to_zero() {
    let (f, head, labels, regions) = separable_instance();
    let cfg = CprLossConfig {
        u0: 4,
        ..Default::default()
    };
    let terms = loss_cpr(&f, &labels, &regions, &head, &cfg, None).unwrap();
    assert!(terms.total < 1e-9, "{terms:?}");
}

#[test]
fn singleton_bag_on_the_annotation_equals_annotation_loss() {
    let mut rng = common::seeded(5);
    let f = common::random_map(&mut rng, 5, 5, 3);
    let head = common::random_head(&mut rng, 3, 2);
    let l = label(1, 1, 1.25, 3.5);
    let mut bag = bag_of(vec![l.annotated]);
    bag.category = 1;
    let mil = loss_mil(&f, &[bag], &head, 2.0, None).unwrap();
    let ann = loss_ann(&f, &[l], &head, 2.0, None).unwrap();
    assert_abs_diff_eq!(mil, ann, epsilon = 1e-12);
}

#[test]
fn small_instance_matches_reference() {
    // M = 2, K = 2, six-point bags
    let mut rng = common::seeded(6);
    let f = common::random_map(&mut rng, 8, 8, 3);
    let head = common::random_head(&mut rng, 3, 2);
    let labels = vec![label(1, 0, 2.0, 3.0), label(2, 1, 5.5, 4.0)];
    let regions: Vec<SamplingRegion> =
        labels.iter().map(|l| SamplingRegion::new(l.object_id, l.category, l.annotated, 1)).collect();
    let cfg = CprLossConfig {
        u0: 6,
        ..Default::default()
    };
    let bags: Vec<PointBag> = regions.iter().map(|r| build_bag(r, 6, f.extent()).unwrap()).collect();
    assert!(bags.iter().all(|b| b.points.len() == 6));
    let got = loss_cpr(&f, &labels, &regions, &head, &cfg, None).unwrap();
    let mil = common::ref_loss_mil(&f, &regions, &head, 6, 2.0);
    let ann = common::ref_loss_ann(&f, &labels, &head, 2.0);
    let neg = common::ref_loss_neg(&f, &regions, &head, 2.0, false);
    assert_abs_diff_eq!(got.mil, mil, epsilon = 1e-6);
    assert_abs_diff_eq!(got.ann, ann, epsilon = 1e-6);
    assert_abs_diff_eq!(got.neg, neg, epsilon = 1e-6);
    assert_abs_diff_eq!(got.total, mil + 0.5 * ann + 3.0 * neg, epsilon = 1e-6);
}

#[test]
fn per_point_negative_normalization() {
    let mut rng = common::seeded(7);
    let f = common::random_map(&mut rng, 6, 6, 2);
    let head = common::random_head(&mut rng, 2, 2);
    let (_, regions) = common::random_instance(&mut rng, f.extent(), 3, 2, 2);
    let negs: Vec<_> = (0..2).map(|c| build_negatives(c, &regions, f.extent())).collect();
    let count: usize = negs.iter().map(|n| n.points.len()).sum();
    let by_objects = loss_neg(&f, &negs, &head, 2.0, 3, NegNormalization::Objects, None).unwrap();
    let by_points = loss_neg(&f, &negs, &head, 2.0, 3, NegNormalization::Points, None).unwrap();
    assert_abs_diff_eq!(by_objects * 3.0, by_points * count as f64, epsilon = 1e-9);
}

#[test]
fn losses_match_second_implementation() {
    common::check_loss_oracles(200, 8).unwrap();
}

#[test]
fn variance_target_values() {
    let t = VarTarget {
        category: 0,
        center: Point::new(2.0, 1.0),
        sigma: 3.0,
    };
    let g = variance_supervision(&[t], 3, 6, 1);
    assert_abs_diff_eq!(g[6 + 2], 1.0, epsilon = 1e-15);
    // (5, 1) is exactly σ away
    assert_abs_diff_eq!(g[6 + 5], (-1.0f64).exp(), epsilon = 1e-12);
    assert_abs_diff_eq!((-1.0f64).exp(), 0.367879, epsilon = 1e-6);
}

#[test]
fn variance_target_takes_the_maximum() {
    let a = VarTarget {
        category: 1,
        center: Point::new(1.0, 1.0),
        sigma: 2.0,
    };
    let b = VarTarget {
        category: 1,
        center: Point::new(4.5, 2.0),
        sigma: 1.0,
    };
    let ga = variance_supervision(&[a], 4, 6, 2);
    let gb = variance_supervision(&[b], 4, 6, 2);
    let gab = variance_supervision(&[a, b], 4, 6, 2);
    for i in 0..gab.len() {
        assert_eq!(gab[i], ga[i].max(gb[i]));
        if i % 2 == 0 {
            assert_eq!(gab[i], 0.0);
        }
    }
}

#[test]
fn variance_loss_vanishes_on_matching_binary_targets() {
    let mut f = FeatureMap::zeros(3, 3, 1, 8);
    let mut target = vec![0.0; 9];
    for (i, t) in target.iter_mut().enumerate() {
        let on = i % 4 == 0;
        f.data[i] = if on { 1.0 } else { -1.0 };
        *t = if on { 1.0 } else { 0.0 };
    }
    let var = Linear {
        in_dim: 1,
        out_dim: 1,
        weight: vec![60.0],
        bias: vec![0.0],
    };
    // the 1e-6 score clamp leaves -ln(1 - 1e-6) per entry
    let floor = 9.0 * -(1.0f64 - 1e-6).ln();
    assert!(loss_var(&f, &var, &target, VarReduction::Sum, None) <= floor * (1.0 + 1e-6));
}

#[test]
fn uniform_half_scores_cost_ln2_per_entry() {
    let f = FeatureMap::zeros(4, 5, 3, 8);
    let var = Linear {
        in_dim: 3,
        out_dim: 2,
        weight: vec![0.7; 6],
        bias: vec![0.0; 2],
    };
    let mut rng = common::seeded(9);
    let target: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
    let sum = loss_var(&f, &var, &target, VarReduction::Sum, None);
    assert_abs_diff_eq!(sum, 40.0 * std::f64::consts::LN_2, epsilon = 1e-9);
    let mean = loss_var(&f, &var, &target, VarReduction::Mean, None);
    assert_abs_diff_eq!(mean, std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn variance_gradient_on_small_map() {
    // 4×4×2 map, K = 2: six weights and two biases
    let mut rng = common::seeded(10);
    let f = common::random_map(&mut rng, 4, 4, 2);
    let mut var = common::random_linear(&mut rng, 2, 2, 1.0);
    let targets = [
        VarTarget {
            category: 0,
            center: Point::new(1.2, 2.5),
            sigma: 2.0,
        },
        VarTarget {
            category: 1,
            center: Point::new(3.0, 0.5),
            sigma: 1.0,
        },
    ];
    let g = variance_supervision(&targets, 4, 4, 2);
    for red in [VarReduction::Sum, VarReduction::Mean] {
        let mut vg = LinearGrad::zeros_like(&var);
        let mut fg = FeatureGrad::zeros_like(&f);
        loss_var(&f, &var, &g, red, Some((&mut vg, &mut fg)));
        let analytic: Vec<f64> = vg.weight.iter().chain(&vg.bias).copied().collect();
        let mut params: Vec<f64> = var.weight.iter().chain(&var.bias).copied().collect();
        let err = common::fd_max_rel_error(&mut params, &analytic, 1e-5, 1e-6, |p| {
            var.weight.copy_from_slice(&p[..4]);
            var.bias.copy_from_slice(&p[4..]);
            loss_var(&f, &var, &g, red, None)
        });
        assert!(err < 1e-4, "{red:?}: {err}");
    }
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let rep = common::check_gradients(20, 11);
    assert!(rep.params.iter().all(|&n| n <= 50), "{:?}", rep.params);
    assert!(rep.cpr < 1e-3, "cpr {}", rep.cpr);
    assert!(rep.var < 1e-3, "var {}", rep.var);
    assert!(rep.localizer < 1e-3, "localizer {}", rep.localizer);
}

#[test]
fn feature_gradient_of_cpr_loss() {
    use cpr_core::refiner::{CprHeadGrad, HeadGradSink};
    let mut rng = common::seeded(12);
    let mut f = common::random_map(&mut rng, 5, 5, 2);
    let head = common::random_head(&mut rng, 2, 2);
    let (labels, regions) = common::random_instance(&mut rng, MapExtent::new(5, 5), 2, 2, 2);
    let cfg = CprLossConfig::default();
    let mut hg = CprHeadGrad::zeros_like(&head);
    let mut fg = FeatureGrad::zeros_like(&f);
    loss_cpr(&f, &labels, &regions, &head, &cfg, Some(&mut HeadGradSink { head: &mut hg, features: &mut fg })).unwrap();
    // f32 features: a wider step, checked in f64 accumulation
    let mut params: Vec<f64> = f.data.iter().map(|v| *v as f64).collect();
    let err = common::fd_max_rel_error(&mut params, &fg.data, 1e-2, 1e-3, |p| {
        for (d, v) in f.data.iter_mut().zip(p) {
            *d = *v as f32;
        }
        loss_cpr(&f, &labels, &regions, &head, &cfg, None).unwrap().total
    });
    assert!(err < 1e-2, "{err}");
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(seed in any::<u64>(), m in 1usize..4, k in 1usize..4) {
        let mut rng = common::seeded(seed);
        let f = common::random_map(&mut rng, 6, 7, 3);
        let mut head = common::random_head(&mut rng, 3, k);
        // occasionally saturate the scores
        if seed % 3 == 0 {
            head.cls.bias.iter_mut().for_each(|b| *b *= 200.0);
        }
        let (labels, regions) = common::random_instance(&mut rng, f.extent(), m, k, 3);
        let terms = loss_cpr(&f, &labels, &regions, &head, &CprLossConfig::default(), None).unwrap();
        for v in [terms.mil, terms.ann, terms.neg, terms.total] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
        let bag = build_bag(&regions[0], 8, f.extent()).unwrap();
        let s = bag_forward(&f, &bag, &head).unwrap();
        // rounding of saturated products may overshoot one by an ulp
        let unit = 0.0..=1.0 + 1e-12;
        for c in 0..k {
            prop_assert!(unit.contains(&s.bag[c]));
            for p in 0..s.len() {
                prop_assert!((0.0..=1.0).contains(&s.cls_at(p)[c]));
                prop_assert!((0.0..=1.0).contains(&s.over[p * k + c]));
            }
        }
        let var = common::random_linear(&mut rng, 3, k, 50.0);
        let targets: Vec<VarTarget> = labels.iter().map(|l| VarTarget { category: l.category, center: l.annotated, sigma: 1.0 }).collect();
        let g = variance_supervision(&targets, 6, 7, k);
        let lv = loss_var(&f, &var, &g, VarReduction::Sum, None);
        prop_assert!(lv.is_finite() && lv >= 0.0);
    }

    #[test]
    fn sigmoid_is_bounded(z in -1e3f64..1e3) {
        let s = sigmoid(z);
        prop_assert!((0.0..=1.0).contains(&s));
    }
}
