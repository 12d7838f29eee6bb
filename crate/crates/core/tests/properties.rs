use std::collections::BTreeMap;

use artiscope::autograd::{Graph, Tensor};
use artiscope::compositor::{composite, synthesize_sample, ClassBlend, CompositeSpec, Pattern, PatternBank};
use artiscope::config::RunConfig;
use artiscope::data::{ClassTable, Image, Mask, Origin, Sample};
use artiscope::metrics::{auroc, evaluate_predictions, f1_max, EvalRecord};
use artiscope::model::Model;
use artiscope::prompt::AnchorSet;
use artiscope::scoring::{pixel_targets, score_values, segmentation_loss, total_loss, LossConfig};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, v: &[f64]) -> Image {
    Image(Array3::from_shape_fn((h, w, 3), |(y, x, c)| v[(y * w + x) * 3 + c]))
}

prop_compose! {
    fn composite_case()(h in 1usize..10, w in 1usize..10)
        (clean in prop::collection::vec(0.0..=1.0f64, h * w * 3),
         pattern in prop::collection::vec(0.0..=1.0f64, h * w * 3),
         mask in prop::collection::vec(any::<bool>(), h * w),
         h in Just(h), w in Just(w))
        -> (Image, Image, Mask) {
        (image(h, w, &clean), image(h, w, &pattern), Mask::from_fn(h, w, |y, x| mask[y * w + x]))
    }
}

fn normalized(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    let mut t = Tensor::from_shape_vec((rows, cols), v.to_vec()).unwrap();
    for mut r in t.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-9);
        r /= n;
    }
    t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_is_identity_outside_the_mask((clean, pattern, mask) in composite_case(), phi in 0.01..0.99f64) {
        let out = composite(&CompositeSpec { clean: &clean, pattern: &pattern, mask: &mask, phi }).unwrap();
        for ((y, x, c), v) in out.0.indexed_iter() {
            if !mask.get(y, x) {
                prop_assert_eq!(v.to_bits(), clean.0[[y, x, c]].to_bits());
            }
        }
    }

    #[test]
    fn composite_moves_linearly_toward_the_pattern(
        (clean, pattern, mask) in composite_case(),
        a in 0.01..0.98f64,
        step in 0.001..0.5f64,
    ) {
        let b = (a + step).min(0.99);
        let lo = composite(&CompositeSpec { clean: &clean, pattern: &pattern, mask: &mask, phi: a }).unwrap();
        let hi = composite(&CompositeSpec { clean: &clean, pattern: &pattern, mask: &mask, phi: b }).unwrap();
        for ((y, x, c), &v) in hi.0.indexed_iter() {
            if mask.get(y, x) {
                let (ig, n) = (clean.0[[y, x, c]], pattern.0[[y, x, c]]);
                prop_assert!((v - lo.0[[y, x, c]] - (b - a) * (n - ig)).abs() < 1e-12);
                prop_assert!((n - v).abs() <= (n - lo.0[[y, x, c]]).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn repeated_compositing_stays_between_clean_and_pattern(
        (clean, pattern, mask) in composite_case(),
        p1 in 0.01..0.99f64,
        p2 in 0.01..0.99f64,
    ) {
        let once = composite(&CompositeSpec { clean: &clean, pattern: &pattern, mask: &mask, phi: p1 }).unwrap();
        let twice = composite(&CompositeSpec { clean: &once, pattern: &pattern, mask: &mask, phi: p2 }).unwrap();
        for ((y, x, c), &v) in twice.0.indexed_iter() {
            let (ig, n) = (clean.0[[y, x, c]], pattern.0[[y, x, c]]);
            prop_assert!(v >= ig.min(n) - 1e-12 && v <= ig.max(n) + 1e-12);
        }
    }

    #[test]
    fn synthesis_is_deterministic_per_seed(seed in any::<u64>()) {
        let clean = Sample {
            id: "c".into(),
            image: Image::from_fn(24, 24, |y, x, c| ((y + 2 * x + c) % 7) as f64 / 7.0),
            mask: Mask::empty(24, 24),
            class_id: 0,
            origin: Origin::Clean,
            image_path: String::new(),
            mask_path: None,
            object: None,
        };
        let pattern = Image::from_fn(8, 8, |y, x, _| if (3..6).contains(&y) && (2..7).contains(&x) { 0.9 } else { 0.0 });
        let bank = PatternBank::new(
            vec![Pattern { image: pattern, class_id: 2 }],
            BTreeMap::from([(2, ClassBlend::flare())]),
        ).unwrap();
        let anchor = Mask::from_fn(24, 24, |y, x| (8..14).contains(&y) && (10..16).contains(&x));
        let a = synthesize_sample(&clean, &bank, 2, &anchor, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = synthesize_sample(&clean, &bank, 2, &anchor, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.sample, b.sample);
        prop_assert_eq!(a.phi.to_bits(), b.phi.to_bits());
        prop_assert!((0.6..=0.95).contains(&a.phi));
    }

    #[test]
    fn anchor_permutation_permutes_class_probabilities(
        raw in prop::collection::vec(-1.0..1.0f64, 4 * 6),
        feat in prop::collection::vec(-1.0..1.0f64, 6 * 5),
        shift in 1usize..4,
    ) {
        let anchors = normalized(4, 6, &raw);
        let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
        let permuted = Tensor::from_shape_fn((4, 6), |(i, j)| anchors[[perm[i], j]]);
        let f_image = &feat[..6];
        let f_mg = normalized(4, 6, &feat[6..]);
        let p = score_values(f_image, &f_mg, &AnchorSet::new(anchors), 0.5, (2, 2), (4, 4)).unwrap();
        let q = score_values(f_image, &f_mg, &AnchorSet::new(permuted), 0.5, (2, 2), (4, 4)).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((q.class_probs[i] - p.class_probs[src]).abs() < 1e-12);
            for r in 0..16 {
                prop_assert!((q.pixel_probs[[r, i]] - p.pixel_probs[[r, src]]).abs() < 1e-12);
            }
        }
        prop_assert_eq!(perm[q.predicted_class()], p.predicted_class());
    }

    #[test]
    fn scaling_features_keeps_the_predicted_class(
        raw in prop::collection::vec(-1.0..1.0f64, 3 * 5),
        feat in prop::collection::vec(-1.0..1.0f64, 5),
        scale in 0.01..100.0f64,
    ) {
        let anchors = AnchorSet::new(normalized(3, 5, &raw));
        let mg = normalized(1, 5, &feat);
        let scaled: Vec<f64> = feat.iter().map(|v| v * scale).collect();
        let p = score_values(&feat, &mg, &anchors, 1.0, (1, 1), (1, 1)).unwrap();
        let q = score_values(&scaled, &mg, &anchors, 1.0, (1, 1), (1, 1)).unwrap();
        prop_assert_eq!(p.predicted_class(), q.predicted_class());
    }

    #[test]
    fn segmentation_losses_are_non_negative(
        probs in prop::collection::vec(0.001..1.0f64, 9 * 3),
        cells in prop::collection::vec(any::<bool>(), 9),
        class_id in 1usize..3,
    ) {
        let p = normalized(9, 3, &probs).mapv(|v| v * v);
        let mask = Mask::from_fn(3, 3, |y, x| cells[y * 3 + x]);
        let targets = pixel_targets(&mask, class_id, 3).unwrap();
        let mut g = Graph::new();
        let v = g.input(p);
        let (dice, focal) = segmentation_loss(&mut g, v, &targets, &LossConfig::default()).unwrap();
        prop_assert!(g.value(dice)[[0, 0]] >= -1e-12);
        prop_assert!(g.value(focal)[[0, 0]] >= 0.0);

        let mut g = Graph::new();
        let v = g.input(targets.clone());
        let (dice, focal) = segmentation_loss(&mut g, v, &targets, &LossConfig::default()).unwrap();
        prop_assert!(g.value(dice)[[0, 0]].abs() < 1e-12);
        prop_assert_eq!(g.value(focal)[[0, 0]], 0.0);
    }

    #[test]
    fn total_is_the_weighted_sum(cls in 0.0..10.0f64, dice in 0.0..1.0f64, focal in 0.0..5.0f64, lambda in 0.0..10.0f64) {
        let b = total_loss(cls, dice, focal, lambda);
        prop_assert!((b.total - (lambda * cls + dice + focal)).abs() <= 1e-9);
    }

    #[test]
    fn auroc_ignores_increasing_transforms(
        scores in prop::collection::vec(0.0..1.0f64, 2..40),
        seed in any::<u64>(),
    ) {
        let labels: Vec<bool> = scores.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&warped, &labels).unwrap());
    }

    #[test]
    fn f1_max_dominates_every_threshold(
        scores in prop::collection::vec(0.0..1.0f64, 2..40),
        seed in any::<u64>(),
        t in 0.0..1.0f64,
    ) {
        let labels: Vec<bool> = scores.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
        prop_assume!(labels.iter().any(|l| *l));
        let tp = scores.iter().zip(&labels).filter(|(s, l)| **s >= t && **l).count() as f64;
        let fp = scores.iter().zip(&labels).filter(|(s, l)| **s >= t && !**l).count() as f64;
        let pos = labels.iter().filter(|l| **l).count() as f64;
        let f1 = 2.0 * tp / (tp + fp + pos);
        prop_assert!(f1_max(&scores, &labels).unwrap().0 >= f1 - 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere(
        labels in prop::collection::vec(0usize..4, 8),
        cells in prop::collection::vec(any::<bool>(), 8 * 16),
    ) {
        let mut labels = labels;
        labels[..4].copy_from_slice(&[0, 1, 2, 3]);
        let records: Vec<EvalRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut mask = Array2::from_shape_fn((4, 4), |(y, x)| k != 0 && cells[i * 16 + y * 4 + x]);
                if k != 0 && !mask.iter().any(|v| *v) {
                    mask[[1, 1]] = true;
                }
                let mut probs = vec![0.0; 4];
                probs[k] = 1.0;
                EvalRecord { class_id: k, class_probs: probs, anomaly_map: mask.mapv(|m| if m { 1.0 } else { 0.0 }), mask }
            })
            .collect();
        let report = evaluate_predictions(&records, &ClassTable::default(), 0.3).unwrap();
        let row = &report.aggregate;
        for v in [row.c_auroc, row.c_ap, row.c_f1, row.s_auroc, row.s_ap, row.s_f1, row.s_aupro] {
            prop_assert_eq!(v, Some(1.0), "{:?}", row);
        }
    }
}

#[test]
fn anchor_encoding_is_pure_and_ordered() {
    let model = Model::from_config(&RunConfig::toy()).unwrap();
    let a = model.encode_anchors().unwrap();
    let b = model.encode_anchors().unwrap();
    assert_eq!(a.anchors, b.anchors);
    assert_eq!(a.anchors.nrows(), model.classes.len());
    for i in 0..a.anchors.nrows() {
        for j in 0..i {
            assert_ne!(a.anchors.row(i), a.anchors.row(j));
        }
    }
}
