use colonnet::dataset::{
    augment, flip_horizontal, flip_vertical, load_dataset, rotate90, split_dataset, AugmentationConfig, BoundingBox,
    ImageSample, Label,
};
use colonnet::losses::{focal_tversky_loss, tversky_index, FocalTverskyConfig};
use colonnet::metrics::{box_iou, classification_metrics, dice_coefficient, mask_iou};
use colonnet::synthgen::{generate, write_dataset, SynthConfig};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_strategy() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0u8..2, h * w), prop::collection::vec(0u8..2, h * w)).prop_map(move |(a, b)| {
            (Array2::from_shape_vec((h, w), a).unwrap(), Array2::from_shape_vec((h, w), b).unwrap())
        })
    })
}

fn probs_and_truth() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(0u8..2, n)))
        .prop_map(|(p, y)| (p, y.into_iter().map(f64::from).collect()))
}

fn unit_box() -> impl Strategy<Value = BoundingBox> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, b, c, d)| BoundingBox::from_unordered(a, b, c, d))
}

/// One bleeding synthetic sample at 32 px, chosen by seed.
fn bleeding_sample(seed: u64) -> ImageSample {
    let cfg = SynthConfig { image_size: 32, ..SynthConfig::new(2, seed) };
    generate(&cfg).unwrap().into_iter().find(|s| s.label.is_bleeding()).unwrap()
}

fn tight(s: &ImageSample) -> bool {
    s.bbox == s.mask.as_ref().and_then(BoundingBox::from_mask)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_iou_identity((a, b) in mask_strategy()) {
        let d = dice_coefficient(&a, &b).unwrap();
        let j = mask_iou(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert_eq!(d, dice_coefficient(&b, &a).unwrap());
        prop_assert_eq!(j, mask_iou(&b, &a).unwrap());
    }

    #[test]
    fn box_iou_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, box_iou(&b, &a));
        if a.area() > 0.0 {
            prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_sort_always_valid(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0, d in 0.0f64..=1.0) {
        let bb = BoundingBox::from_unordered(a, b, c, d);
        prop_assert!(bb.x_min <= bb.x_max && bb.y_min <= bb.y_max);
        prop_assert_eq!(bb, BoundingBox::from_unordered(c, d, a, b));
    }

    #[test]
    fn classification_metrics_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let (p, t): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let m = classification_metrics(&p, &t).unwrap();
        for v in [m.accuracy, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn ftl_bounded_and_permutation_invariant((p, y) in probs_and_truth(), rot in 0usize..40) {
        let cfg = FocalTverskyConfig::default();
        let l = focal_tversky_loss(&p, &y, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        let k = rot % p.len();
        let (mut p2, mut y2) = (p.clone(), y.clone());
        p2.rotate_left(k);
        y2.rotate_left(k);
        p2.reverse();
        y2.reverse();
        prop_assert!((focal_tversky_loss(&p2, &y2, &cfg).unwrap() - l).abs() <= 1e-12);
        prop_assert!(focal_tversky_loss(&y, &y, &cfg).unwrap() <= 1e-6);
    }

    #[test]
    fn ftl_monotone_in_each_pixel((p, y) in probs_and_truth(), i in 0usize..40, step in 0.0f64..=1.0) {
        let cfg = FocalTverskyConfig::default();
        let i = i % p.len();
        let mut up = p.clone();
        up[i] = (p[i] + step * (1.0 - p[i])).min(1.0);
        let before = focal_tversky_loss(&p, &y, &cfg).unwrap();
        let after = focal_tversky_loss(&up, &y, &cfg).unwrap();
        if y[i] == 1.0 {
            prop_assert!(after <= before + 1e-12, "raising a positive pixel raised the loss");
        } else {
            prop_assert!(after >= before - 1e-12, "raising a negative pixel lowered the loss");
        }
        let ti = tversky_index(&p, &y, &cfg).unwrap();
        prop_assert!(ti > 0.0 && ti <= 1.0 + 1e-12);
    }

    #[test]
    fn flips_are_involutions(seed in 0u64..10_000) {
        let s = bleeding_sample(seed);
        prop_assert_eq!(&flip_horizontal(&flip_horizontal(&s)), &s);
        prop_assert_eq!(&flip_vertical(&flip_vertical(&s)), &s);
        let half = rotate90(&s, 2).unwrap();
        prop_assert_eq!(&rotate90(&half, 2).unwrap(), &s);
        prop_assert_eq!(&rotate90(&s, 4).unwrap(), &s);
    }

    #[test]
    fn transforms_keep_box_tight(seed in 0u64..10_000, k in 0u32..4) {
        let s = bleeding_sample(seed);
        prop_assert!(tight(&s));
        prop_assert!(tight(&flip_horizontal(&s)));
        prop_assert!(tight(&flip_vertical(&s)));
        prop_assert!(tight(&rotate90(&s, k).unwrap()));
    }

    #[test]
    fn augment_keeps_label_and_tightness(seed in 0u64..10_000, draw in any::<u64>()) {
        let s = bleeding_sample(seed);
        let cfg = AugmentationConfig { target_size: 32, ..AugmentationConfig::default() };
        let a = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(draw)).unwrap();
        prop_assert_eq!(a.label, Label::Bleeding);
        prop_assert!(tight(&a));
        let pixels = |x: &ImageSample| x.mask.as_ref().map(|m| m.iter().filter(|&&v| v != 0).count());
        prop_assert_eq!(pixels(&a), pixels(&s));
    }

    #[test]
    fn split_is_a_partition(n in 2usize..60, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let samples = generate(&SynthConfig { image_size: 32, ..SynthConfig::new(n, 1) }).unwrap();
        let (train, val) = split_dataset(samples.clone(), fraction, seed).unwrap();
        prop_assert_eq!(train.len() + val.len(), n);
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut ids: Vec<_> = train.iter().chain(&val).map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        let (train2, _) = split_dataset(samples, fraction, seed).unwrap();
        prop_assert_eq!(train, train2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synth_round_trip(seed in any::<u64>(), n in 2usize..12) {
        let cfg = SynthConfig { image_size: 48, ..SynthConfig::new(n, seed) };
        let samples = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let mut loaded = load_dataset(dir.path()).unwrap();
        loaded.sort_by(|a, b| a.id.cmp(&b.id));
        prop_assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(&loaded) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.label, b.label);
            prop_assert_eq!(&a.mask, &b.mask);
            match (a.bbox, b.bbox) {
                (Some(x), Some(y)) => {
                    for (u, v) in x.to_array().iter().zip(y.to_array()) {
                        prop_assert!((u - v).abs() <= 1.0 / 48.0);
                    }
                }
                (x, y) => prop_assert_eq!(x, y),
            }
            let max_px = a.image.iter().zip(&b.image).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
            prop_assert!(max_px <= 0.5 / 255.0 + 1e-6);
        }
    }
}
