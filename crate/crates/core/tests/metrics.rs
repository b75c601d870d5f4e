use hseg_core::metrics::{
    filter_evaluated_classes, flat_protocol_score, mpa_miou, ClassFilter, ConfusionAccumulator, ThresholdDirection,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IGNORE: u32 = 255;

fn random_maps(seed: u64, classes: u32, n: usize) -> (Vec<u32>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = (0..n).map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..classes) }).collect();
    let pred = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    (gt, pred)
}

/// Means computed straight from pixel pairs, skipping classes without gt.
fn brute_force(gt: &[u32], pred: &[u32], classes: u32) -> (f64, f64) {
    let (mut pa, mut iou, mut n) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let pairs = || gt.iter().zip(pred).filter(|(g, _)| **g != IGNORE);
        let gt_c = pairs().filter(|(g, _)| **g == c).count() as f64;
        if gt_c == 0.0 {
            continue;
        }
        let hit = pairs().filter(|(g, p)| **g == c && **p == c).count() as f64;
        let union = pairs().filter(|(g, p)| **g == c || **p == c).count() as f64;
        pa += hit / gt_c;
        iou += hit / union;
        n += 1.0;
    }
    (pa / n, iou / n)
}

proptest! {
    #[test]
    fn matrix_equals_direct_tally(seed in any::<u64>(), classes in 2u32..6) {
        let (gt, pred) = random_maps(seed, classes, 64);
        let mut acc = ConfusionAccumulator::new(classes as usize);
        acc.accumulate(&gt, &pred, Some(IGNORE)).unwrap();
        for g in 0..classes {
            for p in 0..classes {
                let direct = gt.iter().zip(&pred).filter(|(a, b)| **a == g && **b == p).count() as u64;
                prop_assert_eq!(acc.get(g as usize, p as usize), direct);
            }
        }
        prop_assert_eq!(acc.total(), gt.iter().filter(|g| **g != IGNORE).count() as u64);
    }

    #[test]
    fn scores_equal_brute_force_and_iou_below_pa(seed in any::<u64>(), classes in 2u32..6) {
        let (gt, pred) = random_maps(seed, classes, 64);
        let mut acc = ConfusionAccumulator::new(classes as usize);
        acc.accumulate(&gt, &pred, Some(IGNORE)).unwrap();
        let s = mpa_miou(&acc, None).unwrap();
        let (mpa, miou) = brute_force(&gt, &pred, classes);
        prop_assert!((s.mpa - mpa).abs() < 1e-12 && (s.miou - miou).abs() < 1e-12);
        for c in &s.per_class {
            prop_assert!(c.iou <= c.pa + 1e-15);
        }
    }

    #[test]
    fn any_partition_merges_to_the_same_matrix(seed in any::<u64>(), cut in 1usize..63) {
        let (gt, pred) = random_maps(seed, 4, 64);
        let mut whole = ConfusionAccumulator::new(4);
        whole.accumulate(&gt, &pred, Some(IGNORE)).unwrap();
        let mut a = ConfusionAccumulator::new(4);
        let mut b = ConfusionAccumulator::new(4);
        a.accumulate(&gt[..cut], &pred[..cut], Some(IGNORE)).unwrap();
        b.accumulate(&gt[cut..], &pred[cut..], Some(IGNORE)).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        b.merge(&a).unwrap();
        prop_assert_eq!(&ab, &whole);
        prop_assert_eq!(&b, &whole);
    }

    #[test]
    fn protocol_leaves_other_pixels_alone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (classes, area) = (5, 20);
        let probs: Vec<f64> = (0..classes * area).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt: Vec<u32> = (0..area).map(|_| rng.gen_range(0..classes as u32)).collect();
        let subs = [3, 4];
        let out = flat_protocol_score(&gt, &probs, classes, 2, &subs).unwrap();
        for p in 0..area {
            let argmax = (0..classes).fold(0, |b, k| if probs[k * area + p] > probs[b * area + p] { k } else { b });
            if !subs.contains(&(gt[p] as usize)) {
                prop_assert_eq!(out[p] as usize, argmax);
            }
        }
    }
}

#[test]
fn identical_maps_fill_only_the_diagonal() {
    let (gt, _) = random_maps(3, 4, 64);
    let clean: Vec<u32> = gt.iter().map(|&g| if g == IGNORE { 0 } else { g }).collect();
    let mut acc = ConfusionAccumulator::new(4);
    acc.accumulate(&clean, &clean, None).unwrap();
    for g in 0..4 {
        for p in 0..4 {
            if g != p {
                assert_eq!(acc.get(g, p), 0);
            }
        }
    }
    let s = mpa_miou(&acc, None).unwrap();
    assert_eq!((s.mpa, s.miou), (1.0, 1.0));
    let mut untouched = ConfusionAccumulator::new(4);
    untouched.accumulate(&[IGNORE; 5], &[1; 5], Some(IGNORE)).unwrap();
    assert_eq!(untouched.total(), 0);
}

#[test]
fn filter_matches_direct_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train: Vec<u64> = (0..30).map(|_| rng.gen_range(0..3000)).collect();
    let val: Vec<u64> = (0..30).map(|_| rng.gen_range(0..3000)).collect();
    for direction in [ThresholdDirection::Above, ThresholdDirection::Below] {
        let f = ClassFilter { threshold: 1000, direction };
        let keep = |n: u64| match direction {
            ThresholdDirection::Above => n > 1000,
            ThresholdDirection::Below => n > 0 && n < 1000,
        };
        let want: Vec<usize> = (0..30).filter(|&c| keep(train[c]) && keep(val[c])).collect();
        assert_eq!(filter_evaluated_classes(&train, &[&val], f), want);
    }
    let zero = filter_evaluated_classes(&[0, 4, 1], &[&[3, 3, 0]], ClassFilter::default());
    assert_eq!(zero, vec![1]);
}

#[test]
fn empty_filter_is_an_error() {
    let acc = ConfusionAccumulator::new(3);
    assert!(mpa_miou(&acc, Some(&[])).is_err());
}
