//! Randomised invariants.

mod common;

use std::collections::BTreeSet;

use barkid::dataset::{kfold_labels, split_labels};
use barkid::evaluator::{classification_report, confusion_matrix, ConfusionMatrix};
use barkid::preprocess::{denormalize, normalize, one_hot, resize_image, Interpolation, PreprocessConfig};
use barkid::resampler::{apply_augmentation, plan_rebalance, replay_ops, sample_ops, AugmentOp, AugmentationSpec};
use barkid::trainer::{history_from_csv, history_to_csv, EpochRecord, TrainingHistory};
use common::*;
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..6).prop_flat_map(|c| prop::collection::vec(0..c, 1..120))
}

fn image_strategy() -> impl Strategy<Value = RgbImage> {
    (1u32..24, 1u32..24, any::<u64>()).prop_map(|(w, h, s)| {
        RgbImage::from_fn(w, h, |x, y| {
            let v = s.wrapping_mul(u64::from(x * 31 + y * 17 + 1)).to_le_bytes();
            Rgb([v[1], v[3], v[5]])
        })
    })
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (1usize..7).prop_flat_map(|c| prop::collection::vec(prop::collection::vec(0u64..30, c), c))
}

fn matrix(counts: Vec<Vec<u64>>) -> Result<ConfusionMatrix, barkid::Error> {
    let names = (0..counts.len()).map(class_name).collect();
    ConfusionMatrix::from_counts(counts, names)
}

fn permute(counts: &[Vec<u64>], perm: &[usize]) -> Vec<Vec<u64>> {
    perm.iter().map(|&i| perm.iter().map(|&j| counts[i][j]).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_partitions_indices(labels in labels_strategy(), ratio in 0.05f64..=1.0, seed: u64, stratified: bool) {
        if (ratio * labels.len() as f64).round() == 0.0 {
            prop_assert!(split_labels(&labels, ratio, seed, stratified).is_err());
            return Ok(());
        }
        let s = split_labels(&labels, ratio, seed, stratified).unwrap();
        let train: BTreeSet<_> = s.train_indices.iter().copied().collect();
        let test: BTreeSet<_> = s.test_indices.iter().copied().collect();
        prop_assert_eq!(train.len(), s.train_indices.len());
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), labels.len());
        if stratified {
            let classes = labels.iter().max().unwrap() + 1;
            for c in 0..classes {
                let n = labels.iter().filter(|&&l| l == c).count() as f64;
                let got = s.train_indices.iter().filter(|&&i| labels[i] == c).count() as f64;
                prop_assert!((got - ratio * n).abs() <= 1.0, "class {} got {} of {}", c, got, n);
            }
        } else {
            prop_assert_eq!(train.len(), (ratio * labels.len() as f64).round() as usize);
        }
        prop_assert_eq!(split_labels(&labels, ratio, seed, stratified).unwrap(), s);
    }

    #[test]
    fn kfold_covers_once(labels in labels_strategy(), k in 2usize..8, seed: u64) {
        prop_assume!(k <= labels.len());
        let p = kfold_labels(&labels, k, seed, false).unwrap();
        prop_assert_eq!(p.folds.len(), k);
        let mut seen: Vec<usize> = p.folds.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..labels.len()).collect::<Vec<_>>());
        let sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_labels(&labels, k, seed, false).unwrap(), p);
    }

    #[test]
    fn weighted_recall_is_accuracy(counts in matrix_strategy()) {
        let cm = matrix(counts).unwrap();
        prop_assume!(cm.total() > 0);
        let r = classification_report(&cm).unwrap();
        prop_assert!((r.weighted_avg.recall - r.accuracy).abs() < 1e-12);
        prop_assert_eq!(r.total_support, cm.total());
        for m in &r.per_class {
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn balanced_support_makes_averages_agree(c in 2usize..6, per in 1u64..20, seed: u64) {
        let truth: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per as usize)).collect();
        let predicted: Vec<usize> = truth
            .iter()
            .enumerate()
            .map(|(i, &t)| if seed.rotate_left(i as u32) & 3 == 0 { (t + 1) % c } else { t })
            .collect();
        let r = classification_report(&confusion_matrix(&truth, &predicted, c).unwrap()).unwrap();
        prop_assert!((r.macro_avg.precision - r.weighted_avg.precision).abs() < 1e-12);
        prop_assert!((r.macro_avg.recall - r.weighted_avg.recall).abs() < 1e-12);
        prop_assert!((r.macro_avg.f1 - r.weighted_avg.f1).abs() < 1e-12);
    }

    #[test]
    fn averages_ignore_class_order(counts in matrix_strategy(), seed: u64) {
        prop_assume!(counts.iter().flatten().sum::<u64>() > 0);
        let c = counts.len();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.sort_by_key(|&i| seed.rotate_left(i as u32 * 7) ^ i as u64);
        let a = classification_report(&matrix(counts.clone()).unwrap()).unwrap();
        let b = classification_report(&matrix(permute(&counts, &perm)).unwrap()).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        for (x, y) in [(a.macro_avg, b.macro_avg), (a.weighted_avg, b.weighted_avg)] {
            prop_assert!((x.precision - y.precision).abs() < 1e-12);
            prop_assert!((x.recall - y.recall).abs() < 1e-12);
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_round_trips(img in image_strategy()) {
        let v = normalize(&img);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(denormalize(&v, img.width(), img.height()).unwrap(), img);
    }

    #[test]
    fn one_hot_rows(labels in labels_strategy()) {
        let c = labels.iter().max().unwrap() + 1;
        let t = one_hot(&labels, c).unwrap();
        for (i, &l) in labels.iter().enumerate() {
            let row = t.row(i);
            prop_assert_eq!(row.iter().sum::<f32>(), 1.0);
            prop_assert_eq!(row[l], 1.0);
        }
    }

    #[test]
    fn nearest_halving(img in image_strategy()) {
        let (w, h) = img.dimensions();
        let big = RgbImage::from_fn(w * 2, h * 2, |x, y| *img.get_pixel(x / 2, y / 2));
        let cfg = PreprocessConfig { height: h, width: w, interpolation: Interpolation::Nearest, ..Default::default() };
        prop_assert_eq!(resize_image(&big, &cfg).unwrap(), img);
    }

    #[test]
    fn augmentation_keeps_size_and_replays(img in image_strategy(), seed: u64) {
        let specs = AugmentationSpec::defaults();
        let out = apply_augmentation(&img, &specs, seed).unwrap();
        prop_assert_eq!(out.dimensions(), img.dimensions());
        prop_assert_eq!(&apply_augmentation(&img, &specs, seed).unwrap(), &out);
        let ops = sample_ops(&specs, seed).unwrap();
        prop_assert!(!ops.is_empty());
        prop_assert_eq!(replay_ops(&img, &ops), out);
    }

    #[test]
    fn flip_twice_and_unit_brightness_are_identity(img in image_strategy(), seed: u64) {
        let flip = [AugmentationSpec::new(AugmentOp::FlipTopBottom, 1.0)];
        let once = apply_augmentation(&img, &flip, seed).unwrap();
        prop_assert_eq!(apply_augmentation(&once, &flip, seed).unwrap(), img.clone());
        let unit = [AugmentationSpec::new(AugmentOp::RandomBrightness { min_factor: 1.0, max_factor: 1.0 }, 1.0)];
        prop_assert_eq!(apply_augmentation(&img, &unit, seed).unwrap(), img);
    }

    #[test]
    fn rebalance_plan_invariants(counts in prop::collection::vec(1usize..40, 1..6), target in 1usize..50, seed: u64) {
        let m = virtual_manifest(&counts);
        let plan = plan_rebalance(&m, target, seed).unwrap();
        prop_assert_eq!(plan.total(), target * counts.len());
        prop_assert_eq!(&plan_rebalance(&m, target, seed).unwrap(), &plan);
        for (c, cp) in plan.classes.iter().enumerate() {
            prop_assert_eq!(cp.keep.len() + cp.generate, target);
            prop_assert_eq!(cp.keep.len(), counts[c].min(target));
            prop_assert!(cp.keep.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(cp.keep.iter().all(|&i| m.records[i].class_index == c));
            prop_assert_eq!(cp.sources.len(), cp.generate);
            prop_assert!(cp.sources.iter().all(|&i| m.records[i].class_index == c));
            // Round-robin: every original is used ⌊g/n⌋ or ⌈g/n⌉ times.
            let n = counts[c];
            let mut uses = vec![0usize; m.len()];
            cp.sources.iter().for_each(|&i| uses[i] += 1);
            for i in m.indices_of_class(c) {
                prop_assert!(uses[i] == cp.generate / n || uses[i] == cp.generate.div_ceil(n));
            }
        }
    }

    #[test]
    fn history_csv_round_trips(rows in prop::collection::vec((0.0f64..10.0, 0.0f64..=1.0, prop::option::of(0.0f64..10.0)), 1..20)) {
        let history = TrainingHistory {
            epochs: rows
                .iter()
                .enumerate()
                .map(|(i, &(loss, acc, val))| EpochRecord {
                    epoch: i + 1,
                    train_loss: loss,
                    train_accuracy: acc,
                    val_loss: val,
                    val_accuracy: val.map(|v| v / 10.0),
                    seconds: 0.0,
                    // Not stored in the CSV.
                    learning_rate: 0.0,
                })
                .collect(),
            ..TrainingHistory::default()
        };
        let parsed = history_from_csv(&history_to_csv(&history)).unwrap();
        prop_assert_eq!(parsed.epochs, history.epochs);
    }
}
