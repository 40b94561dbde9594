//! Property tests for invariants that span several modules.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use densecenter::config::RawConfig;
use densecenter::datapipe::split::test_count;
use densecenter::datapipe::{plan_balance, stratified_split, BalanceTargets, DatasetManifest, Split, Transform};
use densecenter::densenet::{ArchConfig, LayerPlan};
use densecenter::evaluation::{balanced_accuracy, ConfusionMatrix};
use densecenter::losses::{softmax_rows, CenterBank};
use densecenter::trainer::{lr_at, Checkpoint, OptimizerConfig};
use densecenter::{Real, Tensor};

fn class_counts(lo: usize, hi: usize) -> impl Strategy<Value = [usize; 7]> {
    prop::array::uniform7(lo..hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_each_class(counts in class_counts(1, 60), ratio in 0.05f64..=1.0, seed in any::<u64>()) {
        let manifest = DatasetManifest::synthetic(&counts, "p");
        let split = stratified_split(&manifest, ratio, seed).unwrap();
        let mut ids: Vec<&str> = Split::ALL.iter().flat_map(|&s| split.side(s).iter().map(|(id, _)| id.as_str())).collect();
        prop_assert_eq!(ids.len(), manifest.len());
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), manifest.len());
        for j in 0..7 {
            prop_assert_eq!(split.counts(Split::Test)[j], test_count(counts[j], ratio));
            prop_assert_eq!(split.counts(Split::Train)[j] + split.counts(Split::Test)[j], counts[j]);
        }
        prop_assert_eq!(&stratified_split(&manifest, ratio, seed).unwrap(), &split);
    }

    #[test]
    fn plan_meets_every_target(
        counts in class_counts(5, 30),
        mult in prop::array::uniform7(1usize..6),
        rem in prop::array::uniform7(0usize..1000),
        seed in any::<u64>(),
    ) {
        let manifest = DatasetManifest::synthetic(&counts, "p");
        let split = stratified_split(&manifest, 0.8, 7).unwrap();
        let side = |s: Split| -> [usize; 7] {
            let src = split.counts(s);
            std::array::from_fn(|j| src[j] * mult[j] + rem[j] % src[j])
        };
        let targets = BalanceTargets { train: side(Split::Train), test: side(Split::Test) };
        let plan = plan_balance(&split, &targets, seed).unwrap();
        for s in Split::ALL {
            prop_assert_eq!(plan.totals(s), *targets.side(s));
            for j in 0..7 {
                let cell = plan.cell(s, j).unwrap();
                prop_assert_eq!(cell.multiplicity, mult[j]);
                prop_assert_eq!(cell.is_exact(), cell.extra == 0);
                prop_assert_eq!(cell.planned(), targets.side(s)[j]);
            }
        }
        for e in &plan.entries {
            let m = mult[e.label];
            prop_assert!(e.transforms.len() == m || e.transforms.len() == m + 1);
            prop_assert_eq!(&e.transforms[0], &Transform::Identity);
        }
    }

    #[test]
    fn transforms_round_trip_through_text(seed in any::<u64>()) {
        let t = Transform::sample(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(t.validate().is_ok());
        let back: Transform = t.to_string().parse().unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing(step in 1u64..500, periods in 1u64..6, extra in 0u64..500) {
        let cfg = OptimizerConfig { lr_step: step, max_iter: step * periods + extra, ..Default::default() };
        let mut prev = f64::INFINITY;
        let mut drops = 0;
        for it in 0..cfg.max_iter {
            let lr = lr_at(it, &cfg).unwrap();
            prop_assert!(lr <= prev);
            if lr < prev && it > 0 {
                drops += 1;
                prop_assert_eq!(it % step, 0);
                prop_assert!((lr / prev - cfg.lr_factor).abs() < 1e-12);
            }
            prev = lr;
        }
        prop_assert_eq!(drops, (cfg.max_iter - 1) / step);
        prop_assert!(lr_at(cfg.max_iter, &cfg).is_err());
    }

    #[test]
    fn layer_plan_matches_channel_arithmetic(
        blocks in prop::collection::vec(1usize..8, 1..4),
        k in 1usize..40,
        stem in 1usize..80,
    ) {
        let cfg = ArchConfig {
            block_sizes: blocks.clone(),
            growth_rate: k,
            stem_channels: stem,
            input_size: 64,
            freeze_boundary: None,
            ..ArchConfig::default()
        };
        let plan = LayerPlan::from_config(&cfg).unwrap();
        let mut c = stem;
        for (b, n) in blocks.iter().enumerate() {
            c += n * k;
            if b + 1 < blocks.len() {
                c /= 2;
            }
        }
        prop_assert_eq!(plan.feature_dim(), c);
        prop_assert_eq!(plan.conv_layer_count(), 1 + 2 * blocks.iter().sum::<usize>() + blocks.len() - 1);
    }

    #[test]
    fn checkpoints_round_trip_and_detect_corruption(
        values in prop::collection::vec(-1e3f32..1e3, 1..40),
        iteration in any::<u64>(),
        digest in any::<u64>(),
        flip in any::<prop::sample::Index>(),
    ) {
        let mut ckpt = Checkpoint::new(iteration, digest);
        let n = values.len();
        ckpt.insert("a.weight".into(), Tensor::new(&[n], values.iter().map(|&v| v as Real).collect()).unwrap());
        ckpt.insert("b".into(), Tensor::scalar(1.5));
        let bytes = ckpt.encode();
        prop_assert_eq!(&Checkpoint::decode(&bytes).unwrap(), &ckpt);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x10;
        prop_assert!(Checkpoint::decode(&bad).is_err());
    }

    #[test]
    fn resolved_config_text_is_a_fixed_point(
        seed in any::<u32>(),
        k in 1usize..64,
        lr in 1e-5f64..1.0,
        lambda in 0.0f64..2.0,
    ) {
        let mut raw = RawConfig::default();
        raw.set("run.seed", &seed.to_string()).unwrap();
        raw.set("arch.growth_rate", &k.to_string()).unwrap();
        raw.set("optim.base_lr", &lr.to_string()).unwrap();
        raw.set("loss.lambda", &lambda.to_string()).unwrap();
        let cfg = raw.resolve().unwrap();
        let again = RawConfig::parse(&cfg.to_text()).unwrap().resolve().unwrap();
        prop_assert_eq!(again.digest, cfg.digest);
        prop_assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50f32..50.0, 7..70)) {
        let rows = logits.len() / 7;
        let logits: Vec<Real> = logits[..rows * 7].iter().map(|&v| v as Real).collect();
        let p = softmax_rows(&logits, 7);
        for r in p.chunks(7) {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn center_update_contracts_toward_batch_mean(
        start in prop::collection::vec(-5f32..5.0, 3),
        feats in prop::collection::vec(-5f32..5.0, 3..30),
        alpha in 0.05f32..=1.0,
    ) {
        let n = feats.len() / 3;
        let feats: Vec<Real> = feats[..n * 3].iter().map(|&v| v as Real).collect();
        let start: Vec<Real> = start.iter().map(|&v| v as Real).collect();
        let mut centers = vec![0.0 as Real; 3];
        centers.extend_from_slice(&start);
        let mut bank = CenterBank::from_centers(Tensor::new(&[2, 3], centers).unwrap(), alpha as Real).unwrap();
        bank.update(&Tensor::new(&[n, 3], feats.clone()).unwrap(), &vec![1; n]).unwrap();
        prop_assert_eq!(bank.center(0), &[0.0, 0.0, 0.0]);
        let shrink = 1.0 - alpha as f64 * n as f64 / (1.0 + n as f64);
        for k in 0..3 {
            let mean = (0..n).map(|i| feats[i * 3 + k] as f64).sum::<f64>() / n as f64;
            let want = mean + shrink * (start[k] as f64 - mean);
            prop_assert!((bank.center(1)[k] as f64 - want).abs() < 1e-4);
        }
    }

    #[test]
    fn balanced_accuracy_ignores_class_frequency(
        rows in prop::collection::vec(prop::collection::vec(0u64..20, 4), 4),
        class in 0usize..4,
        factor in 2u64..6,
    ) {
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        let mut scaled_rows = rows.clone();
        scaled_rows[class].iter_mut().for_each(|v| *v *= factor);
        let scaled = ConfusionMatrix::from_rows(&scaled_rows).unwrap();
        let (a, b) = (balanced_accuracy(&cm), balanced_accuracy(&scaled));
        prop_assert!((0.0..=1.0).contains(&a.value));
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert_eq!(a.excluded, b.excluded);
    }
}
