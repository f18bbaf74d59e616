use proptest::prelude::*;

use logn_core::background::{background_odds, changing_rate_k};
use logn_core::calibrate::{
    finalize, logit_adjustment_baseline, logn_normalize, online_inverse, softmax_scores, BetaMode, CalibrationParams,
};
use logn_core::format::{read_dump, write_dump, Dump, DumpFormat};
use logn_core::metrics::{argmax, average_precision, classify_and_score, spearman};
use logn_core::record::{ClassLayout, LogitRecord, Matrix};
use logn_core::stats::{
    compute_exact, ExactAccumulator, Group, LabelDistribution, RunningStats, StatsConfig, DEFAULT_GROUP_THRESHOLDS,
};
use logn_core::synth::{generate_classification, generate_detection_proxy, repeat_factor_oversample, SynthSpec};
use logn_core::trainer::{train, TrainConfig};

fn logit_rows(slots: usize, max_rows: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-20.0..20.0f64, slots), 1..max_rows)
}

fn records_strategy() -> impl Strategy<Value = Vec<LogitRecord>> {
    (2usize..6).prop_flat_map(|k| {
        prop::collection::vec((0..k, prop::collection::vec(-20.0..20.0f64, k)), 2..60)
            .prop_map(|rows| rows.into_iter().map(|(l, x)| LogitRecord::new(l, x)).collect())
    })
}

fn params_strategy() -> impl Strategy<Value = (CalibrationParams, Vec<f64>)> {
    (2usize..8).prop_flat_map(|k| {
        (
            prop::collection::vec(-10.0..10.0f64, k),
            prop::collection::vec(-3.0..3.0f64, k),
            -5.0..5.0f64,
            prop::option::of(0..k),
            1.0..3.0f64,
            prop::collection::vec(-10.0..10.0f64, k),
        )
            .prop_map(|(mut adj, log_var, beta, bg, p, x)| {
                let mut var: Vec<f64> = log_var.iter().map(|v| 10f64.powf(*v)).collect();
                if let Some(b) = bg {
                    adj[b] = 0.0;
                    var[b] = 1.0;
                }
                let params = CalibrationParams {
                    adj_mean: adj,
                    var,
                    beta,
                    eps: 1e-5,
                    sigma_exponent: p,
                    bg_index: bg,
                };
                (params, x)
            })
    })
}

fn small_spec() -> impl Strategy<Value = SynthSpec> {
    (2usize..6, 5u64..40, 1.0..20.0f64, 1usize..4, any::<u64>()).prop_map(|(c, max, ratio, d, seed)| SynthSpec {
        num_classes: c,
        feature_dim: d,
        max_count: max,
        imbalance_ratio: ratio.min(max as f64),
        class_sep: 3.0,
        noise_sigma: 1.0,
        bg_multiplier: 0.0,
        seed,
        bg_index: 0,
        split: 0,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_stats_ignore_record_order(records in records_strategy(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = compute_exact(&records, StatsConfig::classification()).unwrap();
        let b = compute_exact(&shuffled, StatsConfig::classification()).unwrap();
        for j in 0..a.mean.len() {
            prop_assert!((a.mean[j] - b.mean[j]).abs() <= 1e-9);
            prop_assert!((a.var[j] - b.var[j]).abs() <= 1e-9 * a.var[j].max(1.0));
        }
    }

    #[test]
    fn sharded_accumulators_merge_to_one_pass(records in records_strategy(), cut in 0.0..1.0f64) {
        let k = records[0].logits.len();
        let split = (cut * records.len() as f64) as usize;
        let mut left = ExactAccumulator::new(k);
        let mut right = ExactAccumulator::new(k);
        records[..split].iter().for_each(|r| left.push(&r.logits));
        records[split..].iter().for_each(|r| right.push(&r.logits));
        left.merge(&right).unwrap();
        let merged = left.finish(StatsConfig::classification()).unwrap();
        let direct = compute_exact(&records, StatsConfig::classification()).unwrap();
        for j in 0..k {
            prop_assert!((merged.mean[j] - direct.mean[j]).abs() <= 1e-9);
            prop_assert!((merged.var[j] - direct.var[j]).abs() <= 1e-9 * direct.var[j].max(1.0));
        }
    }

    #[test]
    fn ema_approaches_a_repeated_batch_monotonically(
        first in logit_rows(3, 10),
        batch in logit_rows(3, 10),
        momentum in 0.01..1.0f64,
    ) {
        let to_records = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| LogitRecord::new(0, r.clone())).collect::<Vec<_>>();
        let target = compute_exact(&to_records(&batch), StatsConfig::classification()).unwrap();
        let mut stats = RunningStats::new(3, StatsConfig { momentum, ..StatsConfig::classification() }).unwrap();
        stats.update_ema(&to_records(&first)).unwrap();
        let dist = |s: &RunningStats| -> f64 {
            (0..3).map(|j| (s.mean[j] - target.mean[j]).abs() + (s.var[j] - target.var[j]).abs()).sum()
        };
        let mut prev = dist(&stats);
        for _ in 0..20 {
            stats.update_ema(&to_records(&batch)).unwrap();
            let d = dist(&stats);
            prop_assert!(d <= prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn inverse_then_normalize_is_identity((params, x) in params_strategy()) {
        let mut p = params;
        p.sigma_exponent = 1.0;
        let y = logn_normalize(&online_inverse(&x, &p).unwrap(), &p).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_composes_for_any_exponent((params, x) in params_strategy()) {
        let y = online_inverse(&logn_normalize(&x, &params).unwrap(), &params).unwrap();
        for (a, b) in x.iter().zip(&y) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn normalization_is_increasing_per_coordinate((params, x) in params_strategy(), i in any::<prop::sample::Index>(), bump in 1e-3..5.0f64) {
        let i = i.index(x.len());
        let mut x2 = x.clone();
        x2[i] += bump;
        prop_assert!(logn_normalize(&x2, &params).unwrap()[i] > logn_normalize(&x, &params).unwrap()[i]);
    }

    #[test]
    fn sigma_exponent_shrinks_wide_and_widens_narrow((params, x) in params_strategy(), dp in 0.1..2.0f64) {
        let mut hi = params.clone();
        hi.sigma_exponent += dp;
        let a = logn_normalize(&x, &params).unwrap();
        let b = logn_normalize(&x, &hi).unwrap();
        for c in 0..x.len() {
            let s = params.var[c] + params.eps;
            if s > 1.0 {
                prop_assert!(b[c].abs() <= a[c].abs());
            } else if s < 1.0 {
                prop_assert!(b[c].abs() >= a[c].abs());
            }
        }
    }

    #[test]
    fn unit_scale_normalization_matches_logit_adjustment_argmax(
        counts in prop::collection::vec(1u64..500, 2..8),
        tau in 0.0..2.0f64,
        shift in -5.0..5.0f64,
        rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 8), 1..20),
    ) {
        let k = counts.len();
        let dist = LabelDistribution::from_counts(counts.clone(), DEFAULT_GROUP_THRESHOLDS).unwrap();
        let total: u64 = counts.iter().sum();
        let params = CalibrationParams {
            adj_mean: counts.iter().map(|&n| tau * (n as f64 / total as f64).ln() + shift).collect(),
            var: vec![1.0; k],
            beta: 0.0,
            eps: 1e-300,
            sigma_exponent: 1.0,
            bg_index: None,
        };
        for row in rows {
            let x = &row[..k];
            let a = logn_normalize(x, &params).unwrap();
            let b = logit_adjustment_baseline(x, &dist, tau).unwrap();
            // values differ by the constant `shift`; guard against near-ties
            let mut sorted = b.clone();
            sorted.sort_by(|p, q| q.total_cmp(p));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }

    #[test]
    fn finalize_is_idempotent_in_beta(
        mean in prop::collection::vec(-10.0..10.0f64, 3..8),
        mode in prop_oneof![Just(BetaMode::FgMin), Just(BetaMode::FgAvg), Just(BetaMode::FgMax), Just(BetaMode::BgMean)],
        p in 1.0..3.0f64,
    ) {
        let k = mean.len();
        let mut stats = RunningStats::new(k, StatsConfig::default()).unwrap();
        stats.mean = mean;
        stats.var = (0..k).map(|i| 0.5 + i as f64).collect();
        stats.initialized = true;
        stats.count = 1;
        let first = finalize(&stats, mode, p).unwrap();
        let again = finalize(&stats, BetaMode::Constant(first.beta), p).unwrap();
        let twice = finalize(&stats, BetaMode::Constant(again.beta), p).unwrap();
        prop_assert_eq!(&first, &again);
        prop_assert_eq!(&again, &twice);
        prop_assert_eq!(first.adj_mean[0], 0.0);
        prop_assert_eq!(first.var[0], 1.0);
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-300.0..300.0f64, 1..30), c in -100.0..100.0f64) {
        let p = softmax_scores(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in p.iter().zip(softmax_scores(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn changing_rate_ignores_foreground_share(
        s_b in 0.01..0.9f64, delta in 0.001..0.05f64, beta in -4.0..4.0f64, f1 in 0.01..0.99f64, f2 in 0.01..0.99f64,
    ) {
        prop_assert_eq!(changing_rate_k(delta, s_b, f1, beta).unwrap(), changing_rate_k(delta, s_b, f2, beta).unwrap());
    }

    #[test]
    fn background_odds_increase(a in 0.001..0.999f64, b in 0.001..0.999f64) {
        prop_assume!(a < b);
        prop_assert!(background_odds(a) < background_odds(b));
    }

    #[test]
    fn ap_ignores_increasing_transforms(
        items in prop::collection::vec((-5.0..5.0f64, any::<bool>()), 1..60),
        scale in 0.1..10.0f64,
        offset in -3.0..3.0f64,
    ) {
        let scores: Vec<f64> = items.iter().map(|i| i.0).collect();
        let positive: Vec<bool> = items.iter().map(|i| i.1).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (scale * s + offset).exp()).collect();
        prop_assert_eq!(average_precision(&scores, &positive), average_precision(&transformed, &positive));
    }

    #[test]
    fn balanced_accuracy_survives_relabeling(
        k in 3usize..7,
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 7), 10..60),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % k).collect();
        let logits = Matrix::from_rows(&rows.iter().map(|r| r[..k].to_vec()).collect::<Vec<_>>()).unwrap();
        let counts: Vec<u64> = (0..k as u64).map(|c| 5 + 40 * c).collect();
        let dist = LabelDistribution::from_counts(counts.clone(), DEFAULT_GROUP_THRESHOLDS).unwrap();

        let mut perm: Vec<usize> = (0..k).collect();
        let mut s = seed;
        for i in (1..k).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut moved = Matrix::zeros(logits.rows(), k);
        for i in 0..logits.rows() {
            for c in 0..k {
                moved.set(i, perm[c], logits.get(i, c));
            }
        }
        let moved_labels: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let mut moved_counts = vec![0; k];
        for c in 0..k {
            moved_counts[perm[c]] = counts[c];
        }
        let moved_dist = LabelDistribution::from_counts(moved_counts, DEFAULT_GROUP_THRESHOLDS).unwrap();

        // exact ties would make argmax depend on column order
        for r in logits.iter_rows() {
            let mut v = r.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(v[0] > v[1]);
        }
        let a = classify_and_score(&logits, &labels, &dist).unwrap();
        let b = classify_and_score(&moved, &moved_labels, &moved_dist).unwrap();
        prop_assert!((a.balanced_accuracy - b.balanced_accuracy).abs() <= 1e-12);
        prop_assert_eq!(a.overall_top1, b.overall_top1);
        for c in 0..k {
            prop_assert_eq!(a.per_class_recall[c], b.per_class_recall[perm[c]]);
        }
        // group means sum in a different class order after relabeling
        for g in Group::ALL {
            match (a.per_group.get(&g), b.per_group.get(&g)) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn group_scores_aggregate_to_balanced_accuracy(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 12..60),
    ) {
        let k = 6;
        let labels: Vec<usize> = (0..rows.len()).map(|i| i % k).collect();
        let logits = Matrix::from_rows(&rows).unwrap();
        let dist = LabelDistribution::from_counts(vec![500, 200, 50, 20, 5, 2], DEFAULT_GROUP_THRESHOLDS).unwrap();
        let r = classify_and_score(&logits, &labels, &dist).unwrap();
        let weighted: f64 = Group::ALL
            .iter()
            .map(|g| r.per_group[g] * dist.classes_in(*g).count() as f64)
            .sum::<f64>() / k as f64;
        prop_assert!((weighted - r.balanced_accuracy).abs() <= 1e-12);
    }

    #[test]
    fn spearman_is_bounded(a in prop::collection::vec(-5.0..5.0f64, 3..20), seed in any::<u64>()) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v * ((seed >> (i % 60)) & 1) as f64 + i as f64).collect();
        if let Some(r) = spearman(&a, &b) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_counts_follow_the_law(spec in small_spec()) {
        let data = generate_classification(&spec).unwrap();
        let expected = spec.analytic_counts().unwrap();
        prop_assert_eq!(data.slot_counts(), expected.clone());
        prop_assert!(expected.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn generation_is_deterministic(spec in small_spec()) {
        prop_assert_eq!(generate_classification(&spec).unwrap(), generate_classification(&spec).unwrap());
    }

    #[test]
    fn oversampling_only_repeats(spec in small_spec(), t in 0.01..0.9f64, bgm in 0.0..3.0f64) {
        let data = if bgm > 0.5 {
            generate_detection_proxy(&SynthSpec { bg_multiplier: bgm, ..spec }).unwrap()
        } else {
            generate_classification(&spec).unwrap()
        };
        let out = repeat_factor_oversample(&data, t).unwrap();
        prop_assert!(out.len() >= data.len());
        let before = data.slot_counts();
        let after = out.slot_counts();
        for slot in 0..before.len() {
            prop_assert!(after[slot] >= before[slot]);
            prop_assert_eq!(after[slot] % before[slot].max(1), 0);
            if data.layout.is_background(slot) {
                prop_assert_eq!(after[slot], before[slot]);
            }
        }
        // every output row is a row of the input with the same label
        let mut originals: Vec<(usize, Vec<u64>)> = data
            .features
            .iter_rows()
            .zip(&data.labels)
            .map(|(r, &l)| (l, r.iter().map(|v| v.to_bits()).collect()))
            .collect();
        originals.sort();
        for (r, &l) in out.features.iter_rows().zip(&out.labels) {
            let key = (l, r.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert!(originals.binary_search(&key).is_ok());
        }
    }

    #[test]
    fn dumps_round_trip(records in records_strategy(), bg in prop::option::of(0usize..2)) {
        let k = records[0].logits.len();
        let layout = ClassLayout::new(k, bg).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let quantized: Vec<LogitRecord> = records
            .iter()
            .map(|r| LogitRecord::new(r.label, r.logits.iter().map(|v| *v as f32 as f64).collect()))
            .collect();
        let dump = Dump::new(layout, quantized).unwrap();
        let bin = dir.path().join("d.bin");
        write_dump(&bin, &dump, DumpFormat::Binary).unwrap();
        prop_assert_eq!(read_dump(&bin, None).unwrap(), dump);

        let text = dir.path().join("d.ndjson");
        let dump = Dump::new(layout, records.clone()).unwrap();
        write_dump(&text, &dump, DumpFormat::Ndjson).unwrap();
        let back = read_dump(&text, bg).unwrap();
        prop_assert_eq!(back.layout, layout);
        for (a, b) in back.records.iter().zip(&records) {
            prop_assert_eq!(a.label, b.label);
            for (x, y) in a.logits.iter().zip(&b.logits) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn text_and_binary_dumps_give_the_same_statistics(records in records_strategy()) {
        let k = records[0].logits.len();
        let layout = ClassLayout::new(k, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dump = Dump::new(layout, records).unwrap();
        let (bin, text) = (dir.path().join("a.bin"), dir.path().join("a.ndjson"));
        write_dump(&bin, &dump, DumpFormat::Binary).unwrap();
        write_dump(&text, &dump, DumpFormat::Ndjson).unwrap();
        let a = compute_exact(&read_dump(&bin, None).unwrap().records, StatsConfig::classification()).unwrap();
        let b = compute_exact(&read_dump(&text, None).unwrap().records, StatsConfig::classification()).unwrap();
        let records = &dump.records;
        let n = records.len() as f64;
        for j in 0..k {
            // float32 storage moves each value by at most 2^-24 of its magnitude
            let abs_mean = records.iter().map(|r| r.logits[j].abs()).sum::<f64>() / n;
            let sq_mean = records.iter().map(|r| r.logits[j].powi(2)).sum::<f64>() / n;
            prop_assert!((a.mean[j] - b.mean[j]).abs() <= 1e-7 * abs_mean + 1e-15);
            prop_assert!((a.var[j] - b.var[j]).abs() <= 4e-7 * sq_mean + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_is_deterministic(spec in small_spec(), seed in any::<u64>()) {
        let data = generate_classification(&spec).unwrap();
        let config = TrainConfig { epochs: 3, seed, ..TrainConfig::default() };
        let (a, la) = train(&data, &config).unwrap();
        let (b, lb) = train(&data, &config).unwrap();
        prop_assert_eq!(a.flat_params(), b.flat_params());
        prop_assert_eq!(la, lb);
    }
}
