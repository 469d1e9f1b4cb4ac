mod common;

use amcen::classifier::{contrastive_loss, predictive_mask};
use amcen::dataset::{dataset_statistics, load_quadruples, write_quadruples};
use amcen::decoder::{branch_distribution, Branch};
use amcen::evaluation::{filtered_rank, metrics_of, rank_of, Direction, RankMode, RankResult};
use amcen::{Dataset, FrequencyIndex, MaskVector, Quadruple, RunConfig, Split};
use common::*;
use proptest::prelude::*;

fn quads(
    entities: usize,
    relations: usize,
    times: usize,
    max_len: usize,
) -> impl Strategy<Value = Vec<Quadruple>> {
    prop::collection::vec(
        (0..entities, 0..relations, 0..entities, 0..times),
        1..max_len,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(s, r, o, t)| Quadruple::new(s, r, o, t))
            .collect()
    })
}

fn split_at_thirds(mut all: Vec<Quadruple>, times: usize) -> Option<Dataset> {
    all.sort_by_key(|q| q.time);
    let (a, b) = (times / 3, 2 * times / 3);
    let train: Vec<_> = all.iter().copied().filter(|q| q.time < a).collect();
    let valid: Vec<_> = all
        .iter()
        .copied()
        .filter(|q| q.time >= a && q.time < b)
        .collect();
    let test: Vec<_> = all.iter().copied().filter(|q| q.time >= b).collect();
    Dataset::with_vocabulary("p", amcen::Vocabulary::new(6, 3, times), train, valid, test).ok()
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn quadruple_files_round_trip(facts in quads(50, 10, 40, 60), g in 1u64..100) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.txt");
        write_quadruples(&path, &facts, g).unwrap();
        prop_assert_eq!(load_quadruples(&path, g).unwrap(), facts);
    }

    #[test]
    fn frequency_index_matches_scan(facts in quads(6, 3, 8, 40), s in 0usize..6, r in 0usize..3, t in 0usize..9) {
        let mut index = FrequencyIndex::new(6);
        for time in 0..8 {
            let snap: Vec<_> = facts.iter().copied().filter(|q| q.time == time).collect();
            index.absorb(time, &snap).unwrap();
        }
        let freq = index.frequency_vector(s, r, t).unwrap();
        prop_assert_eq!(&freq, &frequency_oracle(&facts, 6, s, r, t));
        let his = index.historical_mask(s, r, t).unwrap();
        let nhis = index.nonhistorical_mask(s, r, t).unwrap();
        for o in 0..6 {
            prop_assert!(his.get(o) ^ nhis.get(o));
            prop_assert_eq!(his.get(o), freq[o] > 0);
        }
    }

    #[test]
    fn predictive_mask_is_one_of_the_two(freq in prop::collection::vec(0u32..3, 1..12), p in 0.0f64..1.0) {
        let m = predictive_mask(p, &freq);
        let his = MaskVector::from_bits(freq.iter().map(|&f| f > 0).collect());
        let want = if p > 0.5 { his.clone() } else { his.complement() };
        prop_assert_eq!(m, want);
    }

    #[test]
    fn statistics_match_pairwise_scan(facts in quads(6, 3, 9, 50)) {
        let Some(ds) = split_at_thirds(facts, 9) else { return Ok(()) };
        let report = dataset_statistics(&ds.augmented_snapshots(), 3);
        let all = ds.all_base();
        let per = new_event_counts(&all, 9);
        for row in &report.per_timestamp {
            prop_assert_eq!((row.events, row.new_events), per[row.time]);
        }
        let new: usize = per.iter().map(|p| p.1).sum();
        prop_assert_eq!(report.overall().new_events, new);
        prop_assert_eq!(report.overall().events, all.len());
        let split_total: usize = [Split::Train, Split::Valid, Split::Test].iter().map(|&s| report.split(s).events).sum();
        prop_assert_eq!(split_total, all.len());
    }

    #[test]
    fn rank_matches_full_sort(
        scores in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -5.0f64..5.0], 1..30),
        gt_seed in any::<usize>(),
        exclude_seed in prop::collection::vec(any::<usize>(), 0..5),
    ) {
        let gt = gt_seed % scores.len();
        let exclude: Vec<usize> = exclude_seed.iter().map(|e| e % scores.len()).filter(|&e| e != gt).collect();
        prop_assert_eq!(rank_of(&scores, gt), rank_oracle(&scores, gt, &[]));
        let f = filtered_rank(&scores, gt, &exclude);
        prop_assert_eq!(f, rank_oracle(&scores, gt, &exclude));
        prop_assert!(f <= rank_of(&scores, gt));
    }

    #[test]
    fn branch_distribution_is_restricted_softmax(
        logits in prop::collection::vec(-6.0f64..6.0, 1..20),
        bits_seed in prop::collection::vec(any::<bool>(), 20),
    ) {
        let mut bits: Vec<bool> = bits_seed[..logits.len()].to_vec();
        bits[0] = true;
        let d = branch_distribution(&logits, &MaskVector::from_bits(bits.clone()), Branch::Historical).unwrap();
        let want = restricted_softmax_oracle(&logits, &bits);
        for (a, b) in d.probabilities.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!((d.total() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn contrastive_loss_matches_double_loop(
        rows in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 3), 2..10),
        labels_seed in prop::collection::vec(any::<bool>(), 10),
        tau in 0.1f64..2.0,
    ) {
        let labels = &labels_seed[..rows.len()];
        let got = contrastive_loss(&matrix(&rows), labels, tau).unwrap();
        let want = supcon_oracle(&rows, labels, tau);
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn hits_are_monotone_and_filtered_never_worse(
        ranks in prop::collection::vec((1usize..40, 0usize..5, any::<bool>(), any::<bool>()), 1..60)
    ) {
        let results: Vec<RankResult> = ranks
            .iter()
            .enumerate()
            .map(|(i, &(rank, gain, subj, label))| RankResult {
                subject: i,
                relation: 0,
                object: 0,
                time: 0,
                direction: if subj { Direction::Subject } else { Direction::Object },
                label,
                predicted_label: true,
                prediction: 0,
                rank,
                filtered_rank: rank.saturating_sub(gain).max(1),
            })
            .collect();
        let report = metrics_of(&results);
        for row in &report.rows {
            prop_assert!(row.hits1 <= row.hits3 && row.hits3 <= row.hits10);
            prop_assert!(row.mrr <= 1.0 && (row.queries == 0 || row.mrr > 0.0));
        }
        for dir in ["obj", "subj", "mean"] {
            if let (Some(raw), Some(filt)) = (report.get(RankMode::Raw, dir), report.get(RankMode::Filtered, dir)) {
                prop_assert!(filt.mrr >= raw.mrr);
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-5f64..1.0,
        dim in 1usize..64,
        window in 1usize..8,
        beta in 0.0f64..1.0,
        lambda in 0.0f64..1.0,
        seed in any::<u64>(),
        flags in prop::collection::vec(any::<bool>(), 2),
    ) {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = lr;
        cfg.train.dim = dim;
        cfg.train.heads = 1;
        cfg.train.window = window;
        cfg.train.beta = beta;
        cfg.train.lambda = lambda;
        cfg.train.seed = seed;
        cfg.train.normalize_contrastive = flags[0];
        cfg.train.ablation.no_predictive_mask = flags[1];
        let back = RunConfig::from_ini_str(&cfg.to_ini_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
