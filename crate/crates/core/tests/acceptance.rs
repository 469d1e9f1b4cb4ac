//! One PASS/FAIL line per acceptance criterion, written straight to stdout so the lines
//! survive test-output capture.

mod common;

use std::io::Write;
use std::time::Instant;

use amcen::autograd::{Tape, Var};
use amcen::classifier::{contrastive_loss, predictive_mask};
use amcen::dataset::{dataset_statistics, default_data_root};
use amcen::decoder::{branch_distribution, Branch};
use amcen::evaluation::{evaluate_scored, rank_of, score_split, MaskPolicy, RankMode};
use amcen::model::{QueryBatch, Rollout};
use amcen::synthetic::{random_tkg, recurrence_fixture, RecurrenceSpec};
use amcen::training::{classifier_accuracy, stage1_train, stage2_train};
use amcen::{
    Amcen, Dataset, FrequencyIndex, MaskVector, ModelShape, ParamGroup, ParameterStore, Quadruple,
    Split, TrainConfig,
};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(criterion: u8, pass: Option<bool>, detail: String) {
    let verdict = match pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance {verdict} C{criterion}: {detail}").unwrap();
    out.flush().unwrap();
}

fn shape_of(ds: &Dataset) -> ModelShape {
    ModelShape {
        entity_count: ds.vocab.entity_count,
        base_relation_count: ds.vocab.base_relation_count,
        time_count: ds.boundaries().valid_start,
    }
}

struct Benchmark {
    name: &'static str,
    granularity: u64,
    entities: usize,
    relations: usize,
    granules: usize,
    sizes: [usize; 3],
    /// New-event percentages: train, valid, test, all.
    new_pct: [f64; 4],
}

const BENCHMARKS: [Benchmark; 4] = [
    Benchmark {
        name: "YAGO",
        granularity: 1,
        entities: 10623,
        relations: 10,
        granules: 189,
        sizes: [161_540, 19_523, 20_026],
        new_pct: [10.31, 11.31, 7.21, 10.10],
    },
    Benchmark {
        name: "WIKI",
        granularity: 1,
        entities: 12_554,
        relations: 24,
        granules: 232,
        sizes: [539_286, 67_538, 63_110],
        new_pct: [2.81, 14.61, 12.88, 4.95],
    },
    Benchmark {
        name: "ICEWS18",
        granularity: 24,
        entities: 23_033,
        relations: 256,
        granules: 304,
        sizes: [373_018, 45_995, 49_545],
        new_pct: [39.39, 29.37, 29.68, 37.38],
    },
    Benchmark {
        name: "GDELT",
        granularity: 15,
        entities: 7_691,
        relations: 240,
        granules: 2_751,
        sizes: [1_734_399, 238_765, 305_241],
        new_pct: [17.81, 10.82, 10.39, 16.08],
    },
];

#[test]
fn c1_dataset_statistics_regression() {
    let Some(root) = default_data_root() else {
        report(
            1,
            None,
            "AMCEN_DATA_DIR unset; substituted by the oracle equivalence suite (C3)".into(),
        );
        return;
    };
    let mut failures = Vec::new();
    let mut checked = 0;
    for b in &BENCHMARKS {
        let dir = root.join(b.name);
        if !dir.is_dir() {
            continue;
        }
        checked += 1;
        let t0 = Instant::now();
        let ds = Dataset::load_dir(&dir, b.granularity).unwrap();
        let stats = dataset_statistics(&ds.augmented_snapshots(), ds.vocab.base_relation_count);
        let seq_len = ds.vocab.time_count;
        let sizes = [ds.train.len(), ds.valid.len(), ds.test.len()];
        if ds.vocab.entity_count != b.entities || ds.vocab.base_relation_count != b.relations {
            failures.push(format!(
                "{}: vocabulary {}x{}",
                b.name, ds.vocab.entity_count, ds.vocab.base_relation_count
            ));
        }
        if seq_len != b.granules || sizes != b.sizes {
            failures.push(format!("{}: granules {seq_len}, sizes {sizes:?}", b.name));
        }
        let got = [
            stats.split(Split::Train).proportion,
            stats.split(Split::Valid).proportion,
            stats.split(Split::Test).proportion,
            stats.overall().proportion,
        ];
        for (g, want) in got.iter().zip(b.new_pct) {
            if (g * 100.0 - want).abs() > 0.5 {
                failures.push(format!(
                    "{}: new-event share {:.2}% vs {want}%",
                    b.name,
                    g * 100.0
                ));
            }
        }
        if t0.elapsed().as_secs() >= 300 {
            failures.push(format!("{}: took {:?}", b.name, t0.elapsed()));
        }
    }
    if checked == 0 {
        report(
            1,
            None,
            format!("no benchmark under {}; substituted by C3", root.display()),
        );
        return;
    }
    report(
        1,
        Some(failures.is_empty()),
        format!("{checked} benchmark(s) checked; {failures:?}"),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn c2_mask_algebra() {
    let t0 = Instant::now();
    let ds = random_tkg(30, 5, 40, 25, 0.6, 21).unwrap();
    let seq = ds.augmented_snapshots();
    let facts: Vec<Quadruple> = seq.snapshots().iter().flatten().copied().collect();
    let e = ds.vocab.entity_count;
    let mut index = FrequencyIndex::new(e);
    for t in 0..seq.len() {
        index.absorb(t, seq.snapshot(t)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut failures = 0usize;
    let trials = 10_000;
    for _ in 0..trials {
        let (s, r, t) = (
            rng.gen_range(0..e),
            rng.gen_range(0..ds.vocab.augmented_relation_count() - 1),
            rng.gen_range(0..=seq.len()),
        );
        let his = index.historical_mask(s, r, t).unwrap();
        let nhis = index.nonhistorical_mask(s, r, t).unwrap();
        let sums_to_one = his
            .bits()
            .iter()
            .zip(nhis.bits())
            .all(|(&a, &b)| a as u8 + b as u8 == 1);
        let freq = index.frequency_vector(s, r, t).unwrap();
        let pm = predictive_mask(rng.gen::<f64>(), &freq);
        let exactly_one = (pm == his) != (pm == nhis);
        let o = rng.gen_range(0..e);
        let q = Quadruple::new(s, r, o, t.min(seq.len() - 1));
        let label_ok = index.event_label(&q).unwrap() == recurrence_oracle(&facts, &q);
        if !(sums_to_one && exactly_one && label_ok) {
            failures += 1;
        }
    }
    report(
        2,
        Some(failures == 0),
        format!(
            "{failures} failures in {trials} random queries ({:?})",
            t0.elapsed()
        ),
    );
    assert_eq!(failures, 0);
}

#[test]
fn c3_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instances = 150;
    let (mut freq_bad, mut stats_bad, mut rank_bad) = (0usize, 0usize, 0usize);
    let (mut supcon_dev, mut branch_dev) = (0.0f64, 0.0f64);
    for k in 0..instances {
        let ds = random_tkg(6, 3, 9, 6, 0.5, k as u64).unwrap();
        let seq = ds.augmented_snapshots();
        let facts: Vec<Quadruple> = seq.snapshots().iter().flatten().copied().collect();
        let mut index = FrequencyIndex::new(6);
        for t in 0..seq.len() {
            index.absorb(t, seq.snapshot(t)).unwrap();
        }
        let (s, r, t) = (
            rng.gen_range(0..6),
            rng.gen_range(0..6),
            rng.gen_range(0..=seq.len()),
        );
        freq_bad += (index.frequency_vector(s, r, t).unwrap()
            != frequency_oracle(&facts, 6, s, r, t)) as usize;

        let stats = dataset_statistics(&seq, 3);
        let per = new_event_counts(&ds.all_base(), seq.len());
        stats_bad += stats
            .per_timestamp
            .iter()
            .any(|row| (row.events, row.new_events) != per[row.time]) as usize;

        let n = rng.gen_range(2..9);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let tau = rng.gen_range(0.1..1.0);
        let got = contrastive_loss(&matrix(&rows), &labels, tau).unwrap();
        supcon_dev = supcon_dev.max((got - supcon_oracle(&rows, &labels, tau)).abs());

        let len = rng.gen_range(1..25);
        let scores: Vec<f64> = (0..len)
            .map(|_| f64::from(rng.gen_range(-4i32..4)) * 0.5)
            .collect();
        let gt = rng.gen_range(0..len);
        rank_bad += (rank_of(&scores, gt) != rank_oracle(&scores, gt, &[])) as usize;

        let logits: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut bits: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
        bits[gt] = true;
        let d = branch_distribution(
            &logits,
            &MaskVector::from_bits(bits.clone()),
            Branch::NonHistorical,
        )
        .unwrap();
        for (a, b) in d
            .probabilities
            .iter()
            .zip(restricted_softmax_oracle(&logits, &bits))
        {
            branch_dev = branch_dev.max((a - b).abs());
        }
    }
    let pass = freq_bad == 0
        && stats_bad == 0
        && rank_bad == 0
        && supcon_dev <= 1e-9
        && branch_dev <= 1e-9;
    report(
        3,
        Some(pass),
        format!(
            "{instances} instances each: frequency mismatches {freq_bad}, statistics mismatches {stats_bad}, \
             rank mismatches {rank_bad}, contrastive max dev {supcon_dev:.2e}, branch max dev {branch_dev:.2e} ({:?})",
            t0.elapsed()
        ),
    );
    assert!(pass);
}

/// Loss closure over a fixed rollout state, re-evaluated for every perturbation.
fn toy_losses(
    model: &Amcen,
    store: &ParameterStore<f64>,
    ds: &Dataset,
    time: usize,
) -> (Tape<f64>, [Var; 4]) {
    let seq = ds.augmented_snapshots();
    let mut roll = Rollout::new(model.shape.entity_count, model.config.window);
    roll.skip_to(model, &seq, time).unwrap();
    let batch = QueryBatch::build(seq.snapshot(time), roll.index(), time).unwrap();
    let mut probe = Amcen::from_store(model.config.clone(), model.shape, store.clone()).unwrap();
    probe.store.unfreeze_all();
    let mut tape = Tape::new();
    let (loss, xe, xr) = probe
        .batch_loss_on_tape(
            &mut tape,
            roll.prev_graph(&seq).as_ref(),
            roll.state(),
            &batch,
            None::<&mut ChaCha8Rng>,
        )
        .unwrap();
    let (_, v) = probe.queries_on_tape(&mut tape, xe, xr, &batch).unwrap();
    let z = probe.classifier.logits_on_tape(&mut tape, &probe.store, v);
    let bce = tape.bce_with_logits(
        z,
        batch
            .labels
            .iter()
            .map(|&l| if l { 1.0 } else { 0.0 })
            .collect(),
    );
    (
        tape,
        [
            loss.multiclass,
            loss.contrastive.expect("λ < 1"),
            loss.total,
            bce,
        ],
    )
}

#[test]
fn c4_gradient_verification() {
    let t0 = Instant::now();
    let ds = random_tkg(6, 2, 8, 10, 0.5, 17).unwrap();
    let cfg = TrainConfig {
        dim: 4,
        layers: 2,
        window: 3,
        heads: 1,
        dropout: 0.0,
        batch_size: 1000,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = Amcen::new(cfg, shape_of(&ds)).unwrap();
    let time = 5;
    let seq = ds.augmented_snapshots();
    let batch = {
        let mut roll = Rollout::new(6, 3);
        roll.skip_to(&model, &seq, time).unwrap();
        QueryBatch::build(seq.snapshot(time), roll.index(), time).unwrap()
    };
    assert!(
        batch.labels.iter().any(|&l| l) && batch.labels.iter().any(|&l| !l),
        "need both event types"
    );

    let names = ["multiclass", "contrastive", "total", "classifier bce"];
    let (tape, vars) = toy_losses(&model, &model.store, &ds, time);
    let mut worst = vec![(0.0f64, String::new()); 4];
    let h = 1e-6;
    for (li, &var) in vars.iter().enumerate() {
        let grads = tape.backward(var);
        for group in ParamGroup::ALL {
            // the classifier enters only through the binary objective
            if (group == ParamGroup::Classifier) != (li == 3) {
                continue;
            }
            let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
            for id in model.store.ids_in(group) {
                let analytic = grads.get(id).cloned().unwrap_or_else(|| {
                    amcen::Matrix::zeros(model.store.value(id).rows(), model.store.value(id).cols())
                });
                for k in 0..analytic.data().len() {
                    let mut store = model.store.clone();
                    let orig = store.value(id).data()[k];
                    store.value_mut(id).data_mut()[k] = orig + h;
                    let up = {
                        let (t, v) = toy_losses(&model, &store, &ds, time);
                        t.value(v[li]).item()
                    };
                    store.value_mut(id).data_mut()[k] = orig - h;
                    let down = {
                        let (t, v) = toy_losses(&model, &store, &ds, time);
                        t.value(v[li]).item()
                    };
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic.data()[k];
                    diff += (a - fd).powi(2);
                    na += a * a;
                    nf += fd * fd;
                }
            }
            let rel = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12);
            if rel >= worst[li].0 {
                worst[li] = (rel, format!("{group}"));
            }
        }
    }
    let pass = worst.iter().all(|(r, _)| *r < 1e-4);
    let detail: Vec<String> = names
        .iter()
        .zip(&worst)
        .map(|(n, (r, g))| format!("{n} {r:.1e} ({g})"))
        .collect();
    report(
        4,
        Some(pass),
        format!(
            "worst relative error per loss: {} ({:?})",
            detail.join(", "),
            t0.elapsed()
        ),
    );
    assert!(pass);
}

fn overfit_config(no_attention_mask: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        dim: 32,
        heads: 4,
        learning_rate: 0.01,
        normalize_contrastive: true,
        select_by_validation: false,
        stage1_epochs: 30,
        stage2_epochs: 20,
        ..TrainConfig::default()
    };
    cfg.ablation.no_attention_mask = no_attention_mask;
    cfg
}

fn train_hits1(model: &Amcen, ds: &Dataset) -> f64 {
    let scored = score_split(model, &ds.augmented_snapshots(), &ds.vocab, Split::Train).unwrap();
    let policy = MaskPolicy::from_ablation(&model.config.ablation);
    let (_, report) = evaluate_scored(&scored, policy, None);
    report.get(RankMode::Raw, "mean").unwrap().hits1
}

#[test]
fn c5_overfit_and_mask_ablation() {
    let t0 = Instant::now();
    let ds = recurrence_fixture(RecurrenceSpec::default()).unwrap();
    let mut full = Amcen::new(overfit_config(false), shape_of(&ds)).unwrap();
    stage1_train(&mut full, &ds, &mut ()).unwrap();
    stage2_train(&mut full, &ds, &mut ()).unwrap();
    let hits_full = train_hits1(&full, &ds);
    let accuracy = classifier_accuracy(&full, &ds, Split::Train).unwrap();

    let mut ablated = Amcen::new(overfit_config(true), shape_of(&ds)).unwrap();
    stage1_train(&mut ablated, &ds, &mut ()).unwrap();
    stage2_train(&mut ablated, &ds, &mut ()).unwrap();
    let hits_ablated = train_hits1(&ablated, &ds);

    let elapsed = t0.elapsed();
    let pass =
        hits_full >= 0.9 && accuracy >= 0.95 && hits_ablated < hits_full && elapsed.as_secs() < 600;
    report(
        5,
        Some(pass),
        format!(
            "train Hits@1 {hits_full:.4} (>= 0.9), classifier accuracy {accuracy:.4} (>= 0.95), \
             w/o attention masks Hits@1 {hits_ablated:.4} (< full) ({elapsed:?})"
        ),
    );
    assert!(pass);
}

#[test]
fn c6_freezing_contract() {
    let ds = recurrence_fixture(RecurrenceSpec::default()).unwrap();
    let cfg = TrainConfig {
        dim: 8,
        heads: 2,
        stage1_epochs: 2,
        stage2_epochs: 3,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    let mut model = Amcen::new(cfg, shape_of(&ds)).unwrap();
    stage1_train(&mut model, &ds, &mut ()).unwrap();
    let after_stage1 = model.store.clone();
    stage2_train(&mut model, &ds, &mut ()).unwrap();
    let mut changed_backbone = Vec::new();
    let mut classifier_moved = false;
    for ((_, a), (_, b)) in after_stage1.iter().zip(model.store.iter()) {
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if a.group == ParamGroup::Classifier {
            classifier_moved |= !same;
        } else if !same {
            changed_backbone.push(a.name.clone());
        }
    }
    let pass = changed_backbone.is_empty() && classifier_moved;
    report(
        6,
        Some(pass),
        format!("non-classifier tensors changed by stage 2: {changed_backbone:?}; classifier updated: {classifier_moved}"),
    );
    assert!(pass);
}

#[test]
#[ignore = "needs the YAGO benchmark under $AMCEN_DATA_DIR and a long run"]
fn c7_reduced_yago_run() {
    let Some(dir) = default_data_root()
        .map(|r| r.join("YAGO"))
        .filter(|d| d.is_dir())
    else {
        report(7, None, "YAGO not found under $AMCEN_DATA_DIR".into());
        return;
    };
    let ds = Dataset::load_dir(&dir, 1).unwrap();
    let cfg = TrainConfig {
        dim: 64,
        heads: 4,
        stage1_epochs: 10,
        stage2_epochs: 10,
        ..TrainConfig::default()
    };
    let mut model = Amcen::new(cfg, shape_of(&ds)).unwrap();
    stage1_train(&mut model, &ds, &mut ()).unwrap();
    stage2_train(&mut model, &ds, &mut ()).unwrap();
    let scored = score_split(&model, &ds.augmented_snapshots(), &ds.vocab, Split::Valid).unwrap();
    let mrr = |p: MaskPolicy| {
        evaluate_scored(&scored, p, None)
            .1
            .get(RankMode::Raw, "mean")
            .unwrap()
            .mrr
    };
    let (gt, pm, off) = (
        mrr(MaskPolicy::GroundTruth),
        mrr(MaskPolicy::Predicted),
        mrr(MaskPolicy::Off),
    );
    // expected reciprocal rank of a uniformly random ranking
    let e = ds.vocab.entity_count as f64;
    let random = (1..=ds.vocab.entity_count)
        .map(|k| 1.0 / k as f64)
        .sum::<f64>()
        / e;
    let pass = pm >= 10.0 * random && gt >= pm && pm >= off;
    report(
        7,
        Some(pass),
        format!("validation MRR: ground-truth mask {gt:.4} >= predicted {pm:.4} >= none {off:.4}; random {random:.5}"),
    );
    assert!(pass);
}
