//! Two-stage optimisation: the joint ranking/contrastive objective, then the event classifier.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::{Dataset, SnapshotSequence, Split};
use crate::error::{AmcenError, Result};
use crate::evaluation::{evaluate_scored, score_split, MaskPolicy, RankMode};
use crate::model::{Model, Rollout};
use crate::optim::Adam;
use crate::params::{ParamGroup, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub val_mrr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mrr: Option<f64>,
}

/// Receives each epoch record as soon as it is produced.
pub trait EpochSink {
    fn record(&mut self, entry: &EpochLog) -> Result<()>;
}

impl EpochSink for () {
    fn record(&mut self, _: &EpochLog) -> Result<()> {
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> EpochSink for JsonLines<W> {
    fn record(&mut self, entry: &EpochLog) -> Result<()> {
        serde_json::to_writer(&mut self.0, entry)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn shuffle_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stage + 1)))
}

/// Runs one stage-1 epoch and returns the query-weighted mean of the total loss.
pub fn stage1_epoch<T: Scalar>(
    model: &mut Model<T>,
    seq: &SnapshotSequence,
    optimizer: &mut Adam<T>,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<f64> {
    let mut roll = Rollout::new(model.shape.entity_count, model.config.window);
    let (mut loss_sum, mut count) = (0.0, 0usize);
    for t in seq.times_of(Split::Train) {
        let prev = roll.prev_graph(seq);
        let mut queries = seq.snapshot(t).to_vec();
        queries.shuffle(rng);
        let mut latest = None;
        for (b, batch) in roll
            .batches(&queries, model.config.batch_size)?
            .into_iter()
            .enumerate()
        {
            let mut tape = Tape::new();
            let (loss, xe, xr) = model.batch_loss_on_tape(
                &mut tape,
                prev.as_ref(),
                roll.state(),
                &batch,
                Some(&mut *rng),
            )?;
            let value = tape.value(loss.total).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(AmcenError::NonFiniteLoss {
                    epoch,
                    time: t,
                    batch: b,
                    value,
                });
            }
            loss_sum += value * batch.len() as f64;
            count += batch.len();
            let grads = tape.backward(loss.total);
            optimizer.step(&mut model.store, &grads)?;
            latest = Some((tape.value(xe).clone(), tape.value(xr).clone()));
        }
        let (xe, xr) = match latest {
            Some(x) => x,
            None => model.encode_time(prev.as_ref(), roll.state())?,
        };
        roll.advance(seq, xe, xr)?;
    }
    Ok(if count == 0 {
        0.0
    } else {
        loss_sum / count as f64
    })
}

/// Mean-direction MRR on the validation split without a predictive mask.
fn validation_mrr<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    seq: &SnapshotSequence,
    policy: MaskPolicy,
) -> Result<Option<f64>> {
    if dataset.valid.is_empty() {
        return Ok(None);
    }
    let scored = score_split(model, seq, &dataset.vocab, Split::Valid)?;
    let (_, report) = evaluate_scored(&scored, policy, None);
    Ok(report.get(RankMode::Raw, "mean").map(|r| r.mrr))
}

/// Minimises `λ·L_mc + (1 − λ)·L_bc` over every group except the classifier.
///
/// With `select_by_validation`, the parameters of the epoch with the best validation MRR
/// are restored at the end.
pub fn stage1_train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    sink: &mut dyn EpochSink,
) -> Result<StageOutcome> {
    let seq = dataset.augmented_snapshots();
    model.store.unfreeze_all();
    model.store.set_frozen(ParamGroup::Classifier, true);
    let cfg = model.config.clone();
    let mut optimizer = Adam::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        model.store.len(),
    );
    let mut rng = shuffle_rng(cfg.seed, 1);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore<T>)> = None;
    for epoch in 0..cfg.stage1_epochs {
        let loss = stage1_epoch(model, &seq, &mut optimizer, &mut rng, epoch)?;
        let val_mrr = if cfg.select_by_validation {
            validation_mrr(model, dataset, &seq, MaskPolicy::Off)?
        } else {
            None
        };
        if let Some(mrr) = val_mrr {
            if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                best = Some((mrr, epoch, model.store.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            stage: 1,
            loss,
            val_mrr,
        };
        log::info!("stage 1 epoch {epoch}: loss {loss:.6} val_mrr {val_mrr:?}");
        sink.record(&entry)?;
        log.push(entry);
    }
    model.store.unfreeze_all();
    let last = cfg.stage1_epochs.saturating_sub(1);
    Ok(match best {
        Some((mrr, epoch, store)) => {
            model.store.copy_values_from(&store)?;
            StageOutcome {
                log,
                best_epoch: epoch,
                best_val_mrr: Some(mrr),
            }
        }
        None => StageOutcome {
            log,
            best_epoch: last,
            best_val_mrr: None,
        },
    })
}

/// Trains only the classifier, with binary cross-entropy against the event labels, on
/// representations produced by the frozen backbone.
pub fn stage2_train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &Dataset,
    sink: &mut dyn EpochSink,
) -> Result<StageOutcome> {
    let seq = dataset.augmented_snapshots();
    let cfg = model.config.clone();
    model.store.freeze_all_except(ParamGroup::Classifier);
    let train = score_split(model, &seq, &dataset.vocab, Split::Train)?;
    let valid = if cfg.select_by_validation && !dataset.valid.is_empty() {
        score_split(model, &seq, &dataset.vocab, Split::Valid)?
    } else {
        Vec::new()
    };
    let d = model.config.dim;
    let reps = Matrix::from_vec(
        train.len(),
        d,
        train
            .iter()
            .flat_map(|s| s.representation.iter().copied())
            .collect(),
    )?;
    let valid_reps = Matrix::from_vec(
        valid.len(),
        d,
        valid
            .iter()
            .flat_map(|s| s.representation.iter().copied())
            .collect(),
    )?;
    let targets: Vec<T> = train
        .iter()
        .map(|s| if s.recurring { T::one() } else { T::zero() })
        .collect();

    let mut optimizer = Adam::new(
        cfg.optimizer,
        cfg.learning_rate,
        cfg.weight_decay,
        model.store.len(),
    );
    let mut rng = shuffle_rng(cfg.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore<T>)> = None;
    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let v = tape.constant(reps.gather_rows(chunk));
            let z = model.classifier.logits_on_tape(&mut tape, &model.store, v);
            let loss = tape.bce_with_logits(z, chunk.iter().map(|&i| targets[i]).collect());
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(AmcenError::NonFiniteLoss {
                    epoch,
                    time: 0,
                    batch: count / cfg.batch_size.max(1),
                    value,
                });
            }
            loss_sum += value * chunk.len() as f64;
            count += chunk.len();
            let grads = tape.backward(loss);
            optimizer.step(&mut model.store, &grads)?;
        }
        let loss = if count == 0 {
            0.0
        } else {
            loss_sum / count as f64
        };
        let val_mrr = if valid.is_empty() {
            None
        } else {
            let probs = model.classifier.probabilities(&model.store, &valid_reps);
            let (_, report) = evaluate_scored(&valid, MaskPolicy::Predicted, Some(&probs));
            report.get(RankMode::Raw, "mean").map(|r| r.mrr)
        };
        if let Some(mrr) = val_mrr {
            if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                best = Some((mrr, epoch, model.store.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            stage: 2,
            loss,
            val_mrr,
        };
        log::info!("stage 2 epoch {epoch}: loss {loss:.6} val_mrr {val_mrr:?}");
        sink.record(&entry)?;
        log.push(entry);
    }
    let last = cfg.stage2_epochs.saturating_sub(1);
    let outcome = match best {
        Some((mrr, epoch, store)) => {
            // only classifier values differ between snapshots of this stage
            model.store.unfreeze_all();
            model.store.copy_values_from(&store)?;
            StageOutcome {
                log,
                best_epoch: epoch,
                best_val_mrr: Some(mrr),
            }
        }
        None => StageOutcome {
            log,
            best_epoch: last,
            best_val_mrr: None,
        },
    };
    model.store.unfreeze_all();
    Ok(outcome)
}

/// Fraction of `split` queries whose event type the classifier gets right.
pub fn classifier_accuracy<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    split: Split,
) -> Result<f64> {
    let seq = dataset.augmented_snapshots();
    let scored = score_split(model, &seq, &dataset.vocab, split)?;
    let (_, report) = evaluate_scored(&scored, MaskPolicy::Predicted, None);
    Ok(report
        .get(RankMode::Raw, "mean")
        .map_or(0.0, |r| r.classifier_accuracy))
}
