//! Classify-then-rank inference and link prediction metrics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{is_recurring, predictive_mask};
use crate::config::AblationFlags;
use crate::dataset::{Quadruple, SnapshotSequence, Split, Vocabulary};
use crate::decoder::{
    branch_distribution, branch_distribution_literal, combine, Branch, ScoreDistribution,
};
use crate::error::{AmcenError, Result};
use crate::history::MaskVector;
use crate::model::{Model, Rollout};
use crate::scalar::Scalar;
use crate::tensor::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    Raw,
    Filtered,
}

impl std::str::FromStr for RankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Self::Raw),
            "filtered" => Ok(Self::Filtered),
            other => Err(format!("unknown rank mode {other:?}")),
        }
    }
}

impl std::fmt::Display for RankMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::Filtered => "filtered",
        })
    }
}

/// Object queries `(s, r, ?)` use base relations; subject queries `(o, r⁻¹, ?)` use inverses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "obj")]
    Object,
    #[serde(rename = "subj")]
    Subject,
}

impl Direction {
    pub fn of(relation: usize, vocab_base_relations: usize) -> Self {
        if relation < vocab_base_relations {
            Self::Object
        } else {
            Self::Subject
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Object => "obj",
            Self::Subject => "subj",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "obj" | "object" => Ok(Self::Object),
            "subj" | "subject" => Ok(Self::Subject),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

/// Which mask multiplies the final distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Chosen by the binary classifier.
    Predicted,
    /// Chosen by the true event type.
    GroundTruth,
    Off,
}

impl MaskPolicy {
    pub fn from_ablation(a: &AblationFlags) -> Self {
        if a.no_attention_mask || a.no_predictive_mask {
            Self::Off
        } else if a.gt_predictive_mask {
            Self::GroundTruth
        } else {
            Self::Predicted
        }
    }
}

/// The decoder's final distribution before any predictive mask.
pub fn decoder_distribution<T: Scalar>(
    logits: &[T],
    historical: &MaskVector,
    a: &AblationFlags,
) -> Result<ScoreDistribution<T>> {
    let n = logits.len();
    if a.no_attention_mask {
        return Ok(ScoreDistribution {
            probabilities: softmax(logits),
            support: MaskVector::ones(n),
            branch: Branch::Combined,
        });
    }
    let nonhistorical = historical.complement();
    let branch = |mask: &MaskVector, tag: Branch| -> Result<ScoreDistribution<T>> {
        if a.literal_eq13 {
            return Ok(branch_distribution_literal(logits, mask, tag));
        }
        match branch_distribution(logits, mask, tag) {
            Err(AmcenError::EmptySupport) => Ok(ScoreDistribution::empty(n, tag)),
            other => other,
        }
    };
    if a.his_only {
        return branch(historical, Branch::Historical);
    }
    if a.nonhis_only {
        return branch(&nonhistorical, Branch::NonHistorical);
    }
    combine(
        &branch(historical, Branch::Historical)?,
        &branch(&nonhistorical, Branch::NonHistorical)?,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub distribution: ScoreDistribution<T>,
    pub prediction: usize,
    pub recurrence: T,
    pub predicted_recurring: bool,
    /// The masked distribution was all zero and the unmasked one was used instead.
    pub fell_back: bool,
}

/// `P ⊙ M` with the unmasked `P` as fallback when nothing survives the mask.
pub fn apply_mask<T: Scalar>(
    p: &ScoreDistribution<T>,
    mask: Option<&MaskVector>,
) -> (ScoreDistribution<T>, bool) {
    let Some(mask) = mask else {
        return (p.clone(), false);
    };
    let probabilities: Vec<T> = p
        .probabilities
        .iter()
        .zip(mask.bits())
        .map(|(&x, &m)| if m { x } else { T::zero() })
        .collect();
    if probabilities.iter().all(|&x| x == T::zero()) {
        log::debug!(
            "predictive mask removed all probability mass; using the unmasked distribution"
        );
        return (p.clone(), true);
    }
    let support = MaskVector::from_bits(
        p.support
            .bits()
            .iter()
            .zip(mask.bits())
            .map(|(&a, &b)| a && b)
            .collect(),
    );
    (
        ScoreDistribution {
            probabilities,
            support,
            branch: p.branch,
        },
        false,
    )
}

/// Two-stage inference for one query from its decoder logits and frequency vector.
pub fn infer<T: Scalar>(
    logits: &[T],
    freq: &[u32],
    recurrence: T,
    policy: MaskPolicy,
    ground_truth_recurring: Option<bool>,
    ablation: &AblationFlags,
) -> Result<Inference<T>> {
    if logits.len() != freq.len() {
        return Err(AmcenError::dims(
            "logits and frequency vector differ in length",
        ));
    }
    let historical = MaskVector::from_bits(freq.iter().map(|&f| f > 0).collect());
    let p = decoder_distribution(logits, &historical, ablation)?;
    let mask = match policy {
        MaskPolicy::Off => None,
        MaskPolicy::Predicted => Some(predictive_mask(recurrence, freq)),
        MaskPolicy::GroundTruth => {
            let recurring = ground_truth_recurring.ok_or_else(|| {
                AmcenError::Validation("ground-truth mask requested without a label".into())
            })?;
            Some(if recurring {
                historical.clone()
            } else {
                historical.complement()
            })
        }
    };
    let (distribution, fell_back) = apply_mask(&p, mask.as_ref());
    Ok(Inference {
        prediction: distribution.argmax(),
        distribution,
        recurrence,
        predicted_recurring: is_recurring(recurrence),
        fell_back,
    })
}

/// `1 + #{strictly greater} + #{equal with a smaller id}`.
pub fn rank_of<T: Scalar>(scores: &[T], gt: usize) -> usize {
    filtered_rank(scores, gt, &[])
}

/// As [`rank_of`], ignoring entities listed in `exclude` (other true answers).
pub fn filtered_rank<T: Scalar>(scores: &[T], gt: usize, exclude: &[usize]) -> usize {
    let g = scores[gt];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(o, &x)| o != gt && !exclude.contains(&o) && (x > g || (x == g && o < gt)))
        .count()
}

/// Raw and filtered ranks of one query under one mask choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedRank {
    pub raw: usize,
    pub filtered: usize,
    pub prediction: usize,
    pub fell_back: bool,
}

impl MaskedRank {
    pub fn get(&self, mode: RankMode) -> usize {
        match mode {
            RankMode::Raw => self.raw,
            RankMode::Filtered => self.filtered,
        }
    }
}

/// A query scored by the frozen backbone. The predictive mask only ever picks one of the two
/// pools, so ranks are kept for each pool and for no mask; the classifier then just chooses.
#[derive(Clone, Debug)]
pub struct ScoredQuery<T> {
    pub query: Quadruple,
    pub direction: Direction,
    pub recurring: bool,
    pub representation: Vec<T>,
    pub recurrence: T,
    pub unmasked: MaskedRank,
    pub historical: MaskedRank,
    pub nonhistorical: MaskedRank,
}

impl<T: Scalar> ScoredQuery<T> {
    /// Ranks under `policy`, with `recurrence` standing in for the classifier output.
    pub fn ranked(&self, policy: MaskPolicy, recurrence: T) -> &MaskedRank {
        let pick = |recurring: bool| {
            if recurring {
                &self.historical
            } else {
                &self.nonhistorical
            }
        };
        match policy {
            MaskPolicy::Off => &self.unmasked,
            MaskPolicy::GroundTruth => pick(self.recurring),
            MaskPolicy::Predicted => pick(is_recurring(recurrence)),
        }
    }
}

fn masked_rank<T: Scalar>(
    p: &ScoreDistribution<T>,
    mask: Option<&MaskVector>,
    gt: usize,
    exclude: &[usize],
) -> MaskedRank {
    let (d, fell_back) = apply_mask(p, mask);
    MaskedRank {
        raw: rank_of(&d.probabilities, gt),
        filtered: filtered_rank(&d.probabilities, gt, exclude),
        prediction: d.argmax(),
        fell_back,
    }
}

/// Scores every query of `split` (both directions) in evaluation mode, rolling the
/// history forward through earlier timestamps and absorbing each timestamp after scoring it.
pub fn score_split<T: Scalar>(
    model: &Model<T>,
    seq: &SnapshotSequence,
    vocab: &Vocabulary,
    split: Split,
) -> Result<Vec<ScoredQuery<T>>> {
    let times = seq.times_of(split);
    let mut roll = Rollout::new(model.shape.entity_count, model.config.window);
    roll.skip_to(model, seq, times.start)?;
    let e = model.shape.entity_count;
    let ablation = model.config.ablation;
    let mut out = Vec::new();
    for t in times {
        let (xe, xr) = model.encode_time(roll.prev_graph(seq).as_ref(), roll.state())?;
        let facts = seq.snapshot(t);
        let mut answers: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for q in facts {
            answers
                .entry((q.subject, q.relation))
                .or_default()
                .push(q.object);
        }
        for batch in roll.batches(facts, model.config.batch_size)? {
            let scores = model.score_queries(&xe, &xr, &batch)?;
            let scored: Vec<ScoredQuery<T>> = (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let q = batch.queries[i];
                    let historical = batch.historical_mask(i, e);
                    let p = decoder_distribution(scores.logits.row(i), &historical, &ablation)?;
                    let exclude: Vec<usize> = answers[&(q.subject, q.relation)]
                        .iter()
                        .copied()
                        .filter(|&o| o != q.object)
                        .collect();
                    let nonhistorical = historical.complement();
                    Ok(ScoredQuery {
                        query: q,
                        direction: Direction::of(q.relation, vocab.base_relation_count),
                        recurring: batch.labels[i],
                        representation: scores.representations.row(i).to_vec(),
                        recurrence: scores.recurrence[i],
                        unmasked: masked_rank(&p, None, q.object, &exclude),
                        historical: masked_rank(&p, Some(&historical), q.object, &exclude),
                        nonhistorical: masked_rank(&p, Some(&nonhistorical), q.object, &exclude),
                    })
                })
                .collect::<Result<_>>()?;
            out.extend(scored);
        }
        roll.advance(seq, xe, xr)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: RankMode,
    /// `obj`, `subj` or `mean`.
    pub direction: &'static str,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub classifier_accuracy: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn get(&self, mode: RankMode, direction: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.direction == direction)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows)?)
    }
}

/// Per-query outcome under one mask policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankResult {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
    pub direction: Direction,
    pub label: bool,
    pub predicted_label: bool,
    pub prediction: usize,
    pub rank: usize,
    pub filtered_rank: usize,
}

fn summarize(ranks: &[(usize, bool)], mode: RankMode, direction: &'static str) -> MetricsRow {
    let n = ranks.len().max(1) as f64;
    let frac = |k: usize| ranks.iter().filter(|(r, _)| *r <= k).count() as f64 / n;
    MetricsRow {
        mode,
        direction,
        mrr: ranks.iter().map(|(r, _)| 1.0 / *r as f64).sum::<f64>() / n,
        hits1: frac(1),
        hits3: frac(3),
        hits10: frac(10),
        classifier_accuracy: ranks.iter().filter(|(_, ok)| *ok).count() as f64 / n,
        queries: ranks.len(),
    }
}

/// Metrics for already-scored queries; `recurrence` overrides the stored classifier outputs.
pub fn evaluate_scored<T: Scalar>(
    scored: &[ScoredQuery<T>],
    policy: MaskPolicy,
    recurrence: Option<&[T]>,
) -> (Vec<RankResult>, MetricsReport) {
    let mut fallbacks = 0usize;
    let results: Vec<RankResult> = scored
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let p = recurrence.map_or(s.recurrence, |r| r[i]);
            let m = s.ranked(policy, p);
            fallbacks += m.fell_back as usize;
            RankResult {
                subject: s.query.subject,
                relation: s.query.relation,
                object: s.query.object,
                time: s.query.time,
                direction: s.direction,
                label: s.recurring,
                predicted_label: is_recurring(p),
                prediction: m.prediction,
                rank: m.raw,
                filtered_rank: m.filtered,
            }
        })
        .collect();
    if fallbacks > 0 {
        log::warn!(
            "predictive mask left no candidate for {fallbacks} of {} queries; ranked them unmasked",
            results.len()
        );
    }
    let report = metrics_of(&results);
    (results, report)
}

pub fn metrics_of(results: &[RankResult]) -> MetricsReport {
    let mut rows = Vec::new();
    for mode in [RankMode::Raw, RankMode::Filtered] {
        let per = |d: Direction| -> Vec<(usize, bool)> {
            results
                .iter()
                .filter(|r| r.direction == d)
                .map(|r| {
                    let rank = if mode == RankMode::Raw {
                        r.rank
                    } else {
                        r.filtered_rank
                    };
                    (rank, r.label == r.predicted_label)
                })
                .collect()
        };
        let obj = summarize(&per(Direction::Object), mode, "obj");
        let subj = summarize(&per(Direction::Subject), mode, "subj");
        let avg = |a: f64, b: f64| (a + b) / 2.0;
        let mean = MetricsRow {
            mode,
            direction: "mean",
            mrr: avg(obj.mrr, subj.mrr),
            hits1: avg(obj.hits1, subj.hits1),
            hits3: avg(obj.hits3, subj.hits3),
            hits10: avg(obj.hits10, subj.hits10),
            classifier_accuracy: avg(obj.classifier_accuracy, subj.classifier_accuracy),
            queries: obj.queries + subj.queries,
        };
        rows.extend([obj, subj, mean]);
    }
    MetricsReport { rows }
}

/// Scores `split` and summarises it under the model's configured mask policy.
pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    seq: &SnapshotSequence,
    vocab: &Vocabulary,
    split: Split,
) -> Result<(Vec<RankResult>, MetricsReport)> {
    let scored = score_split(model, seq, vocab, split)?;
    Ok(evaluate_scored(
        &scored,
        MaskPolicy::from_ablation(&model.config.ablation),
        None,
    ))
}

pub fn write_rank_csv(path: &Path, results: &[RankResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "subject",
        "relation",
        "object",
        "time",
        "direction",
        "label",
        "predicted_label",
        "prediction",
        "rank",
        "filtered_rank",
    ])?;
    for r in results {
        w.write_record([
            r.subject.to_string(),
            r.relation.to_string(),
            r.object.to_string(),
            r.time.to_string(),
            r.direction.name().to_string(),
            (r.label as u8).to_string(),
            (r.predicted_label as u8).to_string(),
            r.prediction.to_string(),
            r.rank.to_string(),
            r.filtered_rank.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(report.to_json()?.as_bytes())?;
    Ok(())
}
