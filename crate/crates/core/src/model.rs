//! The full network: encoders, decoder, contrastive head and classifier over one parameter store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::classifier::{BinaryClassifierParams, ContrastiveParams};
use crate::config::TrainConfig;
use crate::dataset::{Quadruple, SnapshotSequence};
use crate::decoder::{DecoderParams, PROB_FLOOR};
use crate::error::{AmcenError, Result};
use crate::history::{FrequencyIndex, MaskVector};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::structural::{SnapshotGraph, StructuralConfig, StructuralParams};
use crate::temporal::{GlobalEncoderParams, TemporalParams, TemporalState};
use crate::tensor::Matrix;

/// Sizes that fix the shapes of every parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelShape {
    pub entity_count: usize,
    pub base_relation_count: usize,
    /// Number of trained timestamp embeddings; later times reuse the last one.
    pub time_count: usize,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub store: ParameterStore<T>,
    pub structural: StructuralParams,
    pub temporal: TemporalParams,
    pub global: GlobalEncoderParams,
    pub decoder: DecoderParams,
    pub contrastive: ContrastiveParams,
    pub classifier: BinaryClassifierParams,
}

fn structural_config(config: &TrainConfig) -> StructuralConfig {
    StructuralConfig {
        dim: config.dim,
        layers: config.layers,
        dropout: config.dropout,
        composition: config.composition,
        literal_activation: config.ablation.literal_eq1,
        num_bases: config.num_bases,
    }
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised parameters, deterministic in `config.seed`.
    pub fn new(config: TrainConfig, shape: ModelShape) -> Result<Self> {
        config.validate()?;
        if shape.entity_count == 0 || shape.base_relation_count == 0 {
            return Err(AmcenError::Validation(
                "model needs at least one entity and one relation".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let mut store = ParameterStore::new();
        let structural = StructuralParams::register(
            &mut store,
            structural_config(&config),
            shape.entity_count,
            shape.base_relation_count,
            &mut rng,
        );
        let temporal = TemporalParams::register(
            &mut store,
            d,
            config.heads,
            config.window,
            config.beta,
            shape.time_count.max(1),
            &mut rng,
        );
        let global = GlobalEncoderParams::register(&mut store, shape.entity_count, d, &mut rng);
        let decoder = DecoderParams::register(&mut store, d, &mut rng);
        let contrastive = ContrastiveParams::register(
            &mut store,
            4 * d,
            d,
            config.temperature,
            config.normalize_contrastive,
            &mut rng,
        );
        let classifier = BinaryClassifierParams::register(&mut store, d, &mut rng);
        Ok(Self {
            config,
            shape,
            store,
            structural,
            temporal,
            global,
            decoder,
            contrastive,
            classifier,
        })
    }

    /// Rebuilds handles over an existing store, e.g. one read from a checkpoint.
    pub fn from_store(
        config: TrainConfig,
        shape: ModelShape,
        store: ParameterStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let structural = StructuralParams::attach(
            &store,
            structural_config(&config),
            shape.base_relation_count,
        )?;
        let temporal = TemporalParams::attach(&store, config.heads, config.window, config.beta)?;
        let global = GlobalEncoderParams::attach(&store)?;
        let decoder = DecoderParams::attach(&store)?;
        let contrastive =
            ContrastiveParams::attach(&store, config.temperature, config.normalize_contrastive)?;
        let classifier = BinaryClassifierParams::attach(&store)?;
        let fresh = Self::new(config.clone(), shape)?;
        for (_, p) in fresh.store.iter() {
            let stored = store
                .by_name(&p.name)
                .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {}", p.name)))?;
            if stored.value.shape() != p.value.shape() {
                return Err(AmcenError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    stored.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            shape,
            store,
            structural,
            temporal,
            global,
            decoder,
            contrastive,
            classifier,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.config.architecture_fingerprint(
            self.shape.entity_count,
            self.shape.base_relation_count,
            self.shape.time_count,
        )
    }

    fn clamp_time(&self, t: usize) -> usize {
        t.min(self.shape.time_count.max(1) - 1)
    }

    /// Time-dependent entity and relation rows at the rollout's current time.
    ///
    /// `prev` is the snapshot just before it (`None` at the first timestamp, where the
    /// embedding tables stand in for the structural output).
    pub fn time_step_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        prev: Option<&SnapshotGraph>,
        state: &TemporalState<T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let (z_ent, z_rel) = match prev {
            Some(graph) => self
                .structural
                .encode_on_tape(tape, &self.store, graph, dropout_rng)?,
            None => (
                tape.param(&self.store, self.structural.entity_embeddings),
                tape.param(&self.store, self.structural.relation_embeddings),
            ),
        };
        let x_ent = self
            .temporal
            .step_on_tape(tape, &self.store, z_ent, &state.entity_history());
        let x_rel = self
            .temporal
            .step_on_tape(tape, &self.store, z_rel, &state.relation_history());
        Ok((x_ent, x_rel))
    }

    /// `(logits n × |E|, v n × d)` for a batch of queries.
    pub fn queries_on_tape(
        &self,
        tape: &mut Tape<T>,
        x_ent: Var,
        x_rel: Var,
        batch: &QueryBatch,
    ) -> Result<(Var, Var)> {
        let n_rel = tape.value(x_rel).rows();
        for q in &batch.queries {
            if q.subject >= self.shape.entity_count || q.object >= self.shape.entity_count {
                return Err(AmcenError::IdOutOfRange {
                    kind: "entity",
                    id: q.subject.max(q.object),
                    limit: self.shape.entity_count,
                });
            }
            if q.relation >= n_rel - 1 {
                return Err(AmcenError::IdOutOfRange {
                    kind: "relation",
                    id: q.relation,
                    limit: n_rel - 1,
                });
            }
        }
        let xs = tape.gather_rows(x_ent, batch.queries.iter().map(|q| q.subject).collect());
        let xr = tape.gather_rows(x_rel, batch.queries.iter().map(|q| q.relation).collect());
        let logits = self
            .decoder
            .logits_on_tape(tape, &self.store, xs, xr, x_ent);

        let table = tape.param(&self.store, self.temporal.time_embeddings);
        let t_rows = vec![self.clamp_time(batch.time); batch.len()];
        let te = tape.gather_rows(table, t_rows);
        let global = self.global.encode_on_tape(tape, &self.store, &batch.freqs);
        let patterns = tape.concat_cols(&[xs, xr, te, global]);
        let v = self
            .contrastive
            .forward_on_tape(tape, &self.store, patterns);
        Ok((logits, v))
    }

    /// Per-branch loss weights `(historical, non-historical)` for one query.
    fn branch_weights(&self, recurring: bool) -> (T, T) {
        let a = &self.config.ablation;
        let (his, nhis) = if recurring {
            (T::one(), T::zero())
        } else {
            (T::zero(), T::one())
        };
        if a.his_only {
            (his, T::zero())
        } else if a.nonhis_only {
            (T::zero(), nhis)
        } else {
            (his, nhis)
        }
    }

    /// Mean over the batch of the dual cross-entropy.
    pub fn multiclass_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        batch: &QueryBatch,
    ) -> Var {
        let n = batch.len();
        let e = self.shape.entity_count;
        let targets: Vec<usize> = batch.queries.iter().map(|q| q.object).collect();
        let (w_his, w_nhis): (Vec<T>, Vec<T>) =
            batch.labels.iter().map(|&l| self.branch_weights(l)).unzip();
        let floor = T::of(PROB_FLOOR.ln());
        let a = &self.config.ablation;

        let total = if a.no_attention_mask || a.literal_eq13 {
            // Unmasked softmax; under the literal mask the weighted branch always contains
            // the target, so its masked probability equals the unmasked one.
            let lp = tape.log_softmax_rows(logits);
            let w = w_his.iter().zip(&w_nhis).map(|(&a, &b)| a + b).collect();
            tape.weighted_nll(lp, targets, w, floor)
        } else {
            let mut his = vec![false; n * e];
            for (i, freq) in batch.freqs.iter().enumerate() {
                for &(o, _) in freq {
                    his[i * e + o] = true;
                }
            }
            let nhis: Vec<bool> = his.iter().map(|&h| !h).collect();
            let mut parts = Vec::new();
            for (support, w) in [(his, w_his), (nhis, w_nhis)] {
                if w.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                let lp = tape.masked_log_softmax_rows(logits, &support);
                parts.push(tape.weighted_nll(lp, targets.clone(), w, floor));
            }
            match parts.as_slice() {
                [] => tape.constant(Matrix::scalar(T::zero())),
                [one] => *one,
                [a, b, ..] => tape.add(*a, *b),
            }
        };
        tape.scale(total, T::one() / T::of(n.max(1) as f64))
    }

    /// Mean over the batch of the supervised contrastive loss.
    pub fn contrastive_loss_on_tape(&self, tape: &mut Tape<T>, v: Var, batch: &QueryBatch) -> Var {
        if batch.len() < 2 {
            return tape.constant(Matrix::scalar(T::zero()));
        }
        let sum = self.contrastive.loss_on_tape(tape, v, batch.labels.clone());
        tape.scale(sum, T::one() / T::of(batch.len() as f64))
    }

    /// `λ·L_mc + (1 − λ)·L_bc`; the contrastive term is not recorded at `λ = 1`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        logits: Var,
        v: Var,
        batch: &QueryBatch,
    ) -> LossVars {
        let lambda = self.config.lambda;
        let mc = self.multiclass_loss_on_tape(tape, logits, batch);
        let weighted_mc = tape.scale(mc, T::of(lambda));
        if lambda >= 1.0 {
            return LossVars {
                multiclass: mc,
                contrastive: None,
                total: weighted_mc,
            };
        }
        let bc = self.contrastive_loss_on_tape(tape, v, batch);
        let weighted_bc = tape.scale(bc, T::of(1.0 - lambda));
        let total = tape.add(weighted_mc, weighted_bc);
        LossVars {
            multiclass: mc,
            contrastive: Some(bc),
            total,
        }
    }

    /// Records one full training forward pass for `batch` at the rollout's current time.
    pub fn batch_loss_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        prev: Option<&SnapshotGraph>,
        state: &TemporalState<T>,
        batch: &QueryBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<(LossVars, Var, Var)> {
        let (xe, xr) = self.time_step_on_tape(tape, prev, state, dropout_rng)?;
        let (logits, v) = self.queries_on_tape(tape, xe, xr, batch)?;
        Ok((self.loss_on_tape(tape, logits, v, batch), xe, xr))
    }

    /// Evaluation-mode time-dependent rows.
    pub fn encode_time(
        &self,
        prev: Option<&SnapshotGraph>,
        state: &TemporalState<T>,
    ) -> Result<(Matrix<T>, Matrix<T>)> {
        let mut tape = Tape::new();
        let (xe, xr) = self.time_step_on_tape::<ChaCha8Rng>(&mut tape, prev, state, None)?;
        Ok((tape.value(xe).clone(), tape.value(xr).clone()))
    }

    /// Evaluation-mode logits, representations and recurrence probabilities.
    pub fn score_queries(
        &self,
        x_ent: &Matrix<T>,
        x_rel: &Matrix<T>,
        batch: &QueryBatch,
    ) -> Result<QueryScores<T>> {
        let mut tape = Tape::new();
        let xe = tape.constant(x_ent.clone());
        let xr = tape.constant(x_rel.clone());
        let (logits, v) = self.queries_on_tape(&mut tape, xe, xr, batch)?;
        let v = tape.value(v).clone();
        let recurrence = self.classifier.probabilities(&self.store, &v);
        Ok(QueryScores {
            logits: tape.value(logits).clone(),
            representations: v,
            recurrence,
        })
    }
}

/// Loss nodes of one recorded batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub multiclass: Var,
    pub contrastive: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct QueryScores<T> {
    pub logits: Matrix<T>,
    pub representations: Matrix<T>,
    pub recurrence: Vec<T>,
}

/// Queries at one timestamp with their history features.
#[derive(Clone, Debug)]
pub struct QueryBatch {
    pub time: usize,
    pub queries: Vec<Quadruple>,
    /// Sparse nonzero entries of each query's frequency vector.
    pub freqs: Vec<Vec<(usize, u32)>>,
    /// Whether each query is a recurring event.
    pub labels: Vec<bool>,
}

impl QueryBatch {
    pub fn build(queries: &[Quadruple], index: &FrequencyIndex, time: usize) -> Result<Self> {
        let mut freqs = Vec::with_capacity(queries.len());
        let mut labels = Vec::with_capacity(queries.len());
        for q in queries {
            if q.time != time {
                return Err(AmcenError::Validation(format!(
                    "query at time {} batched under time {time}",
                    q.time
                )));
            }
            let f = index.frequency_sparse(q.subject, q.relation, time)?;
            labels.push(f.iter().any(|&(o, _)| o == q.object));
            freqs.push(f);
        }
        Ok(Self {
            time,
            queries: queries.to_vec(),
            freqs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn historical_mask(&self, i: usize, entity_count: usize) -> MaskVector {
        let mut bits = vec![false; entity_count];
        for &(o, _) in &self.freqs[i] {
            bits[o] = true;
        }
        MaskVector::from_bits(bits)
    }

    pub fn dense_frequency(&self, i: usize, entity_count: usize) -> Vec<u32> {
        let mut f = vec![0; entity_count];
        for &(o, c) in &self.freqs[i] {
            f[o] = c;
        }
        f
    }
}

/// Walks a snapshot sequence in time order, keeping the history index and the temporal
/// buffers in step. Facts at time `t` are absorbed only after `t` has been processed.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    index: FrequencyIndex,
    state: TemporalState<T>,
    time: usize,
}

impl<T: Scalar> Rollout<T> {
    pub fn new(entity_count: usize, window: usize) -> Self {
        Self {
            index: FrequencyIndex::new(entity_count),
            state: TemporalState::new(window),
            time: 0,
        }
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn index(&self) -> &FrequencyIndex {
        &self.index
    }

    pub fn state(&self) -> &TemporalState<T> {
        &self.state
    }

    /// Graph of the snapshot before the current time.
    pub fn prev_graph(&self, seq: &SnapshotSequence) -> Option<SnapshotGraph> {
        (self.time > 0).then(|| SnapshotGraph::from_augmented(seq.snapshot(self.time - 1)))
    }

    /// Batches of the current snapshot's queries, at most `batch_size` each.
    pub fn batches(&self, queries: &[Quadruple], batch_size: usize) -> Result<Vec<QueryBatch>> {
        queries
            .chunks(batch_size.max(1))
            .map(|c| QueryBatch::build(c, &self.index, self.time))
            .collect()
    }

    /// Stores the time-dependent rows of the current time and absorbs its facts.
    pub fn advance(
        &mut self,
        seq: &SnapshotSequence,
        x_ent: Matrix<T>,
        x_rel: Matrix<T>,
    ) -> Result<()> {
        self.state.push(x_ent, x_rel);
        self.index.absorb(self.time, seq.snapshot(self.time))?;
        self.time += 1;
        Ok(())
    }

    /// Evaluation-mode advance through `until` (exclusive).
    pub fn skip_to(
        &mut self,
        model: &Model<T>,
        seq: &SnapshotSequence,
        until: usize,
    ) -> Result<()> {
        while self.time < until {
            let (xe, xr) = model.encode_time(self.prev_graph(seq).as_ref(), &self.state)?;
            self.advance(seq, xe, xr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Vocabulary;

    fn tiny() -> (Model<f64>, SnapshotSequence) {
        let cfg = TrainConfig {
            dim: 4,
            heads: 2,
            window: 3,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let shape = ModelShape {
            entity_count: 5,
            base_relation_count: 2,
            time_count: 3,
        };
        let vocab = Vocabulary::new(5, 2, 3);
        let base = vec![
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(2, 1, 3, 0),
            Quadruple::new(0, 0, 1, 1),
            Quadruple::new(0, 0, 4, 2),
        ];
        let aug = crate::dataset::augment_inverse(&base, &vocab).unwrap();
        (
            Model::new(cfg, shape).unwrap(),
            crate::dataset::split_snapshots(&aug, &vocab),
        )
    }

    #[test]
    fn lambda_one_drops_contrastive_term() {
        let (mut model, seq) = tiny();
        model.config.lambda = 1.0;
        let mut roll = Rollout::new(5, 3);
        roll.skip_to(&model, &seq, 1).unwrap();
        let batch = roll.batches(seq.snapshot(1), 16).unwrap().remove(0);
        let mut tape = Tape::new();
        let (loss, _, _) = model
            .batch_loss_on_tape::<ChaCha8Rng>(
                &mut tape,
                roll.prev_graph(&seq).as_ref(),
                roll.state(),
                &batch,
                None,
            )
            .unwrap();
        assert!(loss.contrastive.is_none());
        assert_eq!(
            tape.value(loss.total).item(),
            tape.value(loss.multiclass).item()
        );
    }

    #[test]
    fn batch_labels_follow_history() {
        let (model, seq) = tiny();
        let mut roll = Rollout::<f64>::new(5, 3);
        roll.skip_to(&model, &seq, 2).unwrap();
        let batch = roll.batches(seq.snapshot(2), 16).unwrap().remove(0);
        // (0, 0, 4) is new although (0, 0) has history; its inverse (4, 2, 0) is new too.
        assert_eq!(batch.labels, vec![false, false]);
        assert_eq!(
            batch.historical_mask(0, 5).bits(),
            &[false, true, false, false, false]
        );
    }

    #[test]
    fn store_reattaches() {
        let (model, _) = tiny();
        let again =
            Model::from_store(model.config.clone(), model.shape, model.store.clone()).unwrap();
        assert_eq!(again.fingerprint(), model.fingerprint());
    }
}
