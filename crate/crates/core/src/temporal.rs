//! Time-dependent representations.
//!
//! Local patterns come from attentive pooling of a sliding window of past representations,
//! keyed by the latest structural embedding and blended with it. Global patterns come from a
//! `tanh` projection of the query's historical object frequencies.

use std::collections::VecDeque;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{AmcenError, Result};
use crate::kernels;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct TemporalParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub time_embeddings: ParamId,
    pub heads: usize,
    pub window: usize,
    pub beta: f64,
    pub dim: usize,
}

const TEMPORAL_NAMES: [&str; 8] = [
    "temporal.w_q",
    "temporal.w_k",
    "temporal.w_v",
    "temporal.ffn_w1",
    "temporal.ffn_b1",
    "temporal.ffn_w2",
    "temporal.ffn_b2",
    "temporal.time_emb",
];

impl TemporalParams {
    /// Head `h` uses columns `[h·d/m, (h+1)·d/m)` of `W_q`, `W_k` and `W_v` (each `d × d`).
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        heads: usize,
        window: usize,
        beta: f64,
        time_count: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Temporal;
        let w_q = store.insert_glorot(TEMPORAL_NAMES[0], g, dim, dim, rng);
        let w_k = store.insert_glorot(TEMPORAL_NAMES[1], g, dim, dim, rng);
        let w_v = store.insert_glorot(TEMPORAL_NAMES[2], g, dim, dim, rng);
        let ffn_w1 = store.insert_glorot(TEMPORAL_NAMES[3], g, dim, dim, rng);
        let ffn_b1 = store.insert_zeros(TEMPORAL_NAMES[4], g, 1, dim);
        let ffn_w2 = store.insert_glorot(TEMPORAL_NAMES[5], g, dim, dim, rng);
        let ffn_b2 = store.insert_zeros(TEMPORAL_NAMES[6], g, 1, dim);
        let time_embeddings =
            store.insert_glorot(TEMPORAL_NAMES[7], g, time_count.max(1), dim, rng);
        Self {
            w_q,
            w_k,
            w_v,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            time_embeddings,
            heads,
            window,
            beta,
            dim,
        }
    }

    pub fn attach<T: Scalar>(
        store: &ParameterStore<T>,
        heads: usize,
        window: usize,
        beta: f64,
    ) -> Result<Self> {
        let ids: Vec<ParamId> = TEMPORAL_NAMES
            .iter()
            .map(|n| {
                store
                    .id(n)
                    .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {n}")))
            })
            .collect::<Result<_>>()?;
        let dim = store.value(ids[0]).rows();
        Ok(Self {
            w_q: ids[0],
            w_k: ids[1],
            w_v: ids[2],
            ffn_w1: ids[3],
            ffn_b1: ids[4],
            ffn_w2: ids[5],
            ffn_b2: ids[6],
            time_embeddings: ids[7],
            heads,
            window,
            beta,
            dim,
        })
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::of(self.dim as f64).sqrt()
    }

    /// Attentive pooling of `history` keyed by `z_prev`; empty history returns `z_prev`.
    pub fn pool_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        z_prev: Var,
        history: &[&Matrix<T>],
    ) -> Var {
        if history.is_empty() {
            return z_prev;
        }
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        let q = tape.matmul(z_prev, w_q);
        let mut keys = Vec::with_capacity(history.len());
        let mut values = Vec::with_capacity(history.len());
        for &h in history {
            let x = tape.constant(h.clone());
            keys.push(tape.matmul(x, w_k));
            values.push(tape.matmul(x, w_v));
        }
        let pooled = tape.attention_pool(q, &keys, &values, self.heads, self.scale());
        self.ffn_on_tape(tape, store, pooled)
    }

    fn ffn_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>, x: Var) -> Var {
        let (w1, b1, w2, b2) = (
            tape.param(store, self.ffn_w1),
            tape.param(store, self.ffn_b1),
            tape.param(store, self.ffn_w2),
            tape.param(store, self.ffn_b2),
        );
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    /// `β·z_prev + (1 − β)·pooled`
    pub fn blend_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, z_prev: Var, pooled: Var) -> Var {
        if pooled == z_prev {
            return z_prev;
        }
        let a = tape.scale(z_prev, T::of(self.beta));
        let b = tape.scale(pooled, T::of(1.0 - self.beta));
        tape.add(a, b)
    }

    /// Time-dependent rows for the next timestamp from structural rows at the previous one.
    pub fn step_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        z_prev: Var,
        history: &[&Matrix<T>],
    ) -> Var {
        let pooled = self.pool_on_tape(tape, store, z_prev, history);
        self.blend_on_tape(tape, z_prev, pooled)
    }
}

/// Attention weights of each head over `history` for a single query vector.
pub fn attention_weights<T: Scalar>(
    z_prev: &[T],
    history: &[Vec<T>],
    params: &TemporalParams,
    store: &ParameterStore<T>,
) -> Result<Vec<Vec<T>>> {
    let (q, keys, values) = project(z_prev, history, params, store)?;
    let keys: Vec<&Matrix<T>> = keys.iter().collect();
    let values: Vec<&Matrix<T>> = values.iter().collect();
    let out = kernels::attention_pool(&q, &keys, &values, params.heads, params.scale());
    Ok(out.weights.into_iter().next().unwrap_or_default())
}

#[allow(clippy::type_complexity)]
fn project<T: Scalar>(
    z_prev: &[T],
    history: &[Vec<T>],
    params: &TemporalParams,
    store: &ParameterStore<T>,
) -> Result<(Matrix<T>, Vec<Matrix<T>>, Vec<Matrix<T>>)> {
    let d = params.dim;
    if z_prev.len() != d || history.iter().any(|h| h.len() != d) {
        return Err(AmcenError::dims(format!(
            "attentive pooling expects {d}-dim vectors"
        )));
    }
    let z = Matrix::row_vector(z_prev.to_vec());
    let q = z.matmul(store.value(params.w_q));
    let keys = history
        .iter()
        .map(|h| Matrix::row_vector(h.clone()).matmul(store.value(params.w_k)))
        .collect();
    let values = history
        .iter()
        .map(|h| Matrix::row_vector(h.clone()).matmul(store.value(params.w_v)))
        .collect();
    Ok((q, keys, values))
}

/// Pooled representation of one entity or relation; returns `z_prev` for an empty history.
pub fn attentive_pool<T: Scalar>(
    z_prev: &[T],
    history: &[Vec<T>],
    params: &TemporalParams,
    store: &ParameterStore<T>,
) -> Result<Vec<T>> {
    if z_prev.len() != params.dim {
        return Err(AmcenError::dims(format!(
            "z has {} dims, expected {}",
            z_prev.len(),
            params.dim
        )));
    }
    if history.is_empty() {
        return Ok(z_prev.to_vec());
    }
    project(z_prev, history, params, store)?;
    let mut tape = Tape::new();
    let z = tape.constant(Matrix::row_vector(z_prev.to_vec()));
    let hist: Vec<Matrix<T>> = history
        .iter()
        .map(|h| Matrix::row_vector(h.clone()))
        .collect();
    let refs: Vec<&Matrix<T>> = hist.iter().collect();
    let out = params.pool_on_tape(&mut tape, store, z, &refs);
    Ok(tape.value(out).data().to_vec())
}

pub fn blend<T: Scalar>(z_prev: &[T], pooled: &[T], beta: f64) -> Result<Vec<T>> {
    if z_prev.len() != pooled.len() {
        return Err(AmcenError::dims("blend operands differ in length"));
    }
    let (b, nb) = (T::of(beta), T::of(1.0 - beta));
    Ok(z_prev
        .iter()
        .zip(pooled)
        .map(|(&z, &p)| b * z + nb * p)
        .collect())
}

/// `x_s ⊕ x_r ⊕ t`
pub fn local_query_pattern<T: Scalar>(x_s: &[T], x_r: &[T], time_embedding: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x_s.len() + x_r.len() + time_embedding.len());
    out.extend_from_slice(x_s);
    out.extend_from_slice(x_r);
    out.extend_from_slice(time_embedding);
    out
}

/// Frequency projection `tanh(F·W + b)`, with `W` stored as `|E| × b`.
#[derive(Clone, Debug)]
pub struct GlobalEncoderParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GlobalEncoderParams {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        entity_count: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.insert_glorot("global.w", ParamGroup::Global, entity_count, width, rng),
            bias: store.insert_zeros("global.b", ParamGroup::Global, 1, width),
        }
    }

    pub fn attach<T: Scalar>(store: &ParameterStore<T>) -> Result<Self> {
        let need = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {n}")))
        };
        Ok(Self {
            weight: need("global.w")?,
            bias: need("global.b")?,
        })
    }

    /// One output row per sparse frequency row.
    pub fn encode_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        freqs: &[Vec<(usize, u32)>],
    ) -> Var {
        let rows = freqs
            .iter()
            .map(|r| r.iter().map(|&(o, c)| (o, T::of(c as f64))).collect())
            .collect();
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let lin = tape.sparse_matmul(rows, w);
        let lin = tape.add_row(lin, b);
        tape.tanh(lin)
    }
}

pub fn global_pattern<T: Scalar>(
    freq: &[u32],
    params: &GlobalEncoderParams,
    store: &ParameterStore<T>,
) -> Result<Vec<T>> {
    let w = store.value(params.weight);
    if freq.len() != w.rows() {
        return Err(AmcenError::dims(format!(
            "frequency vector has {} entries, encoder expects {}",
            freq.len(),
            w.rows()
        )));
    }
    let sparse: Vec<(usize, u32)> = freq
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(o, &c)| (o, c))
        .collect();
    let mut tape = Tape::new();
    let out = params.encode_on_tape(&mut tape, store, &[sparse]);
    Ok(tape.value(out).data().to_vec())
}

/// Rolling windows of past time-dependent rows, most recent first.
#[derive(Clone, Debug)]
pub struct TemporalState<T> {
    window: usize,
    entities: VecDeque<Matrix<T>>,
    relations: VecDeque<Matrix<T>>,
}

impl<T: Scalar> TemporalState<T> {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            entities: VecDeque::new(),
            relations: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Pooling inputs for the next step: stored rows for `t−2 … t−τ` (the newest entry,
    /// `t−1`, is represented by the structural rows instead).
    pub fn entity_history(&self) -> Vec<&Matrix<T>> {
        self.entities.iter().skip(1).collect()
    }

    pub fn relation_history(&self) -> Vec<&Matrix<T>> {
        self.relations.iter().skip(1).collect()
    }

    pub fn latest(&self) -> Option<(&Matrix<T>, &Matrix<T>)> {
        Some((self.entities.front()?, self.relations.front()?))
    }

    pub fn push(&mut self, entities: Matrix<T>, relations: Matrix<T>) {
        self.entities.push_front(entities);
        self.relations.push_front(relations);
        self.entities.truncate(self.window);
        self.relations.truncate(self.window);
    }
}

/// Advances the state by one timestamp from structural rows `z` at `t−1` and returns the
/// time-dependent rows at `t`.
pub fn roll_forward<T: Scalar>(
    state: &mut TemporalState<T>,
    z_entities: &Matrix<T>,
    z_relations: &Matrix<T>,
    params: &TemporalParams,
    store: &ParameterStore<T>,
) -> (Matrix<T>, Matrix<T>) {
    let mut tape = Tape::new();
    let ze = tape.constant(z_entities.clone());
    let zr = tape.constant(z_relations.clone());
    let xe = params.step_on_tape(&mut tape, store, ze, &state.entity_history());
    let xr = params.step_on_tape(&mut tape, store, zr, &state.relation_history());
    let (xe, xr) = (tape.value(xe).clone(), tape.value(xr).clone());
    state.push(xe.clone(), xr.clone());
    (xe, xr)
}
