//! Per-snapshot multi-relational message passing with composed entity/relation messages.
//!
//! Each layer sums, for every entity `s`, the messages `φ(h_o, h_r)·W_dir` over its outgoing
//! edges `(s, r, o)`, where `W_dir` is `W_O` for base relations and `W_I` for inverse relations,
//! plus a self-loop message `φ(h_s, h_loop)·W_S`. Relation embeddings are shared across layers
//! and transformed by a per-layer `W_rel`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::Composition;
use crate::dataset::{Quadruple, Vocabulary};
use crate::error::{AmcenError, Result};
use crate::kernels;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `(subject, relation, object)`.
type Edge = (usize, usize, usize);

/// Combines an entity vector with a relation vector.
pub fn compose<T: Scalar>(entity: &[T], relation: &[T], op: Composition) -> Result<Vec<T>> {
    if entity.len() != relation.len() {
        return Err(AmcenError::dims(format!(
            "compose: entity has {} dims, relation has {}",
            entity.len(),
            relation.len()
        )));
    }
    Ok(match op {
        Composition::Subtract => entity.iter().zip(relation).map(|(&a, &b)| a - b).collect(),
        Composition::Multiply => entity.iter().zip(relation).map(|(&a, &b)| a * b).collect(),
        Composition::CircularCorrelation => {
            let mut out = vec![T::zero(); entity.len()];
            kernels::circular_correlation(entity, relation, &mut out);
            out
        }
    })
}

/// Edges of one snapshot: every base edge together with its inverse.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnapshotGraph {
    edges: Vec<(usize, usize, usize)>,
}

impl SnapshotGraph {
    /// From base facts; inverse edges are added here.
    pub fn from_base(facts: &[Quadruple], vocab: &Vocabulary) -> Self {
        let mut edges = Vec::with_capacity(facts.len() * 2);
        edges.extend(facts.iter().map(|q| (q.subject, q.relation, q.object)));
        edges.extend(
            facts
                .iter()
                .map(|q| (q.object, vocab.inverse_relation(q.relation), q.subject)),
        );
        Self { edges }
    }

    /// From already augmented facts (each base fact accompanied by its inverse).
    pub fn from_augmented(facts: &[Quadruple]) -> Self {
        Self {
            edges: facts
                .iter()
                .map(|q| (q.subject, q.relation, q.object))
                .collect(),
        }
    }

    pub fn edges(&self) -> &[(usize, usize, usize)] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructuralConfig {
    pub dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub composition: Composition,
    pub literal_activation: bool,
    pub num_bases: usize,
}

#[derive(Clone, Debug)]
enum DirectionWeights {
    Full {
        out: ParamId,
        inv: ParamId,
        self_loop: ParamId,
    },
    /// `W_dir = Σ_b coef[dir, b] · basis_b`, bases stored flattened as `B × d²`.
    Basis { bases: ParamId, coef: ParamId },
}

#[derive(Clone, Debug)]
struct Layer {
    directions: DirectionWeights,
    relation: ParamId,
}

#[derive(Clone, Debug)]
pub struct StructuralParams {
    pub entity_embeddings: ParamId,
    pub relation_embeddings: ParamId,
    layers: Vec<Layer>,
    pub config: StructuralConfig,
    base_relation_count: usize,
}

impl StructuralParams {
    /// Registers the embedding tables (`|E| × d`, `(2|R| + 1) × d`) and per-layer matrices.
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        config: StructuralConfig,
        entity_count: usize,
        base_relation_count: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.dim;
        let g = ParamGroup::Structural;
        let entity_embeddings = store.insert_glorot("struct.entity_emb", g, entity_count, d, rng);
        let relation_embeddings = store.insert_glorot(
            "struct.relation_emb",
            g,
            2 * base_relation_count + 1,
            d,
            rng,
        );
        let layers = (0..config.layers)
            .map(|l| {
                let directions = if config.num_bases == 0 {
                    DirectionWeights::Full {
                        out: store.insert_glorot(format!("struct.{l}.w_out"), g, d, d, rng),
                        inv: store.insert_glorot(format!("struct.{l}.w_in"), g, d, d, rng),
                        self_loop: store.insert_glorot(format!("struct.{l}.w_self"), g, d, d, rng),
                    }
                } else {
                    let bases = config.num_bases;
                    let mut flat = Vec::with_capacity(bases * d * d);
                    let bound = (6.0 / (2 * d) as f64).sqrt();
                    for _ in 0..bases * d * d {
                        flat.push(T::of(rng.gen_range(-bound..bound)));
                    }
                    let bases_id = store.insert(
                        format!("struct.{l}.bases"),
                        g,
                        Matrix::from_vec(bases, d * d, flat).expect("shape"),
                    );
                    let coef =
                        store.insert_glorot(format!("struct.{l}.basis_coef"), g, 3, bases, rng);
                    DirectionWeights::Basis {
                        bases: bases_id,
                        coef,
                    }
                };
                Layer {
                    directions,
                    relation: store.insert_glorot(format!("struct.{l}.w_rel"), g, d, d, rng),
                }
            })
            .collect();
        Self {
            entity_embeddings,
            relation_embeddings,
            layers,
            config,
            base_relation_count,
        }
    }

    /// Looks up an already registered layout by parameter names.
    pub fn attach<T: Scalar>(
        store: &ParameterStore<T>,
        config: StructuralConfig,
        base_relation_count: usize,
    ) -> Result<Self> {
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {name}")))
        };
        let layers = (0..config.layers)
            .map(|l| {
                let directions = if config.num_bases == 0 {
                    DirectionWeights::Full {
                        out: need(format!("struct.{l}.w_out"))?,
                        inv: need(format!("struct.{l}.w_in"))?,
                        self_loop: need(format!("struct.{l}.w_self"))?,
                    }
                } else {
                    DirectionWeights::Basis {
                        bases: need(format!("struct.{l}.bases"))?,
                        coef: need(format!("struct.{l}.basis_coef"))?,
                    }
                };
                Ok(Layer {
                    directions,
                    relation: need(format!("struct.{l}.w_rel"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            entity_embeddings: need("struct.entity_emb".into())?,
            relation_embeddings: need("struct.relation_emb".into())?,
            layers,
            config,
            base_relation_count,
        })
    }

    pub fn self_loop_relation(&self) -> usize {
        2 * self.base_relation_count
    }

    /// Sets the three direction matrices of layer `l` (full parameterisation only).
    pub fn direction_ids(&self, l: usize) -> Option<(ParamId, ParamId, ParamId)> {
        match self.layers.get(l)?.directions {
            DirectionWeights::Full {
                out,
                inv,
                self_loop,
            } => Some((out, inv, self_loop)),
            DirectionWeights::Basis { .. } => None,
        }
    }

    pub fn relation_transform_id(&self, l: usize) -> Option<ParamId> {
        self.layers.get(l).map(|layer| layer.relation)
    }

    fn direction_vars<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        layer: &Layer,
    ) -> [Var; 3] {
        match layer.directions {
            DirectionWeights::Full {
                out,
                inv,
                self_loop,
            } => [
                tape.param(store, out),
                tape.param(store, inv),
                tape.param(store, self_loop),
            ],
            DirectionWeights::Basis { bases, coef } => {
                let d = self.config.dim;
                let b = tape.param(store, bases);
                let c = tape.param(store, coef);
                let mixed = tape.matmul(c, b);
                [0, 1, 2].map(|dir| {
                    let row = tape.gather_rows(mixed, vec![dir]);
                    tape.reshape(row, d, d)
                })
            }
        }
    }

    fn compose_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, entity: Var, relation: Var) -> Var {
        match self.config.composition {
            Composition::Subtract => tape.sub(entity, relation),
            Composition::Multiply => tape.mul(entity, relation),
            Composition::CircularCorrelation => tape.circular_correlation(entity, relation),
        }
    }

    /// Records the forward pass; returns `(entity matrix, relation matrix)` nodes.
    ///
    /// Dropout is applied to messages when `dropout_rng` is given.
    pub fn encode_on_tape<T: Scalar, R: Rng>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        graph: &SnapshotGraph,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let ent = tape.param(store, self.entity_embeddings);
        let rel = tape.param(store, self.relation_embeddings);
        let n = store.value(self.entity_embeddings).rows();
        let nrel = store.value(self.relation_embeddings).rows();
        for &(s, r, o) in graph.edges() {
            if s >= n || o >= n {
                return Err(AmcenError::IdOutOfRange {
                    kind: "entity",
                    id: s.max(o),
                    limit: n,
                });
            }
            if r >= nrel - 1 {
                return Err(AmcenError::IdOutOfRange {
                    kind: "relation",
                    id: r,
                    limit: nrel - 1,
                });
            }
        }
        let (base, inverse): (Vec<Edge>, Vec<Edge>) = graph
            .edges()
            .iter()
            .partition(|&&(_, r, _)| r < self.base_relation_count);

        let mut h = ent;
        let mut hr = rel;
        let self_rows = vec![self.self_loop_relation(); n];
        for layer in &self.layers {
            let [w_out, w_in, w_self] = self.direction_vars(tape, store, layer);

            let loop_rel = tape.gather_rows(hr, self_rows.clone());
            let mut msg = self.compose_on_tape(tape, h, loop_rel);
            msg = self.dropout(tape, msg, dropout_rng.as_deref_mut());
            let mut acc = tape.matmul(msg, w_self);

            for (group, weight) in [(&base, w_out), (&inverse, w_in)] {
                if group.is_empty() {
                    continue;
                }
                let subjects: Vec<usize> = group.iter().map(|e| e.0).collect();
                let relations: Vec<usize> = group.iter().map(|e| e.1).collect();
                let objects: Vec<usize> = group.iter().map(|e| e.2).collect();
                let ho = tape.gather_rows(h, objects);
                let her = tape.gather_rows(hr, relations);
                let mut m = self.compose_on_tape(tape, ho, her);
                m = self.dropout(tape, m, dropout_rng.as_deref_mut());
                let m = tape.matmul(m, weight);
                let summed = tape.scatter_add_rows(m, subjects, n);
                acc = tape.add(acc, summed);
            }

            h = tape.relu(acc);
            if self.config.literal_activation {
                h = tape.softmax_rows(h);
            }
            let w_rel = tape.param(store, layer.relation);
            hr = tape.matmul(hr, w_rel);
        }
        Ok((h, hr))
    }

    fn dropout<T: Scalar, R: Rng>(&self, tape: &mut Tape<T>, x: Var, rng: Option<&mut R>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng else { return x };
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = tape.value(x).shape();
        let keep = T::of(1.0 / (1.0 - p));
        let data = (0..rows * cols)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = tape.constant(Matrix::from_vec(rows, cols, data).expect("shape"));
        tape.mul(x, mask)
    }
}

/// Evaluation-mode encoding (no dropout) of one snapshot.
pub fn encode_snapshot<T: Scalar>(
    graph: &SnapshotGraph,
    params: &StructuralParams,
    store: &ParameterStore<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let mut tape = Tape::new();
    let (e, r) =
        params.encode_on_tape::<T, rand_chacha::ChaCha8Rng>(&mut tape, store, graph, None)?;
    Ok((tape.value(e).clone(), tape.value(r).clone()))
}
