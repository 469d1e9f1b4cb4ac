//! Query/entity similarity scoring with historical and non-historical selective attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{AmcenError, Result};
use crate::history::MaskVector;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Matrix};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Query projection `2d → d` and key projection `d → d`, shared by both branches.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
}

impl DecoderParams {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w_query: store.insert_glorot("decoder.w_q", ParamGroup::Decoder, 2 * dim, dim, rng),
            w_key: store.insert_glorot("decoder.w_k", ParamGroup::Decoder, dim, dim, rng),
        }
    }

    pub fn attach<T: Scalar>(store: &ParameterStore<T>) -> Result<Self> {
        let need = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {n}")))
        };
        Ok(Self {
            w_query: need("decoder.w_q")?,
            w_key: need("decoder.w_k")?,
        })
    }

    /// `n × |E|` logits for queries whose rows were gathered into `subjects` and `relations`.
    pub fn logits_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        subjects: Var,
        relations: Var,
        entities: Var,
    ) -> Var {
        let dim = store.value(self.w_key).rows();
        let wq = tape.param(store, self.w_query);
        let wk = tape.param(store, self.w_key);
        let query = tape.concat_cols(&[subjects, relations]);
        let query = tape.matmul(query, wq);
        let keys = tape.matmul(entities, wk);
        let scores = tape.matmul_bt(query, keys);
        tape.scale(scores, T::one() / T::of(dim as f64).sqrt())
    }
}

/// `((x_s ⊕ x_r)·W_q)·(x_o·W_k)ᵀ / √d` for every entity row of `entity_x`.
pub fn similarity_logits<T: Scalar>(
    x_s: &[T],
    x_r: &[T],
    entity_x: &Matrix<T>,
    params: &DecoderParams,
    store: &ParameterStore<T>,
) -> Result<Vec<T>> {
    let dim = store.value(params.w_key).rows();
    if x_s.len() != dim || x_r.len() != dim || entity_x.cols() != dim {
        return Err(AmcenError::dims(format!(
            "decoder expects {dim}-dim inputs"
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Matrix::row_vector(x_s.to_vec()));
    let r = tape.constant(Matrix::row_vector(x_r.to_vec()));
    let e = tape.constant(entity_x.clone());
    let out = params.logits_on_tape(&mut tape, store, s, r, e);
    Ok(tape.value(out).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Historical,
    NonHistorical,
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreDistribution<T> {
    pub probabilities: Vec<T>,
    pub support: MaskVector,
    pub branch: Branch,
}

impl<T: Scalar> ScoreDistribution<T> {
    /// All-zero distribution over an empty support.
    pub fn empty(len: usize, branch: Branch) -> Self {
        Self {
            probabilities: vec![T::zero(); len],
            support: MaskVector::zeros(len),
            branch,
        }
    }

    pub fn get(&self, entity: usize) -> T {
        self.probabilities[entity]
    }

    pub fn total(&self) -> T {
        self.probabilities.iter().copied().sum()
    }

    /// Highest-probability entity, lowest id on ties.
    pub fn argmax(&self) -> usize {
        argmax_lowest(&self.probabilities)
    }
}

pub(crate) fn argmax_lowest<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax restricted to the mask's support; entities outside it get probability zero.
pub fn branch_distribution<T: Scalar>(
    logits: &[T],
    mask: &MaskVector,
    branch: Branch,
) -> Result<ScoreDistribution<T>> {
    if logits.len() != mask.len() {
        return Err(AmcenError::dims("logits and mask differ in length"));
    }
    if mask.count() == 0 {
        return Err(AmcenError::EmptySupport);
    }
    let max = logits
        .iter()
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .fold(T::neg_infinity(), |acc, (&l, _)| acc.max(l));
    let mut probabilities: Vec<T> = logits
        .iter()
        .zip(mask.bits())
        .map(|(&l, &m)| if m { (l - max).exp() } else { T::zero() })
        .collect();
    let total: T = probabilities.iter().copied().sum();
    for p in &mut probabilities {
        *p /= total;
    }
    Ok(ScoreDistribution {
        probabilities,
        support: mask.clone(),
        branch,
    })
}

/// Post-softmax multiplicative masking: the full softmax times the indicator, unnormalised.
pub fn branch_distribution_literal<T: Scalar>(
    logits: &[T],
    mask: &MaskVector,
    branch: Branch,
) -> ScoreDistribution<T> {
    let full = softmax(logits);
    ScoreDistribution {
        probabilities: full
            .into_iter()
            .zip(mask.bits())
            .map(|(p, &m)| if m { p } else { T::zero() })
            .collect(),
        support: mask.clone(),
        branch,
    }
}

/// `I·(−log C_his(gt)) + (1 − I)·(−log C_nhis(gt))`, probabilities floored at [`PROB_FLOOR`].
pub fn multiclass_loss<T: Scalar>(
    c_his: &ScoreDistribution<T>,
    c_nhis: &ScoreDistribution<T>,
    gt: usize,
    recurring: bool,
) -> Result<T> {
    let n = c_his.probabilities.len();
    if gt >= n || c_nhis.probabilities.len() != n {
        return Err(AmcenError::IdOutOfRange {
            kind: "entity",
            id: gt,
            limit: n,
        });
    }
    let branch = if recurring { c_his } else { c_nhis };
    Ok(-branch.get(gt).max(T::of(PROB_FLOOR)).ln())
}

/// `½(C_his + C_nhis)` for complementary supports.
pub fn combine<T: Scalar>(
    c_his: &ScoreDistribution<T>,
    c_nhis: &ScoreDistribution<T>,
) -> Result<ScoreDistribution<T>> {
    let n = c_his.probabilities.len();
    if c_nhis.probabilities.len() != n || c_his.support.len() != n || c_nhis.support.len() != n {
        return Err(AmcenError::dims("branch distributions differ in length"));
    }
    let mut bits = Vec::with_capacity(n);
    for (i, (&a, &b)) in c_his
        .support
        .bits()
        .iter()
        .zip(c_nhis.support.bits())
        .enumerate()
    {
        if a && b {
            return Err(AmcenError::InvariantViolation(format!(
                "entity {i} lies in both branch supports"
            )));
        }
        bits.push(a || b);
    }
    let half = T::of(0.5);
    Ok(ScoreDistribution {
        probabilities: c_his
            .probabilities
            .iter()
            .zip(&c_nhis.probabilities)
            .map(|(&a, &b)| half * (a + b))
            .collect(),
        support: MaskVector::from_bits(bits),
        branch: Branch::Combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_mask_is_plain_softmax() {
        let logits = [0.3f64, -1.0, 2.0];
        let d = branch_distribution(&logits, &MaskVector::ones(3), Branch::Historical).unwrap();
        let plain = softmax(&logits);
        for (a, b) in d.probabilities.iter().zip(plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_logits_over_support() {
        let mask = MaskVector::from_bits(vec![true, false, true, true, false]);
        let d = branch_distribution(&[0.7f64; 5], &mask, Branch::NonHistorical).unwrap();
        for (i, &p) in d.probabilities.iter().enumerate() {
            let want = if mask.get(i) { 1.0 / 3.0 } else { 0.0 };
            assert!((p - want).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_support_is_signalled() {
        assert!(matches!(
            branch_distribution(&[1.0f64, 2.0], &MaskVector::zeros(2), Branch::Historical),
            Err(AmcenError::EmptySupport)
        ));
    }

    #[test]
    fn loss_edges() {
        let his = ScoreDistribution {
            probabilities: vec![0.0f64, 1.0, 0.0],
            support: MaskVector::from_bits(vec![false, true, false]),
            branch: Branch::Historical,
        };
        let nhis = branch_distribution(
            &[0.0f64; 3],
            &his.support.complement(),
            Branch::NonHistorical,
        )
        .unwrap();
        assert_eq!(multiclass_loss(&his, &nhis, 1, true).unwrap(), 0.0);
        assert!((multiclass_loss(&his, &nhis, 0, false).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(multiclass_loss(&his, &nhis, 3, false).is_err());
    }

    #[test]
    fn combine_rejects_overlap() {
        let a =
            branch_distribution(&[0.0f64; 2], &MaskVector::ones(2), Branch::Historical).unwrap();
        assert!(matches!(
            combine(&a, &a),
            Err(AmcenError::InvariantViolation(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_id() {
        assert_eq!(argmax_lowest(&[0.2f64, 0.5, 0.5, 0.1]), 1);
    }
}
