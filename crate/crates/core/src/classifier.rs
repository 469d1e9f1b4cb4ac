//! Contrastive query representations and the binary recurring/new event classifier.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{AmcenError, Result};
use crate::history::MaskVector;
use crate::kernels;
use crate::params::{ParamGroup, ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

fn need<T: Scalar>(store: &ParameterStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| AmcenError::Checkpoint(format!("missing parameter {name}")))
}

/// Two-layer FFN `(3d + b) → d → d` producing `v_q`.
#[derive(Clone, Debug)]
pub struct ContrastiveParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub temperature: f64,
    pub normalize: bool,
}

impl ContrastiveParams {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        input_dim: usize,
        dim: usize,
        temperature: f64,
        normalize: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Contrastive;
        Self {
            w1: store.insert_glorot("contrastive.w1", g, input_dim, dim, rng),
            b1: store.insert_zeros("contrastive.b1", g, 1, dim),
            w2: store.insert_glorot("contrastive.w2", g, dim, dim, rng),
            b2: store.insert_zeros("contrastive.b2", g, 1, dim),
            temperature,
            normalize,
        }
    }

    pub fn attach<T: Scalar>(
        store: &ParameterStore<T>,
        temperature: f64,
        normalize: bool,
    ) -> Result<Self> {
        Ok(Self {
            w1: need(store, "contrastive.w1")?,
            b1: need(store, "contrastive.b1")?,
            w2: need(store, "contrastive.w2")?,
            b2: need(store, "contrastive.b2")?,
            temperature,
            normalize,
        })
    }

    /// `n × d` representations from `n × (3d + b)` pattern rows.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        patterns: Var,
    ) -> Var {
        two_layer(tape, store, patterns, [self.w1, self.b1, self.w2, self.b2])
    }

    /// Summed supervised contrastive loss, on unit-normalised rows when `normalize` is set.
    pub fn loss_on_tape<T: Scalar>(&self, tape: &mut Tape<T>, v: Var, labels: Vec<bool>) -> Var {
        let v = if self.normalize {
            tape.l2_normalize_rows(v)
        } else {
            v
        };
        tape.supervised_contrastive(v, labels, T::of(self.temperature))
    }
}

fn two_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    x: Var,
    ids: [ParamId; 4],
) -> Var {
    let [w1, b1, w2, b2] = ids.map(|id| tape.param(store, id));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

pub fn contrastive_representation<T: Scalar>(
    h_local: &[T],
    h_global: &[T],
    params: &ContrastiveParams,
    store: &ParameterStore<T>,
) -> Result<Vec<T>> {
    let expected = store.value(params.w1).rows();
    if h_local.len() + h_global.len() != expected {
        return Err(AmcenError::dims(format!(
            "contrastive input has {} dims, expected {expected}",
            h_local.len() + h_global.len()
        )));
    }
    let mut row = h_local.to_vec();
    row.extend_from_slice(h_global);
    let mut tape = Tape::new();
    let x = tape.constant(Matrix::row_vector(row));
    let v = params.forward_on_tape(&mut tape, store, x);
    Ok(tape.value(v).data().to_vec())
}

/// Summed supervised contrastive loss of a batch of representations.
pub fn contrastive_loss<T: Scalar>(
    batch_v: &Matrix<T>,
    labels: &[bool],
    temperature: T,
) -> Result<T> {
    if batch_v.rows() < 2 {
        return Err(AmcenError::Validation(
            "contrastive loss needs at least two queries".into(),
        ));
    }
    if labels.len() != batch_v.rows() {
        return Err(AmcenError::dims("one label per representation is required"));
    }
    if temperature <= T::zero() {
        return Err(AmcenError::Validation(
            "temperature must be positive".into(),
        ));
    }
    Ok(kernels::supervised_contrastive(
        batch_v,
        labels,
        temperature,
    ))
}

/// FFN `d → d → 1`; the sigmoid of its output is the probability of a recurring event.
#[derive(Clone, Debug)]
pub struct BinaryClassifierParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BinaryClassifierParams {
    pub fn register<T: Scalar>(
        store: &mut ParameterStore<T>,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Classifier;
        Self {
            w1: store.insert_glorot("classifier.w1", g, dim, dim, rng),
            b1: store.insert_zeros("classifier.b1", g, 1, dim),
            w2: store.insert_glorot("classifier.w2", g, dim, 1, rng),
            b2: store.insert_zeros("classifier.b2", g, 1, 1),
        }
    }

    pub fn attach<T: Scalar>(store: &ParameterStore<T>) -> Result<Self> {
        Ok(Self {
            w1: need(store, "classifier.w1")?,
            b1: need(store, "classifier.b1")?,
            w2: need(store, "classifier.w2")?,
            b2: need(store, "classifier.b2")?,
        })
    }

    /// `n × 1` logits.
    pub fn logits_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        v: Var,
    ) -> Var {
        two_layer(tape, store, v, [self.w1, self.b1, self.w2, self.b2])
    }

    /// Recurrence probabilities for every row of `v`.
    pub fn probabilities<T: Scalar>(&self, store: &ParameterStore<T>, v: &Matrix<T>) -> Vec<T> {
        let mut tape = Tape::new();
        let x = tape.constant(v.clone());
        let z = self.logits_on_tape(&mut tape, store, x);
        tape.value(z)
            .data()
            .iter()
            .map(|&z| kernels::sigmoid(z))
            .collect()
    }
}

pub fn classify<T: Scalar>(
    v_q: &[T],
    params: &BinaryClassifierParams,
    store: &ParameterStore<T>,
) -> Result<T> {
    let dim = store.value(params.w1).rows();
    if v_q.len() != dim {
        return Err(AmcenError::dims(format!(
            "classifier expects {dim} dims, got {}",
            v_q.len()
        )));
    }
    Ok(params.probabilities(store, &Matrix::row_vector(v_q.to_vec()))[0])
}

/// Strictly above one half counts as recurring.
pub fn is_recurring<T: Scalar>(probability: T) -> bool {
    probability > T::of(0.5)
}

/// The historical mask when the classifier predicts a recurring event, its complement otherwise.
pub fn predictive_mask<T: Scalar>(probability: T, freq: &[u32]) -> MaskVector {
    let recurring = is_recurring(probability);
    MaskVector::from_bits(freq.iter().map(|&f| (f > 0) == recurring).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn identical_pair_has_zero_loss() {
        let v = Matrix::from_f64(2, 2, &[0.3, 0.4, 0.3, 0.4]).unwrap();
        assert_eq!(contrastive_loss(&v, &[true, true], 0.1).unwrap(), 0.0);
    }

    #[test]
    fn distinct_labels_skip_all_anchors() {
        let v = Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(contrastive_loss(&v, &[true, false], 0.1).unwrap(), 0.0);
        assert!(contrastive_loss(&Matrix::<f64>::zeros(1, 2), &[true], 0.1).is_err());
    }

    #[test]
    fn zero_weights_give_one_half_and_resolve_new() {
        let mut store = ParameterStore::<f64>::new();
        let p = BinaryClassifierParams::register(&mut store, 3, &mut rng());
        for id in [p.w1, p.w2] {
            store
                .update(id, |m| *m = Matrix::zeros(m.rows(), m.cols()))
                .unwrap();
        }
        let prob = classify(&[1.0, -2.0, 0.5], &p, &store).unwrap();
        assert_eq!(prob, 0.5);
        assert!(!is_recurring(prob));
    }

    #[test]
    fn predictive_mask_cases() {
        let freq = [0, 3, 0, 0];
        assert_eq!(
            predictive_mask(0.9f64, &freq).bits(),
            &[false, true, false, false]
        );
        assert_eq!(
            predictive_mask(0.1f64, &freq).bits(),
            &[true, false, true, true]
        );
    }

    #[test]
    fn representation_width_and_zero_input() {
        let mut store = ParameterStore::<f64>::new();
        let p = ContrastiveParams::register(&mut store, 8, 2, 0.1, false, &mut rng());
        let v = contrastive_representation(&[0.0; 6], &[0.0; 2], &p, &store).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(contrastive_representation(&[0.0; 6], &[0.0; 3], &p, &store).is_err());
    }
}
