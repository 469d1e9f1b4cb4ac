//! Adam-family optimisers operating on a [`ParameterStore`].

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::error::Result;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient (classic L2).
    Adam,
    /// Decoupled weight decay.
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

pub struct Adam<T> {
    kind: OptimizerKind,
    lr: T,
    weight_decay: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    first: Vec<Option<Matrix<T>>>,
    second: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: usize) -> Self {
        Self {
            kind,
            lr: T::of(lr),
            weight_decay: T::of(weight_decay),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            step: 0,
            first: vec![None; params],
            second: vec![None; params],
        }
    }

    /// Applies one update for every parameter that has a gradient.
    ///
    /// Fails with a contract violation if a gradient targets a frozen parameter.
    pub fn step(&mut self, store: &mut ParameterStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let mut ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        ids.sort();
        for id in ids {
            let grad = grads.get(id).expect("listed");
            let (b1, b2, eps, lr, wd, kind) = (
                self.beta1,
                self.beta2,
                self.eps,
                self.lr,
                self.weight_decay,
                self.kind,
            );
            let m = self.first[id.index()]
                .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self.second[id.index()]
                .get_or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            store.update(id, |value| {
                for (((w, &g), m), v) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let g = match kind {
                        OptimizerKind::Adam => g + wd * *w,
                        OptimizerKind::AdamW => g,
                    };
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    if kind == OptimizerKind::AdamW {
                        *w -= lr * wd * *w;
                    }
                    *w -= lr * update;
                }
            })?;
        }
        Ok(())
    }
}
