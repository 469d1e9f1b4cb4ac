//! Named learnable weights with per-parameter freeze flags.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmcenError, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Structural,
    Temporal,
    Global,
    Decoder,
    Contrastive,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Structural,
        ParamGroup::Temporal,
        ParamGroup::Global,
        ParamGroup::Decoder,
        ParamGroup::Contrastive,
        ParamGroup::Classifier,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Structural => "structural",
            ParamGroup::Temporal => "temporal",
            ParamGroup::Global => "global",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Contrastive => "contrastive",
            ParamGroup::Classifier => "classifier",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Matrix<T>,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            group,
            value,
            frozen: false,
        });
        id
    }

    /// Glorot-uniform initialisation.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let value = Matrix::from_vec(rows, cols, data).expect("shape");
        self.insert(name, group, value)
    }

    pub fn insert_zeros(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
    ) -> ParamId {
        self.insert(name, group, Matrix::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all_except(&mut self, keep: ParamGroup) {
        for p in &mut self.params {
            p.frozen = p.group != keep;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    /// Replaces a parameter value; refuses when the parameter is frozen.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Matrix<T>)) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(AmcenError::ContractViolation(format!(
                "attempted update of frozen parameter {}",
                p.name
            )));
        }
        f(&mut p.value);
        Ok(())
    }

    /// Copies values from `other` (same layout), e.g. to restore a best snapshot.
    pub fn copy_values_from(&mut self, other: &Self) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(AmcenError::dims("parameter stores differ in layout"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(AmcenError::dims(format!(
                    "parameter {} differs in layout",
                    dst.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_refuse_updates() {
        let mut store = ParameterStore::<f64>::new();
        let a = store.insert_zeros("a", ParamGroup::Decoder, 1, 2);
        let b = store.insert_zeros("b", ParamGroup::Classifier, 1, 2);
        store.freeze_all_except(ParamGroup::Classifier);
        assert!(matches!(
            store.update(a, |m| m.data_mut()[0] = 1.0),
            Err(AmcenError::ContractViolation(_))
        ));
        store.update(b, |m| m.data_mut()[0] = 1.0).unwrap();
        assert_eq!(store.value(b).data()[0], 1.0);
        assert_eq!(store.value(a).data()[0], 0.0);
    }
}
