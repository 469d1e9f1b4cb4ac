//! Small generated temporal graphs for tests, smoke runs and examples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Quadruple, Vocabulary};
use crate::error::Result;

/// Layout of the recurrence fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecurrenceSpec {
    pub entities: usize,
    pub relations: usize,
    pub timestamps: usize,
    /// A pair `(s, r)` is active at `t` when `(s + r + t) % period == 0`.
    pub period: usize,
    pub valid_timestamps: usize,
    pub test_timestamps: usize,
    pub seed: u64,
}

impl Default for RecurrenceSpec {
    fn default() -> Self {
        Self {
            entities: 20,
            relations: 4,
            timestamps: 30,
            period: 2,
            valid_timestamps: 3,
            test_timestamps: 3,
            seed: 7,
        }
    }
}

/// Every relation is a fixed random permutation of the entities; each `(s, r)` pair fires
/// periodically, so its first occurrence is a new event and every later one recurs.
pub fn recurrence_fixture(spec: RecurrenceSpec) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perms: Vec<Vec<usize>> = (0..spec.relations)
        .map(|_| {
            let mut p: Vec<usize> = (0..spec.entities).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let period = spec.period.max(1);
    let mut all = Vec::new();
    for t in 0..spec.timestamps {
        for (r, perm) in perms.iter().enumerate() {
            for (s, &o) in perm.iter().enumerate() {
                if (s + r + t) % period == 0 {
                    all.push(Quadruple::new(s, r, o, t));
                }
            }
        }
    }
    let test_start = spec.timestamps - spec.test_timestamps;
    let valid_start = test_start - spec.valid_timestamps;
    split_by_time(
        "recurrence",
        Vocabulary::new(spec.entities, spec.relations, spec.timestamps),
        all,
        valid_start,
        test_start,
    )
}

/// Uniformly random facts; `repeat` is the chance a fact copies an earlier one.
pub fn random_tkg(
    entities: usize,
    relations: usize,
    timestamps: usize,
    facts_per_time: usize,
    repeat: f64,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Quadruple> = Vec::new();
    for t in 0..timestamps {
        for _ in 0..facts_per_time {
            let q = if !all.is_empty() && rng.gen::<f64>() < repeat {
                let old = all[rng.gen_range(0..all.len())];
                Quadruple::new(old.subject, old.relation, old.object, t)
            } else {
                Quadruple::new(
                    rng.gen_range(0..entities),
                    rng.gen_range(0..relations),
                    rng.gen_range(0..entities),
                    t,
                )
            };
            all.push(q);
        }
    }
    let test_start = timestamps - timestamps / 5;
    let valid_start = test_start - timestamps / 5;
    split_by_time(
        "random",
        Vocabulary::new(entities, relations, timestamps),
        all,
        valid_start,
        test_start,
    )
}

fn split_by_time(
    name: &str,
    vocab: Vocabulary,
    all: Vec<Quadruple>,
    valid_start: usize,
    test_start: usize,
) -> Result<Dataset> {
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for q in all {
        if q.time < valid_start {
            train.push(q);
        } else if q.time < test_start {
            valid.push(q);
        } else {
            test.push(q);
        }
    }
    Dataset::with_vocabulary(name, vocab, train, valid, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shape() {
        let ds = recurrence_fixture(RecurrenceSpec::default()).unwrap();
        assert_eq!(ds.vocab.entity_count, 20);
        assert_eq!(ds.vocab.base_relation_count, 4);
        assert_eq!(ds.boundaries().valid_start, 24);
        assert_eq!(ds.boundaries().test_start, 27);
        // half of the 80 pairs fire at every timestamp
        assert_eq!(ds.all_base().len(), 30 * 40);
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = recurrence_fixture(RecurrenceSpec::default()).unwrap();
        let b = recurrence_fixture(RecurrenceSpec::default()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }
}
