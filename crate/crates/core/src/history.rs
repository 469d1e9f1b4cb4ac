//! Cumulative `(subject, relation) → object` occurrence counts over absorbed snapshots.
//!
//! Counts are kept sparsely per `(s, r)` key with the time of every increment, so queries for
//! any `t ≤ frontier` return the count of facts strictly before `t`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::Quadruple;
use crate::error::{AmcenError, Result};

/// Binary selector over all entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(len: usize) -> Self {
        Self {
            bits: vec![true; len],
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn as_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| b as u8).collect()
    }
}

/// Occurrence times of one object under one `(s, r)` key, compressed as
/// `(time, cumulative count up to and including time)`.
type Occurrences = Vec<(u32, u32)>;

#[derive(Clone, Debug)]
pub struct FrequencyIndex {
    entity_count: usize,
    frontier: usize,
    counts: HashMap<(usize, usize), BTreeMap<usize, Occurrences>>,
}

impl FrequencyIndex {
    pub fn new(entity_count: usize) -> Self {
        Self {
            entity_count,
            frontier: 0,
            counts: HashMap::new(),
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    /// Times `< frontier` have been absorbed.
    pub fn frontier(&self) -> usize {
        self.frontier
    }

    /// Absorbs the snapshot at `time`; snapshots must arrive in order with no gaps.
    pub fn absorb(&mut self, time: usize, facts: &[Quadruple]) -> Result<()> {
        if time != self.frontier {
            return Err(AmcenError::Sequencing {
                expected: self.frontier,
                got: time,
            });
        }
        for q in facts {
            if q.object >= self.entity_count || q.subject >= self.entity_count {
                return Err(AmcenError::IdOutOfRange {
                    kind: "entity",
                    id: q.object.max(q.subject),
                    limit: self.entity_count,
                });
            }
            let occ = self
                .counts
                .entry((q.subject, q.relation))
                .or_default()
                .entry(q.object)
                .or_default();
            match occ.last_mut() {
                Some((t, c)) if *t as usize == time => *c += 1,
                Some(&mut (_, c)) => occ.push((time as u32, c + 1)),
                None => occ.push((time as u32, 1)),
            }
        }
        self.frontier = time + 1;
        Ok(())
    }

    fn check(&self, time: usize) -> Result<()> {
        if time > self.frontier {
            return Err(AmcenError::Stale {
                requested: time,
                frontier: self.frontier,
            });
        }
        Ok(())
    }

    fn count_before(occ: &Occurrences, time: usize) -> u32 {
        let idx = occ.partition_point(|&(t, _)| (t as usize) < time);
        if idx == 0 {
            0
        } else {
            occ[idx - 1].1
        }
    }

    /// Nonzero entries of the frequency vector, sorted by object id.
    pub fn frequency_sparse(
        &self,
        subject: usize,
        relation: usize,
        time: usize,
    ) -> Result<Vec<(usize, u32)>> {
        self.check(time)?;
        let Some(objects) = self.counts.get(&(subject, relation)) else {
            return Ok(Vec::new());
        };
        Ok(objects
            .iter()
            .filter_map(|(&o, occ)| {
                let c = Self::count_before(occ, time);
                (c > 0).then_some((o, c))
            })
            .collect())
    }

    /// Entry `o` counts facts `(subject, relation, o, k)` with `k < time`.
    pub fn frequency_vector(
        &self,
        subject: usize,
        relation: usize,
        time: usize,
    ) -> Result<Vec<u32>> {
        let mut dense = vec![0u32; self.entity_count];
        for (o, c) in self.frequency_sparse(subject, relation, time)? {
            dense[o] = c;
        }
        Ok(dense)
    }

    pub fn historical_mask(
        &self,
        subject: usize,
        relation: usize,
        time: usize,
    ) -> Result<MaskVector> {
        let mut bits = vec![false; self.entity_count];
        for (o, _) in self.frequency_sparse(subject, relation, time)? {
            bits[o] = true;
        }
        Ok(MaskVector::from_bits(bits))
    }

    pub fn nonhistorical_mask(
        &self,
        subject: usize,
        relation: usize,
        time: usize,
    ) -> Result<MaskVector> {
        Ok(self.historical_mask(subject, relation, time)?.complement())
    }

    /// `true` when the query's object occurred with the same `(s, r)` before its time.
    pub fn event_label(&self, q: &Quadruple) -> Result<bool> {
        self.check(q.time)?;
        Ok(self
            .counts
            .get(&(q.subject, q.relation))
            .and_then(|objs| objs.get(&q.object))
            .is_some_and(|occ| Self::count_before(occ, q.time) > 0))
    }

    /// Writes a versioned binary cache keyed by `dataset_hash`.
    pub fn save_cache(&self, path: &Path, dataset_hash: &str) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        let hash = dataset_hash.as_bytes();
        buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash);
        for v in [
            self.entity_count as u64,
            self.frontier as u64,
            self.counts.len() as u64,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut keys: Vec<_> = self.counts.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let objects = &self.counts[&key];
            for v in [key.0 as u64, key.1 as u64, objects.len() as u64] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for (&o, occ) in objects {
                buf.extend_from_slice(&(o as u64).to_le_bytes());
                buf.extend_from_slice(&(occ.len() as u64).to_le_bytes());
                for &(t, c) in occ {
                    buf.extend_from_slice(&t.to_le_bytes());
                    buf.extend_from_slice(&c.to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a cache written by [`save_cache`](Self::save_cache); `None` when the
    /// cache belongs to another dataset or format version.
    pub fn load_cache(path: &Path, dataset_hash: &str) -> Result<Option<Self>> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC || r.u32()? != CACHE_VERSION {
            return Ok(None);
        }
        let hlen = r.u32()? as usize;
        if r.take(hlen)? != dataset_hash.as_bytes() {
            return Ok(None);
        }
        let entity_count = r.u64()? as usize;
        let frontier = r.u64()? as usize;
        let nkeys = r.u64()? as usize;
        let mut counts = HashMap::with_capacity(nkeys);
        for _ in 0..nkeys {
            let key = (r.u64()? as usize, r.u64()? as usize);
            let nobj = r.u64()? as usize;
            let mut objects = BTreeMap::new();
            for _ in 0..nobj {
                let o = r.u64()? as usize;
                let nocc = r.u64()? as usize;
                let mut occ = Vec::with_capacity(nocc);
                for _ in 0..nocc {
                    occ.push((r.u32()?, r.u32()?));
                }
                objects.insert(o, occ);
            }
            counts.insert(key, objects);
        }
        if r.pos != bytes.len() {
            return Err(AmcenError::Validation(
                "trailing bytes in history cache".into(),
            ));
        }
        Ok(Some(Self {
            entity_count,
            frontier,
            counts,
        }))
    }
}

const CACHE_MAGIC: &[u8] = b"AMCENFIX";
const CACHE_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(AmcenError::Validation("truncated history cache".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absorb_rejects_out_of_order() {
        let mut idx = FrequencyIndex::new(2);
        idx.absorb(0, &[Quadruple::new(0, 0, 1, 0)]).unwrap();
        assert!(matches!(
            idx.absorb(0, &[Quadruple::new(0, 0, 1, 0)]),
            Err(AmcenError::Sequencing {
                expected: 1,
                got: 0
            })
        ));
        assert!(matches!(
            idx.absorb(2, &[]),
            Err(AmcenError::Sequencing { .. })
        ));
    }

    #[test]
    fn counts_accumulate_across_snapshots() {
        let mut idx = FrequencyIndex::new(3);
        idx.absorb(0, &[Quadruple::new(0, 0, 1, 0)]).unwrap();
        idx.absorb(1, &[Quadruple::new(0, 0, 1, 1)]).unwrap();
        assert_eq!(idx.frequency_vector(0, 0, 2).unwrap(), vec![0, 2, 0]);
        assert_eq!(idx.frequency_vector(0, 0, 1).unwrap(), vec![0, 1, 0]);
        assert_eq!(idx.frequency_vector(0, 0, 0).unwrap(), vec![0, 0, 0]);
        assert!(matches!(
            idx.frequency_vector(0, 0, 3),
            Err(AmcenError::Stale { .. })
        ));
    }

    #[test]
    fn masks_at_time_zero() {
        let idx = FrequencyIndex::new(4);
        assert_eq!(idx.historical_mask(1, 1, 0).unwrap().count(), 0);
        assert_eq!(idx.nonhistorical_mask(1, 1, 0).unwrap().count(), 4);
    }

    #[test]
    fn labels_follow_first_occurrence() {
        let mut idx = FrequencyIndex::new(3);
        let first = Quadruple::new(0, 0, 2, 0);
        assert!(!idx.event_label(&first).unwrap());
        idx.absorb(0, &[first]).unwrap();
        assert!(idx.event_label(&Quadruple::new(0, 0, 2, 1)).unwrap());
        assert!(!idx.event_label(&first).unwrap());
    }

    #[test]
    fn cache_round_trip() {
        let mut idx = FrequencyIndex::new(4);
        idx.absorb(0, &[Quadruple::new(0, 0, 1, 0), Quadruple::new(2, 1, 3, 0)])
            .unwrap();
        idx.absorb(1, &[Quadruple::new(0, 0, 1, 1)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("idx.bin");
        idx.save_cache(&p, "abc").unwrap();
        let back = FrequencyIndex::load_cache(&p, "abc").unwrap().unwrap();
        assert_eq!(back.frontier(), 2);
        assert_eq!(
            back.frequency_vector(0, 0, 2).unwrap(),
            idx.frequency_vector(0, 0, 2).unwrap()
        );
        assert!(FrequencyIndex::load_cache(&p, "other").unwrap().is_none());
    }
}
