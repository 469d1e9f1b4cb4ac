//! Quadruple datasets: loading, vocabularies, inverse augmentation, snapshots and
//! new/recurring event statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AmcenError, Result};

/// One fact `(subject, relation, object, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: usize,
}

impl Quadruple {
    pub const fn new(subject: usize, relation: usize, object: usize, time: usize) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }

    pub fn triple(&self) -> (usize, usize, usize) {
        (self.subject, self.relation, self.object)
    }
}

impl fmt::Display for Quadruple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.subject, self.relation, self.object, self.time
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entity_count: usize,
    pub base_relation_count: usize,
    pub time_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_names: Option<Vec<String>>,
}

impl Vocabulary {
    pub fn new(entity_count: usize, base_relation_count: usize, time_count: usize) -> Self {
        Self {
            entity_count,
            base_relation_count,
            time_count,
            entity_names: None,
            relation_names: None,
        }
    }

    /// Relation ids after inverse augmentation: `0..2R`.
    pub fn augmented_relation_count(&self) -> usize {
        2 * self.base_relation_count
    }

    /// Id of the self-loop relation used by message passing.
    pub fn self_loop_relation(&self) -> usize {
        2 * self.base_relation_count
    }

    pub fn inverse_relation(&self, relation: usize) -> usize {
        if relation < self.base_relation_count {
            relation + self.base_relation_count
        } else {
            relation - self.base_relation_count
        }
    }

    pub fn is_inverse(&self, relation: usize) -> bool {
        relation >= self.base_relation_count
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Reads whitespace-separated `s r o raw_time [extra...]` lines.
///
/// `time = raw_time / granularity` (integer division); columns after the fourth are ignored.
pub fn load_quadruples(path: &Path, granularity: u64) -> Result<Vec<Quadruple>> {
    if granularity == 0 {
        return Err(AmcenError::Validation(
            "granularity must be positive".into(),
        ));
    }
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| AmcenError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(parse_err(format!(
                "expected at least 4 columns, found {}",
                fields.len()
            )));
        }
        let mut nums = [0i64; 4];
        for (slot, field) in nums.iter_mut().zip(&fields) {
            *slot = field
                .parse::<i64>()
                .map_err(|e| parse_err(format!("{field:?} is not an integer: {e}")))?;
        }
        let [s, r, o, raw] = nums;
        if s < 0 || r < 0 || o < 0 {
            return Err(parse_err("negative id".into()));
        }
        if raw < 0 {
            return Err(AmcenError::Validation(format!(
                "{}:{}: negative raw time {raw}",
                path.display(),
                i + 1
            )));
        }
        out.push(Quadruple::new(
            s as usize,
            r as usize,
            o as usize,
            (raw as u64 / granularity) as usize,
        ));
    }
    Ok(out)
}

/// Writes quadruples in the loader's format with `raw_time = time · granularity`.
pub fn write_quadruples(path: &Path, quads: &[Quadruple], granularity: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for q in quads {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            q.subject,
            q.relation,
            q.object,
            q.time as u64 * granularity
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Counts derived from the largest ids present across the splits.
pub fn build_vocabulary(
    train: &[Quadruple],
    valid: &[Quadruple],
    test: &[Quadruple],
) -> Result<Vocabulary> {
    let all = train.iter().chain(valid).chain(test);
    let mut any = false;
    let (mut e, mut r, mut t) = (0usize, 0usize, 0usize);
    for q in all {
        any = true;
        e = e.max(q.subject).max(q.object);
        r = r.max(q.relation);
        t = t.max(q.time);
    }
    if !any {
        return Err(AmcenError::Validation(
            "cannot build a vocabulary from empty splits".into(),
        ));
    }
    Ok(Vocabulary::new(e + 1, r + 1, t + 1))
}

/// Appends `(o, r + R, s, t)` for every `(s, r, o, t)`; originals keep their order and come first.
pub fn augment_inverse(quads: &[Quadruple], vocab: &Vocabulary) -> Result<Vec<Quadruple>> {
    let base = vocab.base_relation_count;
    if let Some(q) = quads.iter().find(|q| q.relation >= base) {
        return Err(AmcenError::Validation(format!(
            "quadruple {q} already uses an inverse relation id (base count {base})"
        )));
    }
    let mut out = Vec::with_capacity(quads.len() * 2);
    out.extend_from_slice(quads);
    out.extend(
        quads
            .iter()
            .map(|q| Quadruple::new(q.object, q.relation + base, q.subject, q.time)),
    );
    Ok(out)
}

/// First time index of the validation and test ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub valid_start: usize,
    pub test_start: usize,
}

impl SplitBoundaries {
    pub fn split_of(&self, time: usize) -> Split {
        if time < self.valid_start {
            Split::Train
        } else if time < self.test_start {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

/// Facts grouped by time index, with chronological split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    snapshots: Vec<Vec<Quadruple>>,
    boundaries: SplitBoundaries,
}

impl SnapshotSequence {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshot(&self, time: usize) -> &[Quadruple] {
        self.snapshots.get(time).map_or(&[], Vec::as_slice)
    }

    pub fn snapshots(&self) -> &[Vec<Quadruple>] {
        &self.snapshots
    }

    pub fn boundaries(&self) -> SplitBoundaries {
        self.boundaries
    }

    pub fn split_of(&self, time: usize) -> Split {
        self.boundaries.split_of(time)
    }

    /// Time indices tagged with `split`.
    pub fn times_of(&self, split: Split) -> std::ops::Range<usize> {
        let b = self.boundaries;
        let n = self.snapshots.len();
        match split {
            Split::Train => 0..b.valid_start.min(n),
            Split::Valid => b.valid_start.min(n)..b.test_start.min(n),
            Split::Test => b.test_start.min(n)..n,
        }
    }

    pub fn fact_count(&self) -> usize {
        self.snapshots.iter().map(Vec::len).sum()
    }
}

/// Groups facts by time index; every time below `vocab.time_count` gets a snapshot, possibly empty.
/// The whole sequence is tagged as training data.
pub fn split_snapshots(quads: &[Quadruple], vocab: &Vocabulary) -> SnapshotSequence {
    let horizon = quads
        .iter()
        .map(|q| q.time + 1)
        .max()
        .unwrap_or(0)
        .max(vocab.time_count);
    let mut snapshots = vec![Vec::new(); horizon];
    for q in quads {
        snapshots[q.time].push(*q);
    }
    SnapshotSequence {
        snapshots,
        boundaries: SplitBoundaries {
            valid_start: horizon,
            test_start: horizon,
        },
    }
}

/// A loaded benchmark: base (non-augmented) quadruples with time indices rebased to start at 0.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub vocab: Vocabulary,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
}

impl Dataset {
    /// Builds a dataset from in-memory splits, validating ids and chronology.
    pub fn from_splits(
        name: impl Into<String>,
        train: Vec<Quadruple>,
        valid: Vec<Quadruple>,
        test: Vec<Quadruple>,
    ) -> Result<Self> {
        let vocab = build_vocabulary(&train, &valid, &test)?;
        Self::with_vocabulary(name, vocab, train, valid, test)
    }

    pub fn with_vocabulary(
        name: impl Into<String>,
        vocab: Vocabulary,
        train: Vec<Quadruple>,
        valid: Vec<Quadruple>,
        test: Vec<Quadruple>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            vocab,
            train,
            valid,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let v = &self.vocab;
        for q in self.train.iter().chain(&self.valid).chain(&self.test) {
            if q.subject >= v.entity_count || q.object >= v.entity_count {
                return Err(AmcenError::Validation(format!(
                    "{q}: entity id outside 0..{}",
                    v.entity_count
                )));
            }
            if q.relation >= v.base_relation_count {
                return Err(AmcenError::Validation(format!(
                    "{q}: relation id outside 0..{}",
                    v.base_relation_count
                )));
            }
            if q.time >= v.time_count {
                return Err(AmcenError::Validation(format!(
                    "{q}: time outside 0..{}",
                    v.time_count
                )));
            }
        }
        let max_of = |qs: &[Quadruple]| qs.iter().map(|q| q.time).max();
        let min_of = |qs: &[Quadruple]| qs.iter().map(|q| q.time).min();
        let ordered = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (Some(a), Some(b)) => a < b,
            _ => true,
        };
        let train_max = max_of(&self.train);
        let valid_max = max_of(&self.valid).or(train_max);
        if !ordered(train_max, min_of(&self.valid))
            || !ordered(valid_max, min_of(&self.test))
            || !ordered(train_max, min_of(&self.test))
        {
            return Err(AmcenError::Validation(
                "splits are not chronological (train < valid < test)".into(),
            ));
        }
        Ok(())
    }

    /// Loads `train.txt`, `valid.txt`, `test.txt` and the optional `entity2id.txt`,
    /// `relation2id.txt` and `stat.txt` from `dir`.
    pub fn load_dir(dir: &Path, granularity: u64) -> Result<Self> {
        if !dir.is_dir() {
            return Err(AmcenError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset directory {} not found", dir.display()),
            )));
        }
        let mut splits = Vec::new();
        for name in ["train.txt", "valid.txt", "test.txt"] {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(AmcenError::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("missing {}", path.display()),
                )));
            }
            splits.push(load_quadruples(&path, granularity)?);
        }
        let min_time = splits.iter().flatten().map(|q| q.time).min().unwrap_or(0);
        for q in splits.iter_mut().flatten() {
            q.time -= min_time;
        }
        let [train, valid, test]: [Vec<Quadruple>; 3] = splits.try_into().expect("three splits");
        let mut vocab = build_vocabulary(&train, &valid, &test)?;

        let entity_names = read_name_map(&dir.join("entity2id.txt"))?;
        let relation_names = read_name_map(&dir.join("relation2id.txt"))?;
        if let Some((e, r)) = read_stat(&dir.join("stat.txt"))? {
            vocab.entity_count = vocab.entity_count.max(e);
            vocab.base_relation_count = vocab.base_relation_count.max(r);
        }
        if let Some(names) = entity_names {
            if names.len() < vocab.entity_count {
                return Err(AmcenError::Validation(format!(
                    "entity2id.txt lists {} names but ids reach {}",
                    names.len(),
                    vocab.entity_count
                )));
            }
            vocab.entity_count = names.len();
            vocab.entity_names = Some(names);
        }
        if let Some(names) = relation_names {
            if names.len() < vocab.base_relation_count {
                return Err(AmcenError::Validation(format!(
                    "relation2id.txt lists {} names but ids reach {}",
                    names.len(),
                    vocab.base_relation_count
                )));
            }
            vocab.base_relation_count = names.len();
            vocab.relation_names = Some(names);
        }
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::with_vocabulary(name, vocab, train, valid, test)
    }

    pub fn split(&self, split: Split) -> &[Quadruple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_base(&self) -> Vec<Quadruple> {
        let mut all = Vec::with_capacity(self.train.len() + self.valid.len() + self.test.len());
        all.extend_from_slice(&self.train);
        all.extend_from_slice(&self.valid);
        all.extend_from_slice(&self.test);
        all
    }

    pub fn boundaries(&self) -> SplitBoundaries {
        let t = self.vocab.time_count;
        let min_or =
            |qs: &[Quadruple], fallback: usize| qs.iter().map(|q| q.time).min().unwrap_or(fallback);
        let train_end = self.train.iter().map(|q| q.time + 1).max().unwrap_or(0);
        let test_start = min_or(&self.test, t);
        let valid_start = min_or(&self.valid, test_start.max(train_end))
            .min(test_start)
            .max(train_end);
        SplitBoundaries {
            valid_start,
            test_start,
        }
    }

    /// Base facts grouped by time with split tags.
    pub fn base_snapshots(&self) -> SnapshotSequence {
        let mut seq = split_snapshots(&self.all_base(), &self.vocab);
        seq.boundaries = self.boundaries();
        seq
    }

    /// Inverse-augmented facts grouped by time with split tags.
    pub fn augmented_snapshots(&self) -> SnapshotSequence {
        let aug = augment_inverse(&self.all_base(), &self.vocab).expect("validated base relations");
        let mut seq = split_snapshots(&aug, &self.vocab);
        seq.boundaries = self.boundaries();
        // keep, per timestamp, base facts before their inverses
        for snap in &mut seq.snapshots {
            snap.sort_by_key(|q| q.relation >= self.vocab.base_relation_count);
        }
        seq
    }

    /// SHA-256 over vocabulary sizes and every split, for cache and checkpoint keys.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for n in [
            self.vocab.entity_count,
            self.vocab.base_relation_count,
            self.vocab.time_count,
        ] {
            h.update((n as u64).to_le_bytes());
        }
        for (tag, qs) in [(0u8, &self.train), (1, &self.valid), (2, &self.test)] {
            h.update([tag]);
            for q in qs.iter() {
                for v in [q.subject, q.relation, q.object, q.time] {
                    h.update((v as u64).to_le_bytes());
                }
            }
        }
        format!("{:x}", h.finalize())
    }
}

fn read_name_map(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let (name, id) = line
            .rsplit_once(['\t', ' '])
            .ok_or_else(|| AmcenError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `name<TAB>id`".into(),
            })?;
        let id: usize = id.trim().parse().map_err(|e| AmcenError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: format!("bad id: {e}"),
        })?;
        pairs.push((id, name.trim().to_string()));
    }
    let n = pairs.len();
    let mut names = vec![None; n];
    for (id, name) in pairs {
        if id >= n || names[id].is_some() {
            return Err(AmcenError::Validation(format!(
                "{}: ids must be a permutation of 0..{n}",
                path.display()
            )));
        }
        names[id] = Some(name);
    }
    let names: Vec<String> = names.into_iter().map(|n| n.expect("filled")).collect();
    let distinct: HashSet<&String> = names.iter().collect();
    if distinct.len() != names.len() {
        return Err(AmcenError::Validation(format!(
            "{}: duplicate names",
            path.display()
        )));
    }
    Ok(Some(names))
}

fn read_stat(path: &Path) -> Result<Option<(usize, usize)>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .take(2)
        .map(|s| s.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| AmcenError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("bad count: {e}"),
        })?;
    Ok(match nums.as_slice() {
        [e, r] => Some((*e, *r)),
        _ => None,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub events: usize,
    pub new_events: usize,
    pub proportion: f64,
}

impl SplitStats {
    fn finish(&mut self) {
        self.proportion = if self.events == 0 {
            0.0
        } else {
            self.new_events as f64 / self.events as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestampStats {
    pub time: usize,
    pub split: Split,
    pub events: usize,
    pub new_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    /// Keyed by `train`, `valid`, `test` and `all`.
    pub splits: BTreeMap<String, SplitStats>,
    pub per_timestamp: Vec<TimestampStats>,
}

impl StatsReport {
    pub fn overall(&self) -> &SplitStats {
        &self.splits["all"]
    }

    pub fn split(&self, split: Split) -> &SplitStats {
        &self.splits[split.name()]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.splits)?)
    }

    pub fn write_timestamp_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time", "split", "events", "new_events", "proportion"])?;
        for row in &self.per_timestamp {
            let p = if row.events == 0 {
                0.0
            } else {
                row.new_events as f64 / row.events as f64
            };
            w.write_record([
                row.time.to_string(),
                row.split.name().to_string(),
                row.events.to_string(),
                row.new_events.to_string(),
                format!("{p:.6}"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_split_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["split", "events", "new_events", "proportion"])?;
        for (name, s) in &self.splits {
            w.write_record([
                name.clone(),
                s.events.to_string(),
                s.new_events.to_string(),
                format!("{:.6}", s.proportion),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Streams snapshots in time order; an event is new iff its base `(s, r, o)` triple did not
/// occur at any strictly earlier time. Inverse-relation facts are ignored, so the sequence may be
/// either base or augmented, as long as `base_relation_count` is given.
pub fn dataset_statistics(seq: &SnapshotSequence, base_relation_count: usize) -> StatsReport {
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::new();
    let mut splits: BTreeMap<String, SplitStats> = BTreeMap::new();
    for name in ["train", "valid", "test", "all"] {
        splits.insert(name.to_string(), SplitStats::default());
    }
    let mut per_timestamp = Vec::with_capacity(seq.len());
    for (time, snap) in seq.snapshots().iter().enumerate() {
        let split = seq.split_of(time);
        let base: Vec<&Quadruple> = snap
            .iter()
            .filter(|q| q.relation < base_relation_count)
            .collect();
        let new_events = base.iter().filter(|q| !seen.contains(&q.triple())).count();
        for key in [split.name(), "all"] {
            let s = splits.get_mut(key).expect("present");
            s.events += base.len();
            s.new_events += new_events;
        }
        per_timestamp.push(TimestampStats {
            time,
            split,
            events: base.len(),
            new_events,
        });
        seen.extend(base.iter().map(|q| q.triple()));
    }
    for s in splits.values_mut() {
        s.finish();
    }
    StatsReport {
        splits,
        per_timestamp,
    }
}

pub fn default_data_root() -> Option<PathBuf> {
    std::env::var_os("AMCEN_DATA_DIR").map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_division_of_raw_times() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        fs::write(&p, "0\t0\t1\t0\n1 0 2 24 99\n2\t1\t0\t48\n").unwrap();
        let q = load_quadruples(&p, 24).unwrap();
        assert_eq!(q.iter().map(|q| q.time).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(q[1], Quadruple::new(1, 0, 2, 1));
    }

    #[test]
    fn empty_file_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        fs::write(&p, "").unwrap();
        assert!(load_quadruples(&p, 1).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        fs::write(&p, "0 0 1 0\n0 0 x 0\n").unwrap();
        match load_quadruples(&p, 1) {
            Err(AmcenError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, "0 0 1\n").unwrap();
        assert!(matches!(
            load_quadruples(&p, 1),
            Err(AmcenError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn negative_time_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.txt");
        fs::write(&p, "0 0 1 -24\n").unwrap();
        assert!(matches!(
            load_quadruples(&p, 24),
            Err(AmcenError::Validation(_))
        ));
    }

    #[test]
    fn minimal_vocabulary() {
        let v = build_vocabulary(&[Quadruple::new(0, 0, 1, 0)], &[], &[]).unwrap();
        assert_eq!(
            (v.entity_count, v.base_relation_count, v.time_count),
            (2, 1, 1)
        );
        assert!(build_vocabulary(&[], &[], &[]).is_err());
    }

    #[test]
    fn inverse_augmentation() {
        let v = Vocabulary::new(2, 1, 6);
        let out = augment_inverse(&[Quadruple::new(0, 0, 1, 5)], &v).unwrap();
        assert_eq!(
            out,
            vec![Quadruple::new(0, 0, 1, 5), Quadruple::new(1, 1, 0, 5)]
        );
        assert_eq!(v.inverse_relation(v.inverse_relation(0)), 0);
        assert!(augment_inverse(&out, &v).is_err());
    }

    #[test]
    fn grouping_leaves_gaps_empty() {
        let quads = [
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(1, 0, 0, 0),
            Quadruple::new(0, 0, 1, 2),
        ];
        let v = build_vocabulary(&quads, &[], &[]).unwrap();
        let seq = split_snapshots(&quads, &v);
        let sizes: Vec<usize> = seq.snapshots().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![2, 0, 1]);
        assert_eq!(seq.fact_count(), 3);
    }

    #[test]
    fn unique_triples_are_all_new() {
        let quads: Vec<_> = (0..10).map(|i| Quadruple::new(i, 0, i + 1, i)).collect();
        let v = build_vocabulary(&quads, &[], &[]).unwrap();
        let r = dataset_statistics(&split_snapshots(&quads, &v), 1);
        assert_eq!(r.overall().proportion, 1.0);
    }

    #[test]
    fn same_time_repeats_stay_new() {
        let quads = [
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(0, 0, 1, 0),
            Quadruple::new(0, 0, 1, 1),
        ];
        let v = build_vocabulary(&quads, &[], &[]).unwrap();
        let r = dataset_statistics(&split_snapshots(&quads, &v), 1);
        assert_eq!(r.overall().new_events, 2);
        assert_eq!(r.overall().events, 3);
    }

    #[test]
    fn chronology_is_enforced() {
        let err = Dataset::from_splits(
            "bad",
            vec![Quadruple::new(0, 0, 1, 3)],
            vec![Quadruple::new(0, 0, 1, 2)],
            vec![],
        );
        assert!(matches!(err, Err(AmcenError::Validation(_))));
    }

    #[test]
    fn load_dir_rebases_and_reads_name_maps() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "0 0 1 24\n1 1 2 48\n").unwrap();
        fs::write(dir.path().join("valid.txt"), "2 0 0 72\n").unwrap();
        fs::write(dir.path().join("test.txt"), "0 1 2 96\n").unwrap();
        fs::write(dir.path().join("entity2id.txt"), "a\t0\nb\t1\nc\t2\nd\t3\n").unwrap();
        let ds = Dataset::load_dir(dir.path(), 24).unwrap();
        assert_eq!(ds.train[0].time, 0);
        assert_eq!(ds.vocab.entity_count, 4);
        assert_eq!(ds.vocab.time_count, 4);
        let b = ds.boundaries();
        assert_eq!((b.valid_start, b.test_start), (2, 3));
        let seq = ds.augmented_snapshots();
        assert_eq!(seq.fact_count(), 8);
        assert_eq!(seq.times_of(Split::Test), 3..4);
    }
}
