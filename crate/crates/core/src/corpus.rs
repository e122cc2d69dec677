//! Set-valued corpus: element universe, records, inverted index and
//! per-element frequency counts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ElementId = u32;

/// Dense mapping between element strings and ids `0..M`.
///
/// Ids are handed out in first-occurrence order, so ingesting the same file
/// twice produces the same assignment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ElementUniverse {
    names: Vec<String>,
    index: HashMap<String, ElementId>,
}

impl ElementUniverse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut u = Self::new();
        for n in names {
            u.intern(n.as_ref());
        }
        u
    }

    /// Return the id for `name`, assigning the next free id if unseen.
    pub fn intern(&mut self, name: &str) -> ElementId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as ElementId;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ElementId> {
        self.index.get(name).copied()
    }

    pub fn resolve(&self, name: &str) -> Result<ElementId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownElement(name.to_owned()))
    }

    pub fn name(&self, id: ElementId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of distinct elements, `M`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One set-valued row. Elements are strictly ascending and non-empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SetRecord {
    pub id: u64,
    elements: Vec<ElementId>,
}

impl SetRecord {
    /// Sorts and deduplicates `elements`. Returns `None` for an empty set.
    pub fn new(id: u64, mut elements: Vec<ElementId>) -> Option<Self> {
        elements.sort_unstable();
        elements.dedup();
        if elements.is_empty() {
            None
        } else {
            Some(Self { id, elements })
        }
    }

    pub fn elements(&self) -> &[ElementId] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn contains(&self, e: ElementId) -> bool {
        self.elements.binary_search(&e).is_ok()
    }
}

/// Element rarity bucket used to stratify workloads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyClass {
    Low,
    Medium,
    High,
}

impl FrequencyClass {
    /// Low iff `freq/n <= 0.0001`, High iff `freq/n >= 0.001`.
    ///
    /// Evaluated in integers so the boundaries are exact.
    pub fn of(freq: u64, n: usize) -> Self {
        let n = n as u128;
        let f = freq as u128;
        if f * 10_000 <= n {
            FrequencyClass::Low
        } else if f * 1_000 >= n {
            FrequencyClass::High
        } else {
            FrequencyClass::Medium
        }
    }
}

/// Snapshot of per-element occurrence counts and the live record count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
    pub n: usize,
}

impl FrequencyTable {
    pub fn count(&self, e: ElementId) -> Result<u64> {
        self.counts
            .get(e as usize)
            .copied()
            .ok_or(Error::UnknownElementId(e))
    }

    pub fn class(&self, e: ElementId) -> Result<FrequencyClass> {
        Ok(FrequencyClass::of(self.count(e)?, self.n))
    }
}

/// Contiguous range of record positions distilled together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSlice {
    pub slice_id: usize,
    pub range: Range<usize>,
}

impl CorpusSlice {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Counts reported by [`ingest_jsonl`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub rejected_empty: usize,
}

/// The indexed dataset.
///
/// Deleted records stay in place as tombstones so that slice ranges remain
/// stable; `inverted` and `freq` only ever reflect live records.
#[derive(Clone, Debug)]
pub struct Corpus {
    universe: ElementUniverse,
    records: Vec<SetRecord>,
    live: Vec<bool>,
    inverted: Vec<Vec<u32>>,
    freq: Vec<u64>,
    by_id: HashMap<u64, usize>,
    n_live: usize,
}

impl Corpus {
    /// Empty corpus over a fixed universe.
    pub fn empty(universe: ElementUniverse) -> Self {
        let m = universe.len();
        Self {
            universe,
            records: Vec::new(),
            live: Vec::new(),
            inverted: vec![Vec::new(); m],
            freq: vec![0; m],
            by_id: HashMap::new(),
            n_live: 0,
        }
    }

    /// Build a corpus from named records, interning elements in order.
    ///
    /// Empty sets are skipped and counted in the returned stats. Duplicate
    /// record ids are rejected.
    pub fn from_named<I, S>(rows: I) -> Result<(Self, IngestStats)>
    where
        I: IntoIterator<Item = (u64, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut universe = ElementUniverse::new();
        let mut pending = Vec::new();
        let mut stats = IngestStats::default();
        for (line, (id, names)) in rows.into_iter().enumerate() {
            stats.lines += 1;
            let ids: Vec<ElementId> = names.iter().map(|n| universe.intern(n.as_ref())).collect();
            match SetRecord::new(id, ids) {
                Some(r) => pending.push((line + 1, r)),
                None => stats.rejected_empty += 1,
            }
        }
        let mut corpus = Corpus::empty(universe);
        for (line, r) in pending {
            if corpus.by_id.contains_key(&r.id) {
                return Err(Error::Parse {
                    line,
                    message: format!("duplicate record id {}", r.id),
                });
            }
            corpus.push(r)?;
        }
        Ok((corpus, stats))
    }

    /// Append a record. Elements must already exist in the universe.
    pub fn push(&mut self, record: SetRecord) -> Result<usize> {
        if let Some(&bad) = record
            .elements
            .iter()
            .find(|&&e| e as usize >= self.universe.len())
        {
            return Err(Error::UnknownElementId(bad));
        }
        if self.by_id.contains_key(&record.id) {
            return Err(Error::Domain(format!("record id {} already present", record.id)));
        }
        let pos = self.records.len();
        for &e in &record.elements {
            self.inverted[e as usize].push(pos as u32);
            self.freq[e as usize] += 1;
        }
        self.by_id.insert(record.id, pos);
        self.records.push(record);
        self.live.push(true);
        self.n_live += 1;
        Ok(pos)
    }

    /// Tombstone the record with `id`, returning its position.
    pub fn remove(&mut self, id: u64) -> Result<usize> {
        let pos = self.by_id.remove(&id).ok_or(Error::UnknownRecord(id))?;
        self.live[pos] = false;
        self.n_live -= 1;
        for &e in &self.records[pos].elements {
            let list = &mut self.inverted[e as usize];
            if let Ok(i) = list.binary_search(&(pos as u32)) {
                list.remove(i);
            }
            self.freq[e as usize] -= 1;
        }
        Ok(pos)
    }

    pub fn universe(&self) -> &ElementUniverse {
        &self.universe
    }

    /// Live record count, `N`.
    pub fn n(&self) -> usize {
        self.n_live
    }

    /// Distinct element count, `M`.
    pub fn m(&self) -> usize {
        self.universe.len()
    }

    /// Total positions including tombstones.
    pub fn positions(&self) -> usize {
        self.records.len()
    }

    pub fn record(&self, pos: usize) -> &SetRecord {
        &self.records[pos]
    }

    pub fn is_live(&self, pos: usize) -> bool {
        self.live[pos]
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    /// Live records in position order.
    pub fn live_records(&self) -> impl Iterator<Item = (usize, &SetRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(p, _)| self.live[*p])
    }

    pub fn live_positions(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&p| self.live[p]).collect()
    }

    /// Positions of live records containing `e`, ascending.
    pub fn postings(&self, e: ElementId) -> &[u32] {
        &self.inverted[e as usize]
    }

    pub fn freq(&self, e: ElementId) -> u64 {
        self.freq[e as usize]
    }

    pub fn frequencies(&self) -> FrequencyTable {
        FrequencyTable {
            counts: self.freq.clone(),
            n: self.n_live,
        }
    }

    /// Resolve element names against the universe.
    pub fn resolve<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<ElementId>> {
        names.iter().map(|n| self.universe.resolve(n.as_ref())).collect()
    }

    pub fn element_names(&self, ids: &[ElementId]) -> Vec<String> {
        ids.iter()
            .map(|&e| self.universe.name(e).unwrap_or("?").to_owned())
            .collect()
    }

    /// Write live records as JSONL in position order.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for (_, r) in self.live_records() {
            let line = JsonRecord {
                id: r.id,
                elements: self.element_names(&r.elements),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
    /// Write every position, tombstones included, with the full universe so
    /// element ids and slice ranges survive a reload.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let snap = Snapshot {
            elements: self.universe.names().to_vec(),
            records: self
                .records
                .iter()
                .zip(&self.live)
                .map(|(r, &live)| SnapshotRecord {
                    id: r.id,
                    elements: r.elements.clone(),
                    live,
                })
                .collect(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut w, &snap)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let snap: Snapshot = serde_json::from_reader(BufReader::new(file))?;
        let mut corpus = Corpus::empty(ElementUniverse::from_names(snap.elements));
        for r in snap.records {
            let record = SetRecord::new(r.id, r.elements)
                .ok_or_else(|| Error::Domain(format!("record {} has no elements", r.id)))?;
            corpus.push(record)?;
            if !r.live {
                corpus.remove(r.id)?;
            }
        }
        Ok(corpus)
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    elements: Vec<String>,
    records: Vec<SnapshotRecord>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotRecord {
    id: u64,
    elements: Vec<ElementId>,
    live: bool,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: u64,
    elements: Vec<String>,
}

/// Load a JSONL dataset: one `{"id": int, "elements": [string, ...]}` per line.
///
/// Blank lines are ignored. Empty element arrays are counted in
/// [`IngestStats::rejected_empty`] rather than stored.
pub fn ingest_jsonl(path: &Path) -> Result<(Corpus, IngestStats)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push((rec.id, rec.elements));
    }
    Corpus::from_named(rows)
}

pub fn frequency_class(corpus: &Corpus, e: ElementId) -> Result<FrequencyClass> {
    if e as usize >= corpus.m() {
        return Err(Error::UnknownElementId(e));
    }
    Ok(FrequencyClass::of(corpus.freq(e), corpus.n()))
}

/// Partition record positions `0..positions` into runs of `b_d`.
pub fn slice(corpus: &Corpus, b_d: usize) -> Vec<CorpusSlice> {
    slice_range(0..corpus.positions(), b_d, 0)
}

/// Partition an arbitrary position range, numbering slices from `first_id`.
pub fn slice_range(range: Range<usize>, b_d: usize, first_id: usize) -> Vec<CorpusSlice> {
    assert!(b_d >= 1, "slice size must be positive");
    let mut out = Vec::new();
    let mut start = range.start;
    while start < range.end {
        let end = (start + b_d).min(range.end);
        out.push(CorpusSlice {
            slice_id: first_id + out.len(),
            range: start..end,
        });
        start = end;
    }
    out
}

/// The seven-row hashtag table used throughout the tests and docs.
pub fn hashtag_example() -> Corpus {
    let rows: Vec<(u64, Vec<&str>)> = vec![
        (1, vec!["Trump", "shot"]),
        (2, vec!["Spain", "Euros", "Yamal"]),
        (3, vec!["Biden", "Harris", "Trump"]),
        (4, vec!["Harris", "Trump", "debate"]),
        (5, vec!["JD Vance", "Trump"]),
        (6, vec!["Messi", "Yamal"]),
        (7, vec!["Messi", "Argentina", "Copa America"]),
    ];
    Corpus::from_named(rows).expect("fixture is valid").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn hashtag_counts() {
        let c = hashtag_example();
        assert_eq!(c.n(), 7);
        let trump = c.universe().id("Trump").unwrap();
        let harris = c.universe().id("Harris").unwrap();
        assert_eq!(c.freq(trump), 4);
        assert_eq!(c.freq(harris), 2);
    }

    #[test]
    fn singleton_file() {
        let f = write_tmp(&[r#"{"id":0,"elements":["a"]}"#]);
        let (c, stats) = ingest_jsonl(f.path()).unwrap();
        assert_eq!((c.n(), c.m()), (1, 1));
        assert_eq!(c.freq(0), 1);
        assert_eq!(stats.rejected_empty, 0);
    }

    #[test]
    fn duplicates_inside_a_set_collapse() {
        let f = write_tmp(&[r#"{"id":9,"elements":["a","a","b"]}"#]);
        let (c, _) = ingest_jsonl(f.path()).unwrap();
        assert_eq!(c.record(0).elements(), &[0, 1]);
        assert_eq!(c.freq(c.universe().id("a").unwrap()), 1);
    }

    #[test]
    fn empty_sets_are_counted_not_stored() {
        let f = write_tmp(&[
            r#"{"id":1,"elements":[]}"#,
            r#"{"id":2,"elements":["x"]}"#,
        ]);
        let (c, stats) = ingest_jsonl(f.path()).unwrap();
        assert_eq!(c.n(), 1);
        assert_eq!(stats.rejected_empty, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(&[r#"{"id":1,"elements":["x"]}"#, "{not json"]);
        match ingest_jsonl(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn frequency_class_boundaries() {
        assert_eq!(FrequencyClass::of(220, 2_200_000), FrequencyClass::Low);
        assert_eq!(FrequencyClass::of(1, 1000), FrequencyClass::High);
        assert_eq!(FrequencyClass::of(4, 7), FrequencyClass::High);
        assert_eq!(FrequencyClass::of(221, 2_200_000), FrequencyClass::Medium);
        assert_eq!(FrequencyClass::of(2199, 2_200_000), FrequencyClass::Medium);
        assert_eq!(FrequencyClass::of(2200, 2_200_000), FrequencyClass::High);
    }

    #[test]
    fn slicing() {
        let c = hashtag_example();
        let sizes: Vec<usize> = slice(&c, 3).iter().map(CorpusSlice::len).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        assert!(slice(&Corpus::empty(ElementUniverse::new()), 5).is_empty());
        assert_eq!(slice_range(0..10_000, 10_000, 0).len(), 1);
    }

    #[test]
    fn snapshot_keeps_tombstones_and_ids() {
        let mut c = hashtag_example();
        c.remove(3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        c.save_snapshot(&path).unwrap();
        let back = Corpus::load_snapshot(&path).unwrap();
        assert_eq!(back.positions(), 7);
        assert_eq!(back.n(), 6);
        assert!(!back.is_live(2));
        assert_eq!(back.universe().names(), c.universe().names());
        assert_eq!(back.frequencies(), c.frequencies());
    }

    #[test]
    fn remove_keeps_freq_consistent() {
        let mut c = hashtag_example();
        let trump = c.universe().id("Trump").unwrap();
        c.remove(3).unwrap();
        assert_eq!(c.freq(trump), 3);
        assert_eq!(c.postings(trump).len(), 3);
        assert_eq!(c.n(), 6);
        assert!(matches!(c.remove(3), Err(Error::UnknownRecord(3))));
    }
}
