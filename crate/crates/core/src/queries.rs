//! Set-valued predicates, the exact cardinality oracle, workload generation
//! and the Q-error metric.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ElementId, FrequencyClass};
use crate::error::{Error, Result};

/// PostgreSQL-style array predicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    /// `@>`: the record contains every literal element.
    Superset,
    /// `<@`: every record element is in the literal.
    Subset,
    /// `&&`: the record shares at least one element with the literal.
    Overlap,
}

impl Operator {
    pub const ALL: [Operator; 3] = [Operator::Subset, Operator::Superset, Operator::Overlap];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Superset => "superset",
            Operator::Subset => "subset",
            Operator::Overlap => "overlap",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "superset" | "@>" => Ok(Operator::Superset),
            "subset" | "<@" => Ok(Operator::Subset),
            "overlap" | "&&" => Ok(Operator::Overlap),
            other => Err(Error::Config(format!("unknown operator `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SetQuery {
    pub op: Operator,
    literal: Vec<ElementId>,
}

impl SetQuery {
    /// Sorts and deduplicates the literal. Fails on an empty literal.
    pub fn new(op: Operator, mut literal: Vec<ElementId>) -> Result<Self> {
        literal.sort_unstable();
        literal.dedup();
        if literal.is_empty() {
            return Err(Error::Domain("query literal must be non-empty".into()));
        }
        Ok(Self { op, literal })
    }

    pub fn literal(&self) -> &[ElementId] {
        &self.literal
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        match self.literal.iter().find(|&&e| e as usize >= m) {
            Some(&e) => Err(Error::UnknownElementId(e)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledQuery {
    pub query: SetQuery,
    pub cardinality: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryClass {
    Regular,
    High,
    Low,
}

impl QueryClass {
    pub const ALL: [QueryClass; 3] = [QueryClass::Regular, QueryClass::High, QueryClass::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryClass::Regular => "regular",
            QueryClass::High => "high",
            QueryClass::Low => "low",
        }
    }

    fn element_filter(self) -> Option<FrequencyClass> {
        match self {
            QueryClass::Regular => None,
            QueryClass::High => Some(FrequencyClass::High),
            QueryClass::Low => Some(FrequencyClass::Low),
        }
    }
}

impl fmt::Display for QueryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkloadEntry {
    pub labeled: LabeledQuery,
    pub class: QueryClass,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Workload {
    pub entries: Vec<WorkloadEntry>,
}

impl Workload {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_class(&self, class: QueryClass) -> usize {
        self.entries.iter().filter(|e| e.class == class).count()
    }

    pub fn for_operator(&self, op: Operator) -> Workload {
        Workload {
            entries: self
                .entries
                .iter()
                .filter(|e| e.labeled.query.op == op)
                .cloned()
                .collect(),
        }
    }

    pub fn operators(&self) -> Vec<Operator> {
        let mut ops: Vec<Operator> = self.entries.iter().map(|e| e.labeled.query.op).collect();
        ops.sort();
        ops.dedup();
        ops
    }

    pub fn extend(&mut self, other: Workload) {
        self.entries.extend(other.entries);
    }
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Exact cardinality of `q` over the live records of `corpus`.
pub fn evaluate_exact(corpus: &Corpus, q: &SetQuery) -> Result<u64> {
    q.validate(corpus.m())?;
    let lit = q.literal();
    Ok(match q.op {
        Operator::Superset => superset_count(corpus, lit),
        Operator::Overlap => overlap_count(corpus, lit),
        Operator::Subset => subset_count(corpus, lit),
    })
}

fn superset_count(corpus: &Corpus, lit: &[ElementId]) -> u64 {
    let mut lists: Vec<&[u32]> = lit.iter().map(|&e| corpus.postings(e)).collect();
    lists.sort_by_key(|l| l.len());
    let (first, rest) = lists.split_first().expect("literal is non-empty");
    first
        .iter()
        .filter(|p| rest.iter().all(|l| l.binary_search(p).is_ok()))
        .count() as u64
}

fn overlap_count(corpus: &Corpus, lit: &[ElementId]) -> u64 {
    if lit.len() == 1 {
        return corpus.postings(lit[0]).len() as u64;
    }
    let mut seen = vec![0u64; corpus.positions().div_ceil(64)];
    let mut count = 0u64;
    for &e in lit {
        for &p in corpus.postings(e) {
            let (w, b) = (p as usize / 64, p % 64);
            if seen[w] & (1 << b) == 0 {
                seen[w] |= 1 << b;
                count += 1;
            }
        }
    }
    count
}

fn subset_count(corpus: &Corpus, lit: &[ElementId]) -> u64 {
    // A record qualifies when every one of its elements hits the literal,
    // i.e. its hit count equals its size.
    let mut hits = vec![0u32; corpus.positions()];
    let mut touched = Vec::new();
    for &e in lit {
        for &p in corpus.postings(e) {
            if hits[p as usize] == 0 {
                touched.push(p as usize);
            }
            hits[p as usize] += 1;
        }
    }
    touched
        .into_iter()
        .filter(|&p| hits[p] as usize == corpus.record(p).len())
        .count() as u64
}

/// Per-record scan; the reference the indexed oracle is tested against.
pub fn evaluate_naive(corpus: &Corpus, q: &SetQuery) -> u64 {
    corpus
        .live_records()
        .filter(|(_, r)| matches(r.elements(), q))
        .count() as u64
}

/// Does a sorted record satisfy `q`?
pub fn matches(record: &[ElementId], q: &SetQuery) -> bool {
    let lit = q.literal();
    match q.op {
        Operator::Superset => lit.iter().all(|e| record.binary_search(e).is_ok()),
        Operator::Subset => record.iter().all(|e| lit.binary_search(e).is_ok()),
        Operator::Overlap => record.iter().any(|e| lit.binary_search(e).is_ok()),
    }
}

// ---------------------------------------------------------------------------
// Q-error
// ---------------------------------------------------------------------------

/// `max(1, est/truth, truth/est)`.
pub fn qerror(estimate: f64, truth: f64) -> Result<f64> {
    if !(estimate > 0.0 && estimate.is_finite()) || !(truth > 0.0 && truth.is_finite()) {
        return Err(Error::Domain(format!(
            "q-error needs positive inputs, got estimate={estimate}, truth={truth}"
        )));
    }
    Ok((estimate / truth).max(truth / estimate).max(1.0))
}

/// Clamp an estimate into `[1, n]` (or to 1 when `n == 0`).
pub fn clamp_estimate(estimate: f64, n: usize) -> f64 {
    let hi = (n as f64).max(1.0);
    if estimate.is_nan() {
        return 1.0;
    }
    estimate.clamp(1.0, hi)
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Attempts allowed per workload entry before giving up.
pub const REJECTION_BUDGET: usize = 10_000;

fn live_positions(corpus: &Corpus) -> Vec<usize> {
    corpus.live_records().map(|(p, _)| p).collect()
}

/// Union of `k` records drawn uniformly (with replacement) from `pool`.
fn union_of<R: Rng + ?Sized>(corpus: &Corpus, pool: &[usize], k: usize, rng: &mut R) -> Vec<ElementId> {
    let mut lit = Vec::new();
    for _ in 0..k {
        let p = pool[rng.random_range(0..pool.len())];
        lit.extend_from_slice(corpus.record(p).elements());
    }
    lit.sort_unstable();
    lit.dedup();
    lit
}

/// Subset query: the union of 5 to 10 uniformly drawn records.
pub fn gen_subset_query<R: Rng + ?Sized>(corpus: &Corpus, rng: &mut R) -> Result<SetQuery> {
    let k = rng.random_range(5..=10);
    gen_subset_query_with_k(corpus, k, rng)
}

pub fn gen_subset_query_with_k<R: Rng + ?Sized>(
    corpus: &Corpus,
    k: usize,
    rng: &mut R,
) -> Result<SetQuery> {
    let pool = live_positions(corpus);
    if pool.is_empty() {
        return Err(Error::GenerationInfeasible {
            class: QueryClass::Regular.to_string(),
            reason: "corpus has no records".into(),
        });
    }
    SetQuery::new(Operator::Subset, union_of(corpus, &pool, k, rng))
}

/// Draw `k ~ U{2..=min(4, |elems|)}` distinct elements.
fn draw_elements<R: Rng + ?Sized>(elems: &[ElementId], rng: &mut R) -> Vec<ElementId> {
    let hi = elems.len().min(4);
    let k = rng.random_range(2..=hi);
    sample_indices(rng, elems.len(), k)
        .into_iter()
        .map(|i| elems[i])
        .collect()
}

/// Superset/overlap query: 2 to 4 distinct elements of one uniformly drawn
/// record with at least two elements.
pub fn gen_pointwise_query<R: Rng + ?Sized>(
    corpus: &Corpus,
    op: Operator,
    rng: &mut R,
) -> Result<SetQuery> {
    if op == Operator::Subset {
        return Err(Error::Domain("pointwise generation is for superset/overlap".into()));
    }
    let pool: Vec<usize> = corpus
        .live_records()
        .filter(|(_, r)| r.len() >= 2)
        .map(|(p, _)| p)
        .collect();
    if pool.is_empty() {
        return Err(Error::GenerationInfeasible {
            class: QueryClass::Regular.to_string(),
            reason: "no record has two or more elements".into(),
        });
    }
    let p = pool[rng.random_range(0..pool.len())];
    SetQuery::new(op, draw_elements(corpus.record(p).elements(), rng))
}

/// Split `n_total` by integer `ratios`; the remainder goes to the first
/// classes in order.
pub fn split_by_ratio(n_total: usize, ratios: &[usize]) -> Vec<usize> {
    let sum: usize = ratios.iter().sum();
    if sum == 0 {
        return vec![0; ratios.len()];
    }
    let mut counts: Vec<usize> = ratios.iter().map(|r| n_total * r / sum).collect();
    let mut rest = n_total - counts.iter().sum::<usize>();
    for c in counts.iter_mut() {
        if rest == 0 {
            break;
        }
        *c += 1;
        rest -= 1;
    }
    counts
}

/// Candidate records for one query class, precomputed once per workload.
struct ClassPool {
    class: QueryClass,
    /// For pointwise operators: `(position, class-filtered elements)` of
    /// records with at least two qualifying elements. For subset: records
    /// whose elements all qualify.
    records: Vec<(usize, Vec<ElementId>)>,
}

impl ClassPool {
    fn build(corpus: &Corpus, op: Operator, class: QueryClass) -> Self {
        let n = corpus.n();
        let filter = class.element_filter();
        let keep = |e: &ElementId| match filter {
            None => true,
            Some(fc) => FrequencyClass::of(corpus.freq(*e), n) == fc,
        };
        let records = corpus
            .live_records()
            .filter_map(|(p, r)| {
                let elems: Vec<ElementId> = r.elements().iter().copied().filter(keep).collect();
                let ok = match op {
                    Operator::Subset => elems.len() == r.len(),
                    _ => elems.len() >= 2,
                };
                ok.then_some((p, elems))
            })
            .collect();
        Self { class, records }
    }

    fn draw<R: Rng + ?Sized>(&self, corpus: &Corpus, op: Operator, rng: &mut R) -> Result<SetQuery> {
        match op {
            Operator::Subset => {
                let k = rng.random_range(5..=10);
                let positions: Vec<usize> = self.records.iter().map(|(p, _)| *p).collect();
                SetQuery::new(op, union_of(corpus, &positions, k, rng))
            }
            _ => {
                let (_, elems) = &self.records[rng.random_range(0..self.records.len())];
                SetQuery::new(op, draw_elements(elems, rng))
            }
        }
    }
}

/// Output of [`gen_workload`].
#[derive(Clone, Debug)]
pub struct GeneratedWorkload {
    pub workload: Workload,
    pub warnings: Vec<String>,
}

/// Generate a labeled workload for one operator.
///
/// `ratios` are the regular : high-frequency : low-frequency proportions.
/// Class filters act on the element draw (pointwise operators) or the record
/// draw (subset). A class with no qualifying records falls back to regular
/// queries and records a warning. Queries with zero cardinality are redrawn.
pub fn gen_workload<R: Rng + ?Sized>(
    corpus: &Corpus,
    op: Operator,
    n_total: usize,
    ratios: [usize; 3],
    rng: &mut R,
) -> Result<GeneratedWorkload> {
    let counts = split_by_ratio(n_total, &ratios);
    let mut warnings = Vec::new();
    let mut entries = Vec::with_capacity(n_total);
    let regular = ClassPool::build(corpus, op, QueryClass::Regular);
    if regular.records.is_empty() && n_total > 0 {
        return Err(Error::GenerationInfeasible {
            class: QueryClass::Regular.to_string(),
            reason: match op {
                Operator::Subset => "corpus has no records".into(),
                _ => "no record has two or more elements".into(),
            },
        });
    }
    for (class, &count) in QueryClass::ALL.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        let built;
        let pool = if *class == QueryClass::Regular {
            &regular
        } else {
            built = ClassPool::build(corpus, op, *class);
            if built.records.is_empty() {
                warnings.push(format!(
                    "no records qualify for {class} {op} queries; generating {count} regular queries instead"
                ));
                &regular
            } else {
                &built
            }
        };
        for _ in 0..count {
            let mut attempts = 0;
            let labeled = loop {
                if attempts == REJECTION_BUDGET {
                    return Err(Error::GenerationInfeasible {
                        class: pool.class.to_string(),
                        reason: format!("{REJECTION_BUDGET} draws produced no non-empty query"),
                    });
                }
                attempts += 1;
                let query = pool.draw(corpus, op, rng)?;
                let cardinality = evaluate_exact(corpus, &query)?;
                if cardinality > 0 {
                    break LabeledQuery { query, cardinality };
                }
            };
            entries.push(WorkloadEntry {
                labeled,
                class: pool.class,
            });
        }
    }
    Ok(GeneratedWorkload {
        workload: Workload { entries },
        warnings,
    })
}

/// Relabel every entry against `corpus`, dropping entries that became empty.
pub fn relabel(corpus: &Corpus, workload: &Workload) -> Result<Workload> {
    let labels = crate::par::map(&workload.entries, |e| evaluate_exact(corpus, &e.labeled.query));
    let mut entries = Vec::new();
    for (e, c) in workload.entries.iter().zip(labels) {
        let c = c?;
        if c > 0 {
            let mut e = e.clone();
            e.labeled.cardinality = c;
            entries.push(e);
        }
    }
    Ok(Workload { entries })
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    op: Operator,
    elements: Vec<String>,
    cardinality: u64,
    class: QueryClass,
}

pub fn write_workload(path: &Path, workload: &Workload, corpus: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for e in &workload.entries {
        let line = JsonEntry {
            op: e.labeled.query.op,
            elements: corpus.element_names(e.labeled.query.literal()),
            cardinality: e.labeled.cardinality,
            class: e.class,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_workload(path: &Path, corpus: &Corpus) -> Result<Workload> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let j: JsonEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let query = SetQuery::new(j.op, corpus.resolve(&j.elements)?)?;
        entries.push(WorkloadEntry {
            labeled: LabeledQuery {
                query,
                cardinality: j.cardinality,
            },
            class: j.class,
        });
    }
    Ok(Workload { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::hashtag_example;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q(c: &Corpus, op: Operator, names: &[&str]) -> SetQuery {
        SetQuery::new(op, c.resolve(names).unwrap()).unwrap()
    }

    #[test]
    fn hashtag_cardinalities() {
        let c = hashtag_example();
        assert_eq!(evaluate_exact(&c, &q(&c, Operator::Overlap, &["Harris", "Trump"])).unwrap(), 4);
        assert_eq!(evaluate_exact(&c, &q(&c, Operator::Superset, &["Harris", "Trump"])).unwrap(), 2);
        let sub = q(&c, Operator::Subset, &["Trump", "shot", "Biden", "Harris"]);
        assert_eq!(evaluate_exact(&c, &sub).unwrap(), 2);
        assert_eq!(evaluate_naive(&c, &sub), 2);
    }

    #[test]
    fn unknown_elements_are_errors() {
        let c = hashtag_example();
        assert!(matches!(c.resolve(&["Obama"]), Err(Error::UnknownElement(_))));
        let bogus = SetQuery::new(Operator::Overlap, vec![999]).unwrap();
        assert!(matches!(evaluate_exact(&c, &bogus), Err(Error::UnknownElementId(999))));
    }

    #[test]
    fn qerror_examples() {
        assert_eq!(qerror(4.0, 4.0).unwrap(), 1.0);
        assert_eq!(qerror(6.0, 4.0).unwrap(), 1.5);
        assert_eq!(qerror(2.0, 8.0).unwrap(), 4.0);
        assert!(qerror(0.0, 3.0).is_err());
        assert!(qerror(3.0, -1.0).is_err());
    }

    #[test]
    fn subset_from_single_record() {
        let (c, _) = Corpus::from_named(vec![(0u64, vec!["a", "b"])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = gen_subset_query_with_k(&c, 5, &mut rng).unwrap();
        assert_eq!(s.literal(), &[0, 1]);
        let p = gen_pointwise_query(&c, Operator::Superset, &mut rng).unwrap();
        assert_eq!(p.literal(), &[0, 1]);
    }

    #[test]
    fn generation_is_seeded() {
        let c = hashtag_example();
        let a = gen_subset_query(&c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = gen_subset_query(&c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pointwise_needs_two_elements() {
        let (c, _) = Corpus::from_named(vec![(0u64, vec!["a"]), (1, vec!["b"])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gen_pointwise_query(&c, Operator::Overlap, &mut rng),
            Err(Error::GenerationInfeasible { .. })
        ));
    }

    #[test]
    fn ratio_split() {
        assert_eq!(split_by_ratio(1400, &[3, 2, 2]), vec![600, 400, 400]);
        assert_eq!(split_by_ratio(7, &[3, 2, 2]), vec![3, 2, 2]);
        assert_eq!(split_by_ratio(300, &[3, 2, 2]), vec![129, 86, 85]);
    }

    #[test]
    fn workload_class_counts_on_hashtags() {
        // Every element of the 7-row table is high-frequency, so the low
        // class falls back to regular queries with a warning.
        let c = hashtag_example();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = gen_workload(&c, Operator::Overlap, 7, [3, 2, 2], &mut rng).unwrap();
        assert_eq!(g.workload.len(), 7);
        assert_eq!(g.workload.count_class(QueryClass::High), 2);
        assert_eq!(g.workload.count_class(QueryClass::Regular), 5);
        assert_eq!(g.warnings.len(), 1);
        for e in &g.workload.entries {
            assert_eq!(e.labeled.cardinality, evaluate_exact(&c, &e.labeled.query).unwrap());
            assert!(e.labeled.cardinality > 0);
        }
    }

    #[test]
    fn workload_jsonl_round_trip() {
        let c = hashtag_example();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = gen_workload(&c, Operator::Subset, 10, [3, 2, 2], &mut rng)
            .unwrap()
            .workload;
        let f = tempfile::NamedTempFile::new().unwrap();
        write_workload(f.path(), &w, &c).unwrap();
        assert_eq!(read_workload(f.path(), &c).unwrap(), w);
    }

    #[test]
    fn clamp() {
        assert_eq!(clamp_estimate(0.2, 10), 1.0);
        assert_eq!(clamp_estimate(50.0, 10), 10.0);
        assert_eq!(clamp_estimate(f64::NAN, 10), 1.0);
        assert_eq!(clamp_estimate(5.0, 0), 1.0);
    }
}
