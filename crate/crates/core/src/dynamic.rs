//! Batched inserts and deletes that keep the distilled matrix and the
//! frequency statistics in step with the corpus.
//!
//! Inserted records always form new slices at the end of the corpus.
//! Deleted records are tombstoned and only the slices that held them are
//! re-encoded and re-distilled; every other block is left untouched.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::Deserialize;

use crate::corpus::{slice_range, Corpus, SetRecord};
use crate::encoder::{DistilledMatrix, EncoderModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateBatch {
    pub inserts: Vec<SetRecord>,
    pub deletes: Vec<u64>,
}

impl UpdateBatch {
    pub fn is_empty(&self) -> bool {
        self.inserts.is_empty() && self.deletes.is_empty()
    }
}

/// What an update did, including the parts it had to skip.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub inserted: usize,
    pub deleted: usize,
    /// Records that could not be inserted, with the reason.
    pub rejected: Vec<(u64, String)>,
    pub unknown_ids: Vec<u64>,
    /// Slice ids whose distilled block was added or rebuilt.
    pub touched_slices: Vec<usize>,
}

impl UpdateOutcome {
    fn absorb(&mut self, other: UpdateOutcome) {
        self.inserted += other.inserted;
        self.deleted += other.deleted;
        self.rejected.extend(other.rejected);
        self.unknown_ids.extend(other.unknown_ids);
        self.touched_slices.extend(other.touched_slices);
    }
}

/// Append `inserts` as new slices of at most `B_d` records, each encoded
/// and distilled on its own.
pub fn insert_batch(
    corpus: &mut Corpus,
    encoder: &EncoderModel,
    s_c: &mut DistilledMatrix,
    inserts: Vec<SetRecord>,
) -> Result<UpdateOutcome> {
    let mut out = UpdateOutcome::default();
    let start = corpus.positions();
    for rec in inserts {
        let id = rec.id;
        match corpus.push(rec) {
            Ok(_) => out.inserted += 1,
            Err(e) => {
                warn!("insert of record {id} rejected: {e}");
                out.rejected.push((id, e.to_string()));
            }
        }
    }
    let end = corpus.positions();
    if start == end {
        return Ok(out);
    }
    let next_id = s_c.blocks().iter().map(|b| b.slice.slice_id + 1).max().unwrap_or(0);
    for slice in slice_range(start..end, encoder.hyper().b_d, next_id) {
        let block = encoder.distill_slice(corpus, &slice)?;
        out.touched_slices.push(slice.slice_id);
        s_c.push(block);
    }
    Ok(out)
}

/// Tombstone `ids` and rebuild only the blocks of slices that lost records.
/// Unknown ids are reported and skipped.
pub fn delete_sets(
    corpus: &mut Corpus,
    encoder: &EncoderModel,
    s_c: &mut DistilledMatrix,
    ids: &[u64],
) -> Result<UpdateOutcome> {
    let mut out = UpdateOutcome::default();
    let mut positions = Vec::new();
    for &id in ids {
        match corpus.remove(id) {
            Ok(pos) => {
                out.deleted += 1;
                positions.push(pos);
            }
            Err(Error::UnknownRecord(id)) => {
                warn!("delete of unknown record {id} skipped");
                out.unknown_ids.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    let mut affected: Vec<_> = s_c
        .blocks()
        .iter()
        .filter(|b| positions.iter().any(|p| b.slice.range.contains(p)))
        .map(|b| b.slice.clone())
        .collect();
    affected.sort_by_key(|s| s.slice_id);
    for slice in affected {
        let block = encoder.distill_slice(corpus, &slice)?;
        *s_c.block_mut(slice.slice_id).expect("slice came from s_c") = block;
        out.touched_slices.push(slice.slice_id);
    }
    Ok(out)
}

/// Deletions first, then insertions, so an update of a record is a delete
/// plus an insert with the same id.
pub fn apply(
    corpus: &mut Corpus,
    encoder: &EncoderModel,
    s_c: &mut DistilledMatrix,
    batch: UpdateBatch,
) -> Result<UpdateOutcome> {
    let mut out = delete_sets(corpus, encoder, s_c, &batch.deletes)?;
    out.absorb(insert_batch(corpus, encoder, s_c, batch.inserts)?);
    Ok(out)
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum UpdateLine {
    Insert { id: u64, elements: Vec<String> },
    Delete { id: u64 },
}

/// Read an update file. Inserts naming unknown elements, or with no
/// elements, are returned as rejections instead of failing the batch.
pub fn read_updates(path: &Path, corpus: &Corpus) -> Result<(UpdateBatch, Vec<(u64, String)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut batch = UpdateBatch::default();
    let mut rejected = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: UpdateLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            UpdateLine::Delete { id } => batch.deletes.push(id),
            UpdateLine::Insert { id, elements } => match corpus.resolve(&elements) {
                Ok(ids) => match SetRecord::new(id, ids) {
                    Some(r) => batch.inserts.push(r),
                    None => rejected.push((id, "empty element list".to_string())),
                },
                Err(e) => rejected.push((id, e.to_string())),
            },
        }
    }
    Ok((batch, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, hashtag_example};
    use crate::encoder::EncoderHyper;
    use crate::queries::{evaluate_exact, Operator, SetQuery};
    use std::io::Write;

    fn setup() -> (Corpus, EncoderModel, DistilledMatrix) {
        let c = hashtag_example();
        let hyper = EncoderHyper {
            d: 4,
            heads: 2,
            b_d: 3,
            r: 0.5,
            n_distill: 2,
            epochs: 0,
            ..EncoderHyper::default()
        };
        let enc = EncoderModel::new(c.m(), hyper, 1).unwrap();
        let sc = enc.distill_all(&c, &corpus::slice(&c, 3)).unwrap();
        (c, enc, sc)
    }

    #[test]
    fn empty_insert_is_a_no_op() {
        let (mut c, enc, mut sc) = setup();
        let before = sc.clone();
        let out = insert_batch(&mut c, &enc, &mut sc, Vec::new()).unwrap();
        assert_eq!(out.inserted, 0);
        assert_eq!(sc, before);
    }

    #[test]
    fn delete_touches_one_block() {
        let (mut c, enc, mut sc) = setup();
        let before = sc.clone();
        let out = delete_sets(&mut c, &enc, &mut sc, &[4, 99]).unwrap();
        assert_eq!(out.unknown_ids, vec![99]);
        assert_eq!(out.touched_slices, vec![1]);
        let changed: Vec<usize> = (0..3).filter(|&i| before.blocks()[i] != sc.blocks()[i]).collect();
        assert_eq!(changed, vec![1]);
        assert_eq!(sc.blocks()[1].rows.rows(), 1);
    }

    #[test]
    fn delete_then_reinsert_restores_answers() {
        let (mut c, enc, mut sc) = setup();
        let original = hashtag_example();
        let removed: Vec<SetRecord> = [2u64, 5].iter().map(|&id| c.record(c.position_of(id).unwrap()).clone()).collect();
        delete_sets(&mut c, &enc, &mut sc, &[2, 5]).unwrap();
        insert_batch(&mut c, &enc, &mut sc, removed).unwrap();
        let q = SetQuery::new(Operator::Overlap, c.resolve(&["Harris", "Trump"]).unwrap()).unwrap();
        assert_eq!(evaluate_exact(&c, &q).unwrap(), evaluate_exact(&original, &q).unwrap());
        assert_eq!(sc.blocks().len(), 4);
    }

    #[test]
    fn update_file_reports_unknown_elements() {
        let c = hashtag_example();
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"op":"insert","id":10,"elements":["Trump","Harris"]}}"#).unwrap();
        writeln!(f, r#"{{"op":"insert","id":11,"elements":["Nobody"]}}"#).unwrap();
        writeln!(f, r#"{{"op":"delete","id":3}}"#).unwrap();
        let (batch, rejected) = read_updates(f.path(), &c).unwrap();
        assert_eq!(batch.inserts.len(), 1);
        assert_eq!(batch.deletes, vec![3]);
        assert_eq!(rejected.len(), 1);
    }
}
