//! The external visual-name memory: an append-only list of
//! `(key embedding, object name)` pairs scanned exactly at query time.

mod record;

use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

pub use record::{read_jsonl, MemoryRecord, RecordJson, RecordPayload, Source};

use crate::binio::{fnv1a64, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::par;
use crate::vecmath::{l2_norm, mean_embed};

pub const MEMORY_MAGIC: &[u8; 4] = b"EVCM";
pub const MEMORY_VERSION: u32 = 1;

/// Immutable snapshot of the memory. Keys are stored contiguously with their
/// norms cached; expansion produces a new snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualNameMemory {
    dim: usize,
    keys: Vec<f32>,
    norms: Vec<f64>,
    names: Vec<String>,
    sources: Vec<Source>,
}

/// Borrowed view of one stored pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEntry<'a> {
    pub key: &'a [f32],
    pub name: &'a str,
    pub norm: f64,
    pub source: Source,
    pub insert_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryStats {
    pub count: usize,
    pub distinct_names: usize,
    pub dim: usize,
    pub real: usize,
    pub synthetic: usize,
    pub unspecified: usize,
}

impl VisualNameMemory {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            norms: Vec::new(),
            names: Vec::new(),
            sources: Vec::new(),
        }
    }

    /// Builds a memory with one entry per record, in record order.
    pub fn build(records: &[MemoryRecord], dim: usize) -> Result<Self> {
        Self::empty(dim).expand(records)
    }

    /// Returns a new snapshot holding the current entries followed by
    /// `records`. `self` is left untouched.
    pub fn expand(&self, records: &[MemoryRecord]) -> Result<Self> {
        let base = self.len();
        let pooled = par::map_range(records.len(), |i| pool_record(base + i, &records[i], self.dim));
        let mut next = self.clone();
        next.keys.reserve(records.len() * self.dim);
        for (rec, pooled) in records.iter().zip(pooled) {
            let (key, norm) = pooled?;
            next.keys.extend_from_slice(&key);
            next.norms.push(norm);
            next.names.push(rec.name.clone());
            next.sources.push(rec.source);
        }
        Ok(next)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn entry(&self, i: usize) -> MemoryEntry<'_> {
        MemoryEntry {
            key: self.key(i),
            name: &self.names[i],
            norm: self.norms[i],
            source: self.sources[i],
            insert_index: i,
        }
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = MemoryEntry<'_>> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    /// Distinct names in first-insertion order.
    pub fn distinct_names(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.names
            .iter()
            .filter(|n| seen.insert(n.as_str()))
            .map(String::as_str)
            .collect()
    }

    pub fn stats(&self) -> MemoryStats {
        let count_of = |s| self.sources.iter().filter(|&&x| x == s).count();
        MemoryStats {
            count: self.len(),
            distinct_names: self.names.iter().collect::<HashSet<_>>().len(),
            dim: self.dim,
            real: count_of(Source::Real),
            synthetic: count_of(Source::Synthetic),
            unspecified: count_of(Source::Unspecified),
        }
    }

    /// Content checksum of the persisted form.
    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(MEMORY_MAGIC, MEMORY_VERSION);
        enc.u32(self.dim as u32);
        enc.u64(self.len() as u64);
        for i in 0..self.len() {
            enc.u8(self.sources[i].tag());
            enc.str(&self.names[i]);
            enc.f32s(self.key(i));
        }
        enc.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::open(bytes, MEMORY_MAGIC, MEMORY_VERSION)?;
        let dim = dec.u32("dim")? as usize;
        let count = dec.u64("count")?;
        // every entry needs at least 5 header bytes plus its key
        let min_entry = 5 + 4 * dim as u64;
        if count.saturating_mul(min_entry) > bytes.len() as u64 {
            return Err(Error::Format(format!(
                "truncated file: {count} entries cannot fit in {} bytes",
                bytes.len()
            )));
        }
        let mut mem = Self::empty(dim);
        for i in 0..count as usize {
            let tag = dec.u8("source tag")?;
            let source =
                Source::from_tag(tag).ok_or_else(|| Error::Format(format!("entry {i}: unknown source tag {tag}")))?;
            let name = dec.str("name")?;
            let key = dec.f32s(dim, "key")?;
            if key.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("entry {i}: non-finite key")));
            }
            let norm = l2_norm(&key);
            if norm == 0.0 {
                return Err(Error::Format(format!("entry {i}: zero-norm key")));
            }
            mem.keys.extend_from_slice(&key);
            mem.norms.push(norm);
            mem.names.push(name);
            mem.sources.push(source);
        }
        dec.finish()?;
        Ok(mem)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn pool_record(index: usize, rec: &MemoryRecord, dim: usize) -> Result<(Vec<f32>, f64)> {
    if rec.name.trim().is_empty() {
        return Err(Error::InvalidRecord {
            index,
            reason: "name is empty".into(),
        });
    }
    if rec.payload.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: rec.payload.dim(),
        });
    }
    let key = match &rec.payload {
        RecordPayload::Embeddings(block) => mean_embed(block).into_inner(),
        RecordPayload::Key(k) => k.as_slice().to_vec(),
    };
    let norm = l2_norm(&key);
    if norm == 0.0 {
        return Err(Error::ZeroKey {
            index,
            name: rec.name.clone(),
        });
    }
    Ok((key, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecmath::{Embedding, FeatureBlock};

    fn key_rec(name: &str, key: &[f32]) -> MemoryRecord {
        MemoryRecord::from_key(name, Embedding::new(key.to_vec()).unwrap(), Source::Real)
    }

    #[test]
    fn empty_build() {
        let mem = VisualNameMemory::build(&[], 4).unwrap();
        assert_eq!(mem.len(), 0);
        assert_eq!(
            mem.stats(),
            MemoryStats {
                count: 0,
                distinct_names: 0,
                dim: 4,
                real: 0,
                synthetic: 0,
                unspecified: 0
            }
        );
    }

    #[test]
    fn constant_rows_pool_to_that_row() {
        let r = vec![1.5f32, -2.0, 0.25];
        let block = FeatureBlock::new(vec![r.clone(); 32]).unwrap();
        let rec = MemoryRecord::from_embeddings("lamp", block, Source::Synthetic);
        let mem = VisualNameMemory::build(&[rec], 3).unwrap();
        assert_eq!(mem.key(0), &r[..]);
        assert_eq!(mem.entry(0).source, Source::Synthetic);
    }

    #[test]
    fn distinct_name_count() {
        let mem = VisualNameMemory::build(
            &[
                key_rec("cat", &[1.0, 0.0]),
                key_rec("cat", &[0.0, 1.0]),
                key_rec("dog", &[1.0, 1.0]),
            ],
            2,
        )
        .unwrap();
        assert_eq!(mem.stats().distinct_names, 2);
        assert_eq!(mem.distinct_names(), vec!["cat", "dog"]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            VisualNameMemory::build(&[key_rec("a", &[1.0, 0.0, 0.0])], 2),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(matches!(
            VisualNameMemory::build(&[key_rec("a", &[1.0, 0.0]), key_rec("z", &[0.0, 0.0])], 2),
            Err(Error::ZeroKey { index: 1, .. })
        ));
        assert!(matches!(
            VisualNameMemory::build(&[key_rec("  ", &[1.0, 0.0])], 2),
            Err(Error::InvalidRecord { index: 0, .. })
        ));
        // rows cancel to a zero mean
        let block = FeatureBlock::new(vec![vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let rec = MemoryRecord::from_embeddings("ghost", block, Source::Real);
        assert!(matches!(
            VisualNameMemory::build(&[rec], 2),
            Err(Error::ZeroKey { index: 0, .. })
        ));
    }

    #[test]
    fn duplicate_pairs_are_kept() {
        let r = key_rec("cup", &[0.3, 0.4]);
        let mem = VisualNameMemory::build(&[r.clone(), r], 2).unwrap();
        assert_eq!(mem.len(), 2);
        assert_eq!(mem.key(0), mem.key(1));
    }

    #[test]
    fn expand_appends_and_preserves_input() {
        let mem = VisualNameMemory::build(&[key_rec("cat", &[1.0, 0.0])], 2).unwrap();
        let before = mem.checksum();
        let grown = mem.expand(&[key_rec("dog", &[0.0, 1.0])]).unwrap();
        assert_eq!(mem.checksum(), before);
        assert_eq!(mem.len(), 1);
        assert_eq!(grown.len(), 2);
        assert_eq!(grown.entry(1).insert_index, 1);
        assert_eq!(grown.name(1), "dog");
        assert_eq!(mem.expand(&[]).unwrap(), mem);
    }

    #[test]
    fn byte_round_trip() {
        let mem = VisualNameMemory::build(
            &[
                key_rec("traffic light", &[0.1, -7.5e-8, 3.0]),
                MemoryRecord::from_key(
                    "été",
                    Embedding::new(vec![f32::MIN_POSITIVE, 1.0, -1.0]).unwrap(),
                    Source::Unspecified,
                ),
            ],
            3,
        )
        .unwrap();
        let back = VisualNameMemory::from_bytes(&mem.to_bytes()).unwrap();
        assert_eq!(back, mem);
    }

    #[test]
    fn file_layout() {
        let mem = VisualNameMemory::build(&[key_rec("ab", &[1.0, 2.0])], 2).unwrap();
        let b = mem.to_bytes();
        let mut want = b"EVCM".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.push(1);
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        want.extend(1f32.to_le_bytes());
        want.extend(2f32.to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mem = VisualNameMemory::build(&[key_rec("cat", &[1.0, 2.0])], 2).unwrap();
        let good = mem.to_bytes();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        let err = VisualNameMemory::from_bytes(&bad_magic).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("magic")), "{err}");

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            VisualNameMemory::from_bytes(&bad_version),
            Err(Error::Format(_))
        ));

        for cut in 0..good.len() {
            assert!(
                matches!(VisualNameMemory::from_bytes(&good[..cut]), Err(Error::Format(_))),
                "cut at {cut}"
            );
        }

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(VisualNameMemory::from_bytes(&trailing), Err(Error::Format(_))));

        let mut bad_tag = good.clone();
        bad_tag[20] = 7;
        assert!(matches!(VisualNameMemory::from_bytes(&bad_tag), Err(Error::Format(_))));

        // absurd count must not allocate
        let mut huge = good;
        huge[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(VisualNameMemory::from_bytes(&huge), Err(Error::Format(_))));
    }
}
