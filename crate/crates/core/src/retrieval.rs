//! Top-K object-name retrieval: each query row picks its best-matching key,
//! candidates sharing a name collapse to their best score, and the K best
//! distinct names are returned in descending score order.
//!
//! Ties are broken by smaller entry index, then smaller query index, so the
//! result is a pure function of the inputs.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::VisualNameMemory;
use crate::par;
use crate::vecmath::{cosine_with_norms, l2_norm, FeatureBlock};

/// Best memory entry for one query row. `query_index` is zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub query_index: usize,
    pub entry_index: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub names: Vec<NameScore>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn name_list(&self) -> Vec<&str> {
        self.names.iter().map(|n| n.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

fn check_queries(queries: &FeatureBlock, mem: &VisualNameMemory) -> Result<Vec<f64>> {
    if mem.is_empty() {
        return Err(Error::EmptyMemory);
    }
    if queries.dim() != mem.dim() {
        return Err(Error::DimensionMismatch {
            expected: mem.dim(),
            found: queries.dim(),
        });
    }
    queries
        .rows()
        .enumerate()
        .map(|(j, row)| {
            let n = l2_norm(row);
            if n == 0.0 {
                Err(Error::ZeroVector { row: Some(j) })
            } else {
                Ok(n)
            }
        })
        .collect()
}

const SCAN_CHUNK: usize = 512;

/// Best `(score, entry)` per query row over the entries in `range`. Keys are
/// the outer loop so each key is read once for all rows.
fn scan_range(
    queries: &FeatureBlock,
    norms: &[f64],
    mem: &VisualNameMemory,
    range: std::ops::Range<usize>,
) -> Vec<(f64, usize)> {
    let mut best = vec![(f64::NEG_INFINITY, range.start); queries.n_rows()];
    for i in range {
        let (key, key_norm) = (mem.key(i), mem.norm(i));
        for (j, b) in best.iter_mut().enumerate() {
            let s = cosine_with_norms(queries.row(j), norms[j], key, key_norm);
            // strict comparison keeps the earliest entry on ties
            if s > b.0 {
                *b = (s, i);
            }
        }
    }
    best
}

fn candidates(best: Vec<(f64, usize)>, mem: &VisualNameMemory) -> Vec<Candidate> {
    best.into_iter()
        .enumerate()
        .map(|(j, (score, i))| Candidate {
            query_index: j,
            entry_index: i,
            name: mem.name(i).to_owned(),
            score,
        })
        .collect()
}

/// For every query row, the entry with the highest cosine similarity.
/// Chunks of the memory are scanned concurrently when the `parallel`
/// feature is on and merged in entry order.
pub fn best_key_per_query(queries: &FeatureBlock, mem: &VisualNameMemory) -> Result<Vec<Candidate>> {
    let norms = check_queries(queries, mem)?;
    let chunks = mem.len().div_ceil(SCAN_CHUNK);
    let partial = par::map_range(chunks, |c| {
        scan_range(
            queries,
            &norms,
            mem,
            c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(mem.len()),
        )
    });
    let mut best = vec![(f64::NEG_INFINITY, 0); queries.n_rows()];
    for part in partial {
        for (b, p) in best.iter_mut().zip(part) {
            if p.0 > b.0 {
                *b = p;
            }
        }
    }
    Ok(candidates(best, mem))
}

/// Single-threaded [`best_key_per_query`], regardless of features.
pub fn best_key_per_query_sequential(queries: &FeatureBlock, mem: &VisualNameMemory) -> Result<Vec<Candidate>> {
    let norms = check_queries(queries, mem)?;
    Ok(candidates(scan_range(queries, &norms, mem, 0..mem.len()), mem))
}

/// Descending score, then ascending entry index, then ascending query index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.entry_index.cmp(&b.entry_index))
        .then(a.query_index.cmp(&b.query_index))
}

/// Collapses candidates to one per name (the best-ranked) and keeps the `k`
/// best names.
pub fn dedup_and_topk(cands: &[Candidate], k: usize) -> RetrievalResult {
    let mut best: HashMap<&str, &Candidate> = HashMap::new();
    for c in cands {
        best.entry(&c.name)
            .and_modify(|cur| {
                if rank(c, cur) == Ordering::Less {
                    *cur = c;
                }
            })
            .or_insert(c);
    }
    let mut kept: Vec<&Candidate> = best.into_values().collect();
    kept.sort_by(|a, b| rank(a, b));
    kept.truncate(k);
    RetrievalResult {
        names: kept
            .into_iter()
            .map(|c| NameScore {
                name: c.name.clone(),
                score: c.score,
            })
            .collect(),
        k_requested: k,
    }
}

pub fn retrieve_names(
    queries: &FeatureBlock,
    mem: &VisualNameMemory,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    Ok(dedup_and_topk(&best_key_per_query(queries, mem)?, cfg.k))
}

/// Retrieval for many images at once, fanned out per image.
pub fn retrieve_batch(
    batch: &[FeatureBlock],
    mem: &VisualNameMemory,
    cfg: &RetrievalConfig,
) -> Vec<Result<RetrievalResult>> {
    par::map(batch, |q| {
        check_queries(q, mem)?;
        let cands = best_key_per_query_sequential(q, mem)?;
        Ok(dedup_and_topk(&cands, cfg.k))
    })
}
