//! Exhaustive dense, late-interaction and two-stage search over an
//! immutable embedding store.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::embed::{cosine_prefix, EmbeddingRecord, PreparedQuery, Role};
use crate::error::{Error, Result};
use crate::format;

/// Passages loaded for search.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    records: Vec<EmbeddingRecord>,
    index: HashMap<String, usize>,
    dense_dim: usize,
    multi_dim: usize,
}

impl EmbeddingStore {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self> {
        let (dense_dim, multi_dim) = format::validate_records(&records)?;
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Ok(Self {
            records,
            index,
            dense_dim,
            multi_dim,
        })
    }

    /// Reads a binary store.
    pub fn open(path: &Path) -> Result<Self> {
        Self::from_records(format::read_binary_file(path)?.1)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dim
    }

    /// 0 when no record carries a multi-vector.
    pub fn multi_dim(&self) -> usize {
        self.multi_dim
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn checksum(&self) -> Result<String> {
        format::checksum(&self.records)
    }
}

/// Writes `records` as a binary store and returns the searchable store.
pub fn build_store(records: Vec<EmbeddingRecord>, path: &Path) -> Result<EmbeddingStore> {
    let store = EmbeddingStore::from_records(records)?;
    format::write_binary_file(path, &store.records)?;
    Ok(store)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Dense,
    Late,
    TwoStage,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "late" => Ok(Self::Late),
            "two-stage" | "two_stage" => Ok(Self::TwoStage),
            other => Err(Error::invalid(format!(
                "unknown search mode `{other}` (expected dense, late or two-stage)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchRequest {
    pub query: EmbeddingRecord,
    pub mode: SearchMode,
    pub k: usize,
    /// Dense candidates reranked in two-stage mode; defaults to `10 * k`.
    pub candidate_pool: Option<usize>,
    /// Dense prefix length (dense and the first stage of two-stage).
    pub truncate_to: Option<usize>,
}

impl SearchRequest {
    pub fn new(query: EmbeddingRecord, mode: SearchMode, k: usize) -> Self {
        Self {
            query,
            mode,
            k,
            candidate_pool: None,
            truncate_to: None,
        }
    }

    pub fn pool(&self) -> usize {
        self.candidate_pool.unwrap_or(self.k.saturating_mul(10))
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.query.role != Role::Query {
            return Err(Error::invalid(format!(
                "search query `{}` has role passage",
                self.query.id
            )));
        }
        if let Some(pool) = self.candidate_pool {
            if pool < self.k {
                return Err(Error::invalid(format!(
                    "candidate pool {pool} is smaller than k = {}",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Hits ordered by descending score, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.id.as_str())
    }
}

fn rank_order(a: (usize, f64), b: (usize, f64), records: &[EmbeddingRecord]) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| records[a.0].id.cmp(&records[b.0].id))
}

/// Best `k` of `(record index, score)` under the ranking order.
fn top_k(
    mut scored: Vec<(usize, f64)>,
    k: usize,
    records: &[EmbeddingRecord],
) -> Vec<(usize, f64)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |&a, &b| rank_order(a, b, records));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|&a, &b| rank_order(a, b, records));
    scored
}

fn dense_scores(
    store: &EmbeddingStore,
    req: &SearchRequest,
    candidates: Option<&[usize]>,
) -> Result<Vec<(usize, f64)>> {
    let d = store.dense_dim;
    if req.query.dense.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: req.query.dense.dim(),
        });
    }
    let k = req.truncate_to.unwrap_or(d);
    if k == 0 || k > d {
        return Err(Error::invalid(format!(
            "truncation length {k} outside 1..={d}"
        )));
    }
    let q = &req.query.dense.as_slice()[..k];
    let score = |i: usize| -> Result<(usize, f64)> {
        let p = &store.records[i].dense.as_slice()[..k];
        cosine_prefix(q, p)
            .map(|s| (i, s))
            .ok_or(Error::Degenerate("truncation"))
    };
    match candidates {
        Some(c) => c.par_iter().map(|&i| score(i)).collect(),
        None => (0..store.len()).into_par_iter().map(score).collect(),
    }
}

fn late_scores(
    store: &EmbeddingStore,
    req: &SearchRequest,
    candidates: Option<&[usize]>,
) -> Result<Vec<(usize, f64)>> {
    let qm = req.query.multi_or_err()?;
    if qm.dim() != store.multi_dim {
        return Err(Error::DimensionMismatch {
            expected: store.multi_dim,
            found: qm.dim(),
        });
    }
    let prepared = PreparedQuery::new(qm);
    let score = |i: usize| -> Result<(usize, f64)> {
        let doc = store.records[i].multi_or_err()?;
        Ok((i, prepared.maxsim(doc)?))
    };
    match candidates {
        Some(c) => c.par_iter().map(|&i| score(i)).collect(),
        None => (0..store.len()).into_par_iter().map(score).collect(),
    }
}

/// Late mode ranks by the unnormalized late-interaction score (the query
/// length is constant per query, so normalizing would not change order).
pub fn search(store: &EmbeddingStore, req: &SearchRequest) -> Result<RankedList> {
    req.validate()?;
    let records = &store.records;
    let ranked = match req.mode {
        SearchMode::Dense => top_k(dense_scores(store, req, None)?, req.k, records),
        SearchMode::Late => top_k(late_scores(store, req, None)?, req.k, records),
        SearchMode::TwoStage => {
            let pool = top_k(dense_scores(store, req, None)?, req.pool(), records);
            let ids: Vec<usize> = pool.into_iter().map(|(i, _)| i).collect();
            top_k(late_scores(store, req, Some(&ids))?, req.k, records)
        }
    };
    Ok(RankedList {
        hits: ranked
            .into_iter()
            .map(|(i, score)| Hit {
                id: records[i].id.clone(),
                score,
            })
            .collect(),
    })
}

/// Elementwise equal to calling [`search`] on each request.
pub fn batch_search(store: &EmbeddingStore, requests: &[SearchRequest]) -> Result<Vec<RankedList>> {
    requests.par_iter().map(|r| search(store, r)).collect()
}

/// `qid Q0 doc rank score run`, rank from 1, score with 6 decimals.
pub fn write_trec<W: Write>(mut w: W, query_id: &str, list: &RankedList, run: &str) -> Result<()> {
    for (rank, hit) in list.hits.iter().enumerate() {
        writeln!(
            w,
            "{query_id} Q0 {} {} {:.6} {run}",
            hit.id,
            rank + 1,
            hit.score
        )?;
    }
    Ok(())
}
