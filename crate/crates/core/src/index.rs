//! Exact top-k cosine retrieval over a flat, contiguous corpus.
//!
//! Scores accumulate in `f64`. Ordering is total: higher score first, then
//! smaller corpus id, so results do not depend on sharding or thread count.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::synthgen::Corpus;
use crate::tensor::{dot, norm, UnitVector};

/// Entries are scanned in shards of this many rows.
const SHARD_ROWS: usize = 8192;

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FlatIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

impl Eq for Hit {}

impl Ord for Hit {
    /// `Greater` means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: u64,
    pub hits: Vec<Hit>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

impl FlatIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        FlatIndex::from_rows(
            corpus.dim(),
            corpus.data().to_vec(),
            (0..corpus.len() as u64).collect(),
        )
    }

    pub fn from_rows(dim: usize, data: Vec<f32>, ids: Vec<u64>) -> Result<Self> {
        if ids.is_empty() || dim == 0 {
            return Err(Error::EmptyCorpus);
        }
        if data.len() != dim * ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ids with dimension {dim} need {} values, got {}",
                ids.len(),
                dim * ids.len(),
                data.len()
            )));
        }
        for (index, row) in data.chunks_exact(dim).enumerate() {
            let n = norm(row);
            if !((n - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NonUnitEntry { index, norm: n });
            }
        }
        Ok(FlatIndex { dim, data, ids })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, position: usize) -> &[f32] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    /// Vector for a corpus id, if the id is indexed. Ids equal positions for
    /// indexes built from a [`Corpus`].
    pub fn vector_by_id(&self, id: u64) -> Option<&[f32]> {
        let pos = if self.ids.get(id as usize) == Some(&id) {
            id as usize
        } else {
            self.ids.iter().position(|&x| x == id)?
        };
        Some(self.vector(pos))
    }

    pub fn search(&self, query: &UnitVector, k: usize) -> Result<RankedList> {
        self.search_slice(query.as_slice(), k)
    }

    pub(crate) fn search_slice(&self, q: &[f32], k: usize) -> Result<RankedList> {
        if q.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(RankedList {
                query: 0,
                hits: Vec::new(),
            });
        }
        let shard_tops: Vec<Vec<Hit>> = (0..self.len())
            .step_by(SHARD_ROWS)
            .map(|start| self.scan_shard(q, start, (start + SHARD_ROWS).min(self.len()), k))
            .collect();
        let mut merged: Vec<Hit> = shard_tops.into_iter().flatten().collect();
        merged.sort_unstable_by(|a, b| b.cmp(a));
        merged.truncate(k);
        Ok(RankedList {
            query: 0,
            hits: merged,
        })
    }

    fn scan_shard(&self, q: &[f32], start: usize, end: usize, k: usize) -> Vec<Hit> {
        let mut heap: BinaryHeap<Reverse<Hit>> = BinaryHeap::with_capacity(k + 1);
        for pos in start..end {
            let hit = Hit {
                id: self.ids[pos],
                score: dot(q, self.vector(pos)),
            };
            if heap.len() < k {
                heap.push(Reverse(hit));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if hit > *worst {
                    heap.pop();
                    heap.push(Reverse(hit));
                }
            }
        }
        heap.into_iter().map(|Reverse(h)| h).collect()
    }

    /// One ranked list per query, tagged with the query's position.
    pub fn batch_search(&self, queries: &[UnitVector], k: usize) -> Result<Vec<RankedList>> {
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let mut list = self.search(q, k)?;
                list.query = i as u64;
                Ok(list)
            })
            .collect()
    }
}

/// Serializes ranked lists as `query_id corpus_id rank score` lines, rank
/// starting at 1 and scores rounded to `f32`.
pub fn format_run(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (rank, hit) in list.hits.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                list.query,
                hit.id,
                rank + 1,
                hit.score as f32
            );
        }
    }
    out
}

/// Parses a run file. Lists come back in first-seen query order, hits in
/// rank order.
pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RankedList>> {
    let mut lists: Vec<RankedList> = Vec::new();
    let mut rows: Vec<(usize, usize, Hit)> = Vec::new();
    let mut slot_of = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || {
            Error::format(
                path,
                format!(
                    "line {}: expected `query_id corpus_id rank score`",
                    lineno + 1
                ),
            )
        };
        if fields.len() != 4 {
            return Err(bad());
        }
        let query: u64 = fields[0].parse().map_err(|_| bad())?;
        let id: u64 = fields[1].parse().map_err(|_| bad())?;
        let rank: usize = fields[2].parse().map_err(|_| bad())?;
        let score: f64 = fields[3].parse().map_err(|_| bad())?;
        let slot = *slot_of.entry(query).or_insert_with(|| {
            lists.push(RankedList {
                query,
                hits: Vec::new(),
            });
            lists.len() - 1
        });
        rows.push((slot, rank, Hit { id, score }));
    }
    rows.sort_by_key(|&(slot, rank, _)| (slot, rank));
    for (slot, _, hit) in rows {
        lists[slot].hits.push(hit);
    }
    Ok(lists)
}
