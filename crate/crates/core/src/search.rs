//! Exact top-K cosine retrieval.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::par;

/// Immutable gallery snapshot.
///
/// When partitioned, gallery rows are stably regrouped so each category
/// occupies one contiguous row range.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    gallery: EmbeddingMatrix,
    partitions: Option<BTreeMap<u32, Range<usize>>>,
    /// Position of each row's item_id in sorted id order; the tie-break key.
    id_rank: Vec<u32>,
}

/// A gallery row and its similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: String,
    pub score: f64,
}

/// Ranked gallery items for one query, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingList {
    pub query_id: String,
    pub entries: Vec<RankedItem>,
}

impl RankingList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }
}

pub fn build_index(gallery: EmbeddingMatrix, partition_by_category: bool) -> Result<RetrievalIndex> {
    gallery.ensure_unit_rows("gallery")?;
    let (gallery, partitions) = if partition_by_category {
        let mut order: Vec<usize> = (0..gallery.rows()).collect();
        order.sort_by_key(|&i| gallery.meta(i).category_id);
        let gallery = gallery.select(&order)?;
        let mut partitions: BTreeMap<u32, Range<usize>> = BTreeMap::new();
        for (row, meta) in gallery.ids().iter().enumerate() {
            partitions.entry(meta.category_id).and_modify(|r| r.end = row + 1).or_insert(row..row + 1);
        }
        (gallery, Some(partitions))
    } else {
        (gallery, None)
    };
    let mut by_id: Vec<usize> = (0..gallery.rows()).collect();
    by_id.sort_by(|&a, &b| gallery.meta(a).item_id.cmp(&gallery.meta(b).item_id));
    let mut id_rank = vec![0u32; gallery.rows()];
    for (rank, &row) in by_id.iter().enumerate() {
        id_rank[row] = rank as u32;
    }
    Ok(RetrievalIndex { gallery, partitions, id_rank })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.gallery.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.gallery.dim()
    }

    pub fn gallery(&self) -> &EmbeddingMatrix {
        &self.gallery
    }

    pub fn partitions(&self) -> Option<&BTreeMap<u32, Range<usize>>> {
        self.partitions.as_ref()
    }

    /// Descending score, ties by ascending item_id.
    fn rank_order(&self, a: &Neighbor, b: &Neighbor) -> Ordering {
        b.score.total_cmp(&a.score).then_with(|| self.id_rank[a.row].cmp(&self.id_rank[b.row]))
    }

    /// Top-`k` rows for one query vector, optionally restricted to a category.
    pub fn top_k(&self, query: &[f64], category: Option<u32>, k: usize) -> Vec<Neighbor> {
        let score = |row: usize| Neighbor { row, score: dot(query, self.gallery.row(row)).clamp(-1.0, 1.0) };
        let mut cands: Vec<Neighbor> = match (category, &self.partitions) {
            (None, _) => (0..self.len()).map(score).collect(),
            (Some(c), Some(parts)) => parts.get(&c).cloned().unwrap_or(0..0).map(score).collect(),
            (Some(c), None) => (0..self.len()).filter(|&r| self.gallery.meta(r).category_id == c).map(score).collect(),
        };
        if k == 0 {
            return Vec::new();
        }
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, |a, b| self.rank_order(a, b));
            cands.truncate(k);
        }
        cands.sort_by(|a, b| self.rank_order(a, b));
        cands
    }

    pub fn to_ranking(&self, query_id: &str, neighbors: &[Neighbor]) -> RankingList {
        RankingList {
            query_id: query_id.to_string(),
            entries: neighbors
                .iter()
                .map(|n| RankedItem { item_id: self.gallery.meta(n.row).item_id.clone(), score: n.score })
                .collect(),
        }
    }
}

/// Top-`k` gallery items for every query row, parallel over queries.
pub fn knn_search(
    index: &RetrievalIndex,
    queries: &EmbeddingMatrix,
    k: usize,
    restrict_to_query_category: bool,
) -> Result<Vec<RankingList>> {
    if queries.dim() != index.dim() {
        return Err(Error::DimensionMismatch { expected: index.dim(), found: queries.dim() });
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    Ok(par::map_range(queries.rows(), |q| {
        let meta = queries.meta(q);
        let category = restrict_to_query_category.then_some(meta.category_id);
        let hits = index.top_k(queries.row(q), category, k);
        index.to_ranking(&meta.item_id, &hits)
    }))
}
