//! Post-search refinement: query expansion, database-side augmentation and
//! k-reciprocal re-ranking.
//!
//! The k-reciprocal encoder works on the union of queries and gallery
//! (queries first). Every point's neighbor list starts with the point
//! itself, followed by the others in ascending `1 - cosine` order with ties
//! broken by union index.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, l2_norm};
use crate::par;
use crate::search::{build_index, Neighbor, RankedItem, RankingList, RetrievalIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QeParams {
    /// Neighbors folded into each vector.
    pub k: usize,
    /// Neighbor weight is `max(cos, 0)^alpha`; 0 gives a plain sum.
    pub alpha: f64,
    /// Whether the vector itself enters the sum with weight 1.
    pub include_self: bool,
}

impl Default for QeParams {
    fn default() -> Self {
        Self { k: 10, alpha: 0.0, include_self: true }
    }
}

impl QeParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("QE alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn expand(
    id: &str,
    vector: &[f64],
    neighbors: &[Neighbor],
    rows: &EmbeddingMatrix,
    params: &QeParams,
) -> Result<Vec<f64>> {
    let mut acc = if params.include_self { vector.to_vec() } else { vec![0.0; vector.len()] };
    for n in neighbors {
        let w = n.score.max(0.0).powf(params.alpha);
        axpy(&mut acc, w, rows.row(n.row));
    }
    let norm = l2_norm(&acc);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!("expanded vector for {id:?} is zero")));
    }
    acc.iter_mut().for_each(|v| *v /= norm);
    Ok(acc)
}

fn rebuild(template: &EmbeddingMatrix, rows: Vec<Vec<f64>>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(template.dim(), rows.concat(), template.ids().to_vec())
}

/// Replaces each query with the normalized weighted sum of itself and its
/// top-`k` gallery neighbors.
pub fn query_expansion(
    queries: &EmbeddingMatrix,
    index: &RetrievalIndex,
    params: &QeParams,
) -> Result<EmbeddingMatrix> {
    params.validate()?;
    if queries.dim() != index.dim() {
        return Err(Error::DimensionMismatch { expected: index.dim(), found: queries.dim() });
    }
    queries.ensure_unit_rows("query")?;
    if params.k == 0 {
        return Ok(queries.clone());
    }
    let rows = par::try_map_range(queries.rows(), |q| {
        let v = queries.row(q);
        let hits = index.top_k(v, None, params.k);
        expand(&queries.meta(q).item_id, v, &hits, index.gallery(), params)
    })?;
    rebuild(queries, rows)
}

/// Applies the query-expansion update to every gallery row, with
/// neighbors drawn from the gallery itself (never the row itself).
pub fn database_augmentation(gallery: &EmbeddingMatrix, params: &QeParams) -> Result<EmbeddingMatrix> {
    params.validate()?;
    gallery.ensure_unit_rows("gallery")?;
    if params.k == 0 {
        return Ok(gallery.clone());
    }
    let index = build_index(gallery.clone(), false)?;
    // The index keeps row order when not partitioned.
    let rows = par::try_map_range(gallery.rows(), |r| {
        let v = gallery.row(r);
        let mut hits = index.top_k(v, None, params.k + 1);
        hits.retain(|n| n.row != r);
        hits.truncate(params.k);
        expand(&gallery.meta(r).item_id, v, &hits, gallery, params)
    })?;
    rebuild(gallery, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self { k1: 20, k2: 6, lambda: 0.3 }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k2 > self.k1 {
            return Err(Error::Config(format!(
                "re-ranking needs 1 <= k2 <= k1, got k1 = {}, k2 = {}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Neighborhood size used when expanding reciprocal sets.
    pub fn half_k1(&self) -> usize {
        (self.k1 as f64 / 2.0).round_ties_even() as usize
    }
}

/// Sparse vector as `(index, value)` pairs sorted by index.
type Sparse = Vec<(usize, f64)>;

/// Reciprocal-neighbor encodings of every query and gallery point.
pub struct KReciprocal<'a> {
    queries: &'a EmbeddingMatrix,
    gallery: &'a EmbeddingMatrix,
    params: RerankParams,
    /// Encodings after local query expansion, indexed by union position.
    encodings: Vec<Sparse>,
}

impl<'a> KReciprocal<'a> {
    pub fn build(queries: &'a EmbeddingMatrix, gallery: &'a EmbeddingMatrix, params: RerankParams) -> Result<Self> {
        params.validate()?;
        if queries.dim() != gallery.dim() {
            return Err(Error::DimensionMismatch { expected: gallery.dim(), found: queries.dim() });
        }
        if params.k1 > gallery.rows() {
            return Err(Error::Config(format!("k1 = {} exceeds gallery size {}", params.k1, gallery.rows())));
        }
        queries.ensure_unit_rows("query")?;
        gallery.ensure_unit_rows("gallery")?;

        let mut this = Self { queries, gallery, params, encodings: Vec::new() };
        let total = queries.rows() + gallery.rows();
        let list_len = params.k1 + 1;
        let ranked: Vec<Vec<usize>> = par::map_range(total, |p| this.ranked_neighbors(p, list_len));

        let reciprocal = |p: usize, k: usize| -> Vec<usize> {
            let mut r: Vec<usize> =
                ranked[p][..k + 1].iter().copied().filter(|&g| ranked[g][..k + 1].contains(&p)).collect();
            r.sort_unstable();
            r
        };
        let half = params.half_k1();
        let raw: Vec<Sparse> = par::map_range(total, |p| {
            let base = reciprocal(p, params.k1);
            let mut expanded = base.clone();
            for &c in &base {
                let cand = reciprocal(c, half);
                let overlap = cand.iter().filter(|g| base.binary_search(g).is_ok()).count();
                if 3 * overlap >= 2 * cand.len() {
                    expanded.extend(cand);
                }
            }
            expanded.sort_unstable();
            expanded.dedup();
            expanded.into_iter().map(|g| (g, (-this.distance(p, g)).exp())).collect()
        });
        this.encodings = par::map_range(total, |p| {
            let members = &ranked[p][..params.k2];
            let mut pairs: Vec<(usize, f64)> = members.iter().flat_map(|&m| raw[m].iter().copied()).collect();
            pairs.sort_by_key(|&(g, _)| g);
            let mut merged: Sparse = Vec::with_capacity(pairs.len());
            for (g, v) in pairs {
                match merged.last_mut() {
                    Some((last, acc)) if *last == g => *acc += v,
                    _ => merged.push((g, v)),
                }
            }
            let k2 = params.k2 as f64;
            merged.iter_mut().for_each(|(_, v)| *v /= k2);
            merged
        });
        Ok(this)
    }

    fn point(&self, i: usize) -> &[f64] {
        let nq = self.queries.rows();
        if i < nq {
            self.queries.row(i)
        } else {
            self.gallery.row(i - nq)
        }
    }

    /// `1 - cosine` between two union points.
    fn distance(&self, a: usize, b: usize) -> f64 {
        1.0 - dot(self.point(a), self.point(b)).clamp(-1.0, 1.0)
    }

    fn ranked_neighbors(&self, p: usize, len: usize) -> Vec<usize> {
        let total = self.queries.rows() + self.gallery.rows();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let mut others: Vec<(f64, usize)> = (0..total).filter(|&j| j != p).map(|j| (self.distance(p, j), j)).collect();
        let keep = (len - 1).min(others.len());
        if keep > 0 && others.len() > keep {
            others.select_nth_unstable_by(keep - 1, order);
            others.truncate(keep);
        }
        others.sort_by(order);
        std::iter::once(p).chain(others.into_iter().map(|(_, j)| j)).collect()
    }

    /// Union index of gallery row `g`.
    pub fn gallery_point(&self, g: usize) -> usize {
        self.queries.rows() + g
    }

    /// Encoding of a union point after local expansion.
    pub fn encoding(&self, point: usize) -> &[(usize, f64)] {
        &self.encodings[point]
    }

    /// Jaccard distance between the encodings of two union points.
    pub fn jaccard_distance(&self, a: usize, b: usize) -> f64 {
        let (va, vb) = (&self.encodings[a], &self.encodings[b]);
        let (mut i, mut j) = (0, 0);
        let (mut min_sum, mut max_sum) = (0.0, 0.0);
        while i < va.len() || j < vb.len() {
            let ka = va.get(i).map_or(usize::MAX, |e| e.0);
            let kb = vb.get(j).map_or(usize::MAX, |e| e.0);
            match ka.cmp(&kb) {
                Ordering::Less => {
                    max_sum += va[i].1;
                    i += 1;
                }
                Ordering::Greater => {
                    max_sum += vb[j].1;
                    j += 1;
                }
                Ordering::Equal => {
                    min_sum += va[i].1.min(vb[j].1);
                    max_sum += va[i].1.max(vb[j].1);
                    i += 1;
                    j += 1;
                }
            }
        }
        if max_sum == 0.0 {
            return 1.0;
        }
        1.0 - min_sum / max_sum
    }

    /// Final distance between query row `q` and gallery row `g`.
    pub fn final_distance(&self, q: usize, g: usize) -> f64 {
        let gp = self.gallery_point(g);
        let lambda = self.params.lambda;
        (1.0 - lambda) * self.jaccard_distance(q, gp) + lambda * self.distance(q, gp)
    }

    /// Re-orders each initial list by ascending final distance. Ties fall
    /// back to descending cosine, then ascending item_id. Each entry's score
    /// becomes `1 - d*`.
    pub fn rerank(&self, initial: &[RankingList]) -> Result<Vec<RankingList>> {
        let query_rows: HashMap<&str, usize> =
            self.queries.ids().iter().enumerate().map(|(i, m)| (m.item_id.as_str(), i)).collect();
        let gallery_rows: HashMap<&str, usize> =
            self.gallery.ids().iter().enumerate().map(|(i, m)| (m.item_id.as_str(), i)).collect();
        par::try_map_range(initial.len(), |i| {
            let list = &initial[i];
            let q = *query_rows
                .get(list.query_id.as_str())
                .ok_or_else(|| Error::Data(format!("ranking for unknown query {:?}", list.query_id)))?;
            if list.len() < self.params.k1 {
                return Err(Error::Precondition(format!(
                    "ranking for {:?} has {} entries, re-ranking needs at least k1 = {}",
                    list.query_id,
                    list.len(),
                    self.params.k1
                )));
            }
            let mut scored = list
                .entries
                .iter()
                .map(|e| {
                    let g = *gallery_rows.get(e.item_id.as_str()).ok_or_else(|| {
                        Error::Data(format!("ranking references unknown gallery item {:?}", e.item_id))
                    })?;
                    let cos = dot(self.queries.row(q), self.gallery.row(g)).clamp(-1.0, 1.0);
                    Ok((self.final_distance(q, g), cos, e.item_id.as_str()))
                })
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.total_cmp(&a.1)).then_with(|| a.2.cmp(b.2)));
            Ok(RankingList {
                query_id: list.query_id.clone(),
                entries: scored
                    .into_iter()
                    .map(|(d, _, id)| RankedItem { item_id: id.to_string(), score: 1.0 - d })
                    .collect(),
            })
        })
    }
}

/// k-reciprocal re-ranking of `initial` rankings.
pub fn k_reciprocal_rerank(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    initial: &[RankingList],
    params: &RerankParams,
) -> Result<Vec<RankingList>> {
    KReciprocal::build(queries, gallery, *params)?.rerank(initial)
}
