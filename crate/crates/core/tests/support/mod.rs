//! Reference implementations written straight from the definitions, with
//! no sharing of code paths with the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use garment::embeddings::{EmbeddingMatrix, ItemMeta, Source};
use garment::{BoundingBox, ScoredBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalized(&v)
}

pub fn meta(id: &str, category: u32, source: Source) -> ItemMeta {
    ItemMeta {
        item_id: id.to_string(),
        image_id: format!("img-{id}"),
        box_id: id.to_string(),
        category_id: category,
        source,
    }
}

/// Matrix with ids `{prefix}{i:05}` and the given rows.
pub fn matrix(prefix: &str, source: Source, rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let dim = rows[0].len();
    let ids = (0..rows.len()).map(|i| meta(&format!("{prefix}{i:05}"), 1, source)).collect();
    EmbeddingMatrix::new(dim, rows.concat(), ids).unwrap()
}

pub fn random_unit_matrix(rng: &mut ChaCha8Rng, prefix: &str, source: Source, n: usize, dim: usize) -> EmbeddingMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, dim)).collect();
    matrix(prefix, source, &rows)
}

pub fn rows_of(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

// ---------------------------------------------------------------- boxes

pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    inter / (area(a) + area(b) - inter)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoundingBox {
    let x1 = rng.random_range(0.0..extent);
    let y1 = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// Boxes clustered around a few anchors so that fusion actually merges.
pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, models: usize, categories: u32) -> Vec<ScoredBox> {
    let anchors: Vec<BoundingBox> = (0..3).map(|_| random_box(rng, 50.0)).collect();
    (0..n)
        .map(|_| {
            let a = anchors[rng.random_range(0..anchors.len())].to_array();
            let mut c = a.map(|v| v + rng.random_range(-3.0..3.0));
            if c[2] <= c[0] {
                c[2] = c[0] + 1.0;
            }
            if c[3] <= c[1] {
                c[3] = c[1] + 1.0;
            }
            // Coarse scores make equal-score ties common.
            let score = (rng.random_range(1..=10) as f64) / 10.0;
            ScoredBox::new(
                BoundingBox::from_array(c).unwrap(),
                score,
                rng.random_range(1..=categories),
                "img",
                format!("m{}", rng.random_range(0..models)),
            )
            .unwrap()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OracleCluster {
    pub category: u32,
    pub members: Vec<usize>,
    pub coords: [f64; 4],
    pub score: f64,
}

fn fused_coords(boxes: &[ScoredBox], weighted: &[f64], members: &[usize]) -> [f64; 4] {
    let wsum: f64 = members.iter().map(|&m| weighted[m]).sum();
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        if wsum > 0.0 {
            *slot = members.iter().map(|&m| weighted[m] * boxes[m].bbox.to_array()[k]).sum::<f64>() / wsum;
        } else {
            *slot = members.iter().map(|&m| boxes[m].bbox.to_array()[k]).sum::<f64>() / members.len() as f64;
        }
    }
    out
}

/// Weighted boxes fusion recomputing every cluster from its full member
/// list after each insertion.
pub fn wbf_oracle(
    boxes: &[ScoredBox],
    weights: &BTreeMap<String, f64>,
    num_models: usize,
    threshold: f64,
    rescale: bool,
) -> Vec<OracleCluster> {
    let weighted: Vec<f64> = boxes.iter().map(|b| (b.score * weights[&b.model_id]).clamp(0.0, 1.0)).collect();
    let mut categories: Vec<u32> = boxes.iter().map(|b| b.category_id).collect();
    categories.sort();
    categories.dedup();
    let mut out = Vec::new();
    for cat in categories {
        // Selection sort: highest weighted score, then smallest model id,
        // then earliest input position.
        let mut pending: Vec<usize> = (0..boxes.len()).filter(|&i| boxes[i].category_id == cat).collect();
        let mut order = Vec::new();
        while !pending.is_empty() {
            let mut best = 0;
            for j in 1..pending.len() {
                let (a, b) = (pending[j], pending[best]);
                let better = weighted[a] > weighted[b]
                    || (weighted[a] == weighted[b]
                        && (boxes[a].model_id < boxes[b].model_id
                            || (boxes[a].model_id == boxes[b].model_id && a < b)));
                if better {
                    best = j;
                }
            }
            order.push(pending.remove(best));
        }
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for i in order {
            let target = clusters.iter().position(|members| {
                box_iou(fused_coords(boxes, &weighted, members), boxes[i].bbox.to_array()) > threshold
            });
            match target {
                Some(c) => clusters[c].push(i),
                None => clusters.push(vec![i]),
            }
        }
        for members in clusters {
            let t = members.len();
            let mean = members.iter().map(|&m| weighted[m]).sum::<f64>() / t as f64;
            let score = if rescale {
                (mean * (t.min(num_models) as f64 / num_models as f64)).clamp(0.0, 1.0)
            } else {
                mean.clamp(0.0, 1.0)
            };
            out.push(OracleCluster { category: cat, coords: fused_coords(boxes, &weighted, &members), members, score });
        }
    }
    // Stable: equal scores keep category-then-creation order.
    out.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    out
}

/// Greedy NMS by repeated extraction of the best remaining box.
pub fn nms_oracle(boxes: &[ScoredBox], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = boxes[i].score > boxes[b].score
                        || (boxes[i].score == boxes[b].score && boxes[i].model_id < boxes[b].model_id);
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i]
                && boxes[i].category_id == boxes[b].category_id
                && box_iou(boxes[i].bbox.to_array(), boxes[b].bbox.to_array()) >= threshold
            {
                alive[i] = false;
            }
        }
    }
    kept
}

// --------------------------------------------------------------- search

/// Quadratic top-k: score everything, full sort by (score desc, id asc).
pub fn knn_oracle(gallery: &EmbeddingMatrix, query: &[f64], k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = (0..gallery.rows())
        .map(|g| {
            let s = dot(query, gallery.row(g)).clamp(-1.0, 1.0);
            (gallery.meta(g).item_id.clone(), s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

// --------------------------------------------------------------- rerank

/// Database-side augmentation recomputed from scratch for every row.
pub fn dba_oracle(rows: &[Vec<f64>], ids: &[String], k: usize, alpha: f64, include_self: bool) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    (0..rows.len())
        .map(|r| {
            let mut others: Vec<(f64, &String, usize)> = (0..rows.len())
                .filter(|&j| j != r)
                .map(|j| (dot(&rows[r], &rows[j]).clamp(-1.0, 1.0), &ids[j], j))
                .collect();
            others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
            let mut acc = if include_self { rows[r].clone() } else { vec![0.0; dim] };
            for &(cos, _, j) in others.iter().take(k) {
                let w = if alpha == 0.0 { 1.0 } else { cos.max(0.0).powf(alpha) };
                for d in 0..dim {
                    acc[d] += w * rows[j][d];
                }
            }
            normalized(&acc)
        })
        .collect()
}

/// k-reciprocal final distances, built with dense matrices over the union
/// of queries (first) and gallery. Returns `d*[q][g]`.
pub fn k_reciprocal_oracle(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Vec<Vec<f64>> {
    let points: Vec<&Vec<f64>> = queries.iter().chain(gallery).collect();
    let n = points.len();
    let dist: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| 1.0 - dot(points[i], points[j]).clamp(-1.0, 1.0)).collect()).collect();
    let ranked: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dist[i][a].partial_cmp(&dist[i][b]).unwrap().then(a.cmp(&b)));
            let mut list = vec![i];
            list.extend(others);
            list
        })
        .collect();
    let top = |i: usize, k: usize| -> Vec<usize> { ranked[i][..=k].to_vec() };
    let reciprocal =
        |i: usize, k: usize| -> Vec<usize> { top(i, k).into_iter().filter(|&j| top(j, k).contains(&i)).collect() };
    let half = ((k1 as f64) / 2.0).round_ties_even() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        let base = reciprocal(i, k1);
        let mut member = vec![false; n];
        for &j in &base {
            member[j] = true;
        }
        for &c in &base {
            let cand = reciprocal(c, half);
            let overlap = cand.iter().filter(|j| base.contains(j)).count();
            if overlap as f64 >= 2.0 / 3.0 * cand.len() as f64 - 1e-12 {
                for j in cand {
                    member[j] = true;
                }
            }
        }
        for j in 0..n {
            if member[j] {
                v[i][j] = (-dist[i][j]).exp();
            }
        }
    }
    let expanded: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut acc = vec![0.0; n];
            for &m in &ranked[i][..k2] {
                for j in 0..n {
                    acc[j] += v[m][j];
                }
            }
            acc.iter().map(|x| x / k2 as f64).collect()
        })
        .collect();
    let nq = queries.len();
    (0..nq)
        .map(|q| {
            (0..gallery.len())
                .map(|g| {
                    let gp = nq + g;
                    let (mut mn, mut mx) = (0.0, 0.0);
                    for (a, b) in expanded[q].iter().zip(&expanded[gp]) {
                        mn += a.min(*b);
                        mx += a.max(*b);
                    }
                    let jaccard = if mx == 0.0 { 1.0 } else { 1.0 - mn / mx };
                    (1.0 - lambda) * jaccard + lambda * dist[q][gp]
                })
                .collect()
        })
        .collect()
}

// ----------------------------------------------------------------- eval

/// Detection AP from the definition: greedy matching over all GT boxes,
/// precision envelope taken as a max over higher-recall points.
/// Requires distinct prediction scores.
pub fn ap_oracle(preds: &[ScoredBox], gt: &[(String, [f64; 4], u32)], thresholds: &[f64]) -> f64 {
    let mut categories: Vec<u32> = preds.iter().map(|p| p.category_id).chain(gt.iter().map(|g| g.2)).collect();
    categories.sort();
    categories.dedup();
    let mut total = 0.0;
    for &thr in thresholds {
        let mut per_cat = 0.0;
        for &c in &categories {
            let mut ps: Vec<&ScoredBox> = preds.iter().filter(|p| p.category_id == c).collect();
            ps.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let gs: Vec<usize> = (0..gt.len()).filter(|&g| gt[g].2 == c).collect();
            if gs.is_empty() || ps.is_empty() {
                continue;
            }
            let mut used = vec![false; gt.len()];
            let mut points = Vec::new();
            let (mut tp, mut fp) = (0.0, 0.0);
            for p in &ps {
                let mut best: Option<(usize, f64)> = None;
                for &g in &gs {
                    if used[g] || gt[g].0 != p.image_id {
                        continue;
                    }
                    let iou = box_iou(p.bbox.to_array(), gt[g].1);
                    if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if let Some((g, _)) = best {
                    used[g] = true;
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                points.push((tp / gs.len() as f64, tp / (tp + fp)));
            }
            let mut ap = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                let p = points.iter().filter(|(rec, _)| *rec >= level).map(|(_, prec)| *prec).fold(0.0, f64::max);
                ap += p;
            }
            per_cat += ap / 101.0;
        }
        total += per_cat / categories.len() as f64;
    }
    total / thresholds.len() as f64
}

// ---------------------------------------------------------- descriptors

/// GeM and MAC per channel from the raw formulas, each normalized,
/// concatenated and normalized again.
pub fn gem_mac_oracle(values: &[f64], channels: usize, p: f64) -> Vec<f64> {
    let plane = values.len() / channels;
    let mut gem = Vec::new();
    let mut mac = Vec::new();
    for c in 0..channels {
        let xs = &values[c * plane..(c + 1) * plane];
        let mut s = 0.0;
        let mut m: f64 = 0.0;
        for &x in xs {
            s += x.powf(p);
            m = m.max(x);
        }
        gem.push((s / plane as f64).powf(1.0 / p));
        mac.push(m);
    }
    let mut out = normalized(&gem);
    out.extend(normalized(&mac));
    normalized(&out)
}
