//! Detection AP and retrieval top-K accuracy.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, ScoredBox};
use crate::error::{Error, Result};
use crate::par;
use crate::search::RankingList;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub category_id: u32,
}

/// Ground-truth boxes for a set of images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthDet {
    pub boxes: Vec<GtBox>,
}

impl GroundTruthDet {
    pub fn from_scored(boxes: &[ScoredBox]) -> Self {
        Self {
            boxes: boxes
                .iter()
                .map(|b| GtBox { image_id: b.image_id.clone(), bbox: b.bbox, category_id: b.category_id })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Category-mean AP averaged over all thresholds.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub per_category: BTreeMap<u32, CategoryAp>,
    /// Threshold at which the TP/FP/FN counts were taken.
    pub count_iou: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub num_gt: usize,
}

/// 101-point interpolated AP from per-prediction TP flags in ranked order.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let t = r as f64 / (RECALL_POINTS - 1) as f64;
            let idx = recall.partition_point(|&rc| rc < t);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    total / RECALL_POINTS as f64
}

/// Total order on predictions that depends on scores only through their
/// ranking, so input order and monotone rescaling do not matter.
fn prediction_order(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.model_id.cmp(&b.model_id))
}

/// Greedy matching of ranked predictions against one category's GT.
fn match_category(preds: &[&ScoredBox], gt: &[&GtBox], threshold: f64) -> Vec<bool> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut matched = vec![false; gt.len()];
    preds
        .iter()
        .map(|p| {
            let Some(cands) = by_image.get(p.image_id.as_str()) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &g in cands {
                if matched[g] {
                    continue;
                }
                let iou = p.bbox.iou(&gt[g].bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn threshold_at(thresholds: &[f64], target: f64) -> Option<usize> {
    thresholds.iter().position(|t| (t - target).abs() < 1e-9)
}

/// Detection AP per category and IoU threshold.
///
/// Categories present only in predictions score AP 0 and their boxes count
/// as false positives.
pub fn detection_ap(preds: &[ScoredBox], gt: &GroundTruthDet, iou_thresholds: &[f64]) -> Result<DetectionReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::Config("at least one IoU threshold is required".into()));
    }
    if let Some(t) = iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("IoU threshold {t} outside (0, 1]")));
    }
    let mut pred_by_cat: BTreeMap<u32, Vec<&ScoredBox>> = BTreeMap::new();
    for p in preds {
        pred_by_cat.entry(p.category_id).or_default().push(p);
    }
    let mut gt_by_cat: BTreeMap<u32, Vec<&GtBox>> = BTreeMap::new();
    for g in &gt.boxes {
        gt_by_cat.entry(g.category_id).or_default().push(g);
    }
    let categories: Vec<u32> =
        pred_by_cat.keys().chain(gt_by_cat.keys()).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let count_idx = threshold_at(iou_thresholds, 0.5).unwrap_or(0);

    // (per-threshold AP, tp count at count_idx, num_pred, num_gt)
    let per_cat = par::map_slice(&categories, |c| {
        let mut ps: Vec<&ScoredBox> = pred_by_cat.get(c).cloned().unwrap_or_default();
        ps.sort_by(|a, b| prediction_order(a, b));
        let gs: Vec<&GtBox> = gt_by_cat.get(c).cloned().unwrap_or_default();
        let mut tp_at_count = 0;
        let aps: Vec<f64> = iou_thresholds
            .iter()
            .enumerate()
            .map(|(t, &thr)| {
                let flags = match_category(&ps, &gs, thr);
                if t == count_idx {
                    tp_at_count = flags.iter().filter(|f| **f).count();
                }
                interpolated_ap(&flags, gs.len())
            })
            .collect();
        (aps, tp_at_count, ps.len(), gs.len())
    });

    let nt = iou_thresholds.len();
    let mut per_category = BTreeMap::new();
    let mut mean_by_threshold = vec![0.0; nt];
    let (mut tp, mut num_pred, mut num_gt) = (0, 0, 0);
    for (c, (aps, cat_tp, np, ng)) in categories.iter().zip(&per_cat) {
        for (acc, ap) in mean_by_threshold.iter_mut().zip(aps) {
            *acc += ap;
        }
        tp += cat_tp;
        num_pred += np;
        num_gt += ng;
        per_category.insert(
            *c,
            CategoryAp {
                ap: aps.iter().sum::<f64>() / nt as f64,
                ap50: threshold_at(iou_thresholds, 0.5).map(|i| aps[i]),
                ap75: threshold_at(iou_thresholds, 0.75).map(|i| aps[i]),
                num_gt: *ng,
                num_pred: *np,
            },
        );
    }
    if !categories.is_empty() {
        for v in &mut mean_by_threshold {
            *v /= categories.len() as f64;
        }
    }
    Ok(DetectionReport {
        ap: mean_by_threshold.iter().sum::<f64>() / nt as f64,
        ap50: threshold_at(iou_thresholds, 0.5).map(|i| mean_by_threshold[i]),
        ap75: threshold_at(iou_thresholds, 0.75).map(|i| mean_by_threshold[i]),
        iou_thresholds: iou_thresholds.to_vec(),
        per_category,
        count_iou: iou_thresholds[count_idx],
        tp,
        fp: num_pred - tp,
        fn_: num_gt - tp,
        num_gt,
    })
}

/// Query item id to its matching gallery item ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthRet {
    pub matches: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// 1-based rank of the first correct item.
    pub first_hit_rank: Option<usize>,
    /// None of the query's matches exists in the gallery.
    pub unreachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub acc: BTreeMap<usize, f64>,
    pub num_queries: usize,
    pub num_excluded: usize,
    pub num_unreachable: usize,
    pub per_query: Vec<QueryOutcome>,
}

impl RetrievalReport {
    pub fn hit_at(outcome: &QueryOutcome, k: usize) -> bool {
        outcome.first_hit_rank.is_some_and(|r| r <= k)
    }
}

/// Top-K accuracy over queries with a non-empty match set.
///
/// Rankings whose query has no ground truth are excluded and counted.
/// With `gallery_ids`, queries none of whose matches exist in the gallery
/// are flagged as unreachable (they still count as misses).
pub fn acc_at_k(
    rankings: &[RankingList],
    gt: &GroundTruthRet,
    ks: &[usize],
    gallery_ids: Option<&HashSet<String>>,
) -> Result<RetrievalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("K values must be non-empty and >= 1".into()));
    }
    let mut seen = HashSet::new();
    for r in rankings {
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::Data(format!("duplicate ranking for query {:?}", r.query_id)));
        }
        let mut items = HashSet::new();
        if let Some(dup) = r.item_ids().find(|id| !items.insert(*id)) {
            return Err(Error::Data(format!("ranking for {:?} lists gallery item {dup:?} twice", r.query_id)));
        }
    }
    let mut per_query = Vec::new();
    let mut excluded = 0;
    for r in rankings {
        let Some(matches) = gt.matches.get(&r.query_id).filter(|m| !m.is_empty()) else {
            excluded += 1;
            continue;
        };
        let unreachable = gallery_ids.is_some_and(|g| matches.iter().all(|m| !g.contains(m)));
        per_query.push(QueryOutcome {
            query_id: r.query_id.clone(),
            first_hit_rank: r.item_ids().position(|id| matches.contains(id)).map(|p| p + 1),
            unreachable,
        });
    }
    per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let n = per_query.len();
    let acc = ks
        .iter()
        .map(|&k| {
            let hits = per_query.iter().filter(|o| RetrievalReport::hit_at(o, k)).count();
            (k, if n == 0 { 0.0 } else { hits as f64 / n as f64 })
        })
        .collect();
    Ok(RetrievalReport {
        acc,
        num_queries: n,
        num_excluded: excluded,
        num_unreachable: per_query.iter().filter(|o| o.unreachable).count(),
        per_query,
    })
}

/// Combined report written by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Option<DetectionReport>,
    pub retrieval: Option<RetrievalReport>,
    pub config_digest: String,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        if let Some(d) = &self.detection {
            writeln!(f, "detection")?;
            writeln!(f, "  {:<10} {:>8} {:>8} {:>8} {:>6} {:>6}", "category", "AP", "AP50", "AP75", "#gt", "#pred")?;
            for (c, a) in &d.per_category {
                writeln!(
                    f,
                    "  {:<10} {:>8.4} {:>8} {:>8} {:>6} {:>6}",
                    c,
                    a.ap,
                    opt(a.ap50),
                    opt(a.ap75),
                    a.num_gt,
                    a.num_pred
                )?;
            }
            writeln!(f, "  {:<10} {:>8.4} {:>8} {:>8}", "mean", d.ap, opt(d.ap50), opt(d.ap75))?;
            writeln!(f, "  TP {} FP {} FN {} @ IoU {:.2}", d.tp, d.fp, d.fn_, d.count_iou)?;
        }
        if let Some(r) = &self.retrieval {
            writeln!(f, "retrieval")?;
            for (k, v) in &r.acc {
                writeln!(f, "  Acc@{k:<4} {v:.6}")?;
            }
            writeln!(f, "  queries {} excluded {} unreachable {}", r.num_queries, r.num_excluded, r.num_unreachable)?;
        }
        write!(f, "config digest {}", self.config_digest)
    }
}
