//! Box geometry, greedy NMS and Weighted Boxes Fusion.
//!
//! Fusion clusters boxes per category: boxes are visited in descending
//! weighted score, each joins the first cluster whose current fused box
//! overlaps it by more than the IoU threshold, and every cluster's fused box
//! is the score-weighted average of its members. Unlike NMS nothing is
//! discarded; agreement between detectors raises the fused confidence.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Axis-aligned rectangle in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in [{x1}, {y1}, {x2}, {y2}]")));
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox(format!("zero or negative area [{x1}, {y1}, {x2}, {y2}]")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(self, other)
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub score: f64,
    pub category_id: u32,
    pub image_id: String,
    pub model_id: String,
}

impl ScoredBox {
    pub fn new(
        bbox: BoundingBox,
        score: f64,
        category_id: u32,
        image_id: impl Into<String>,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Data(format!("score {score} outside [0, 1]")));
        }
        if category_id == 0 {
            return Err(Error::Data("category_id must be >= 1".into()));
        }
        Ok(Self { bbox, score, category_id, image_id: image_id.into(), model_id: model_id.into() })
    }
}

/// Descending score, then model id, then input position.
fn score_order(a: (f64, &str, usize), b: (f64, &str, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2))
}

/// Class-aware greedy non-maximum suppression.
///
/// Boxes are visited in descending score; a box is kept unless a kept box of
/// the same category overlaps it with IoU >= `iou_threshold`.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| {
        score_order((boxes[i].score, &boxes[i].model_id, i), (boxes[j].score, &boxes[j].model_id, j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            boxes[k].category_id == boxes[i].category_id && boxes[k].bbox.iou(&boxes[i].bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| boxes[i].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Mean member score scaled by `min(T, N) / N`.
    #[default]
    Rescale,
    /// Mean member score.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WbfParams {
    pub iou_threshold: f64,
    /// Per-model weights. `None` weights every model 1.0; when present,
    /// every model seen in the input must be listed.
    pub model_weights: Option<BTreeMap<String, f64>>,
    /// Number of ensemble members. `None` counts distinct model ids.
    pub num_models: Option<usize>,
    pub score_mode: ScoreMode,
}

impl Default for WbfParams {
    fn default() -> Self {
        Self { iou_threshold: 0.55, model_weights: None, num_models: None, score_mode: ScoreMode::Rescale }
    }
}

/// Weights and ensemble size resolved against a concrete input.
struct Resolved {
    weighted: Vec<f64>,
    num_models: usize,
}

impl WbfParams {
    fn resolve(&self, boxes: &[ScoredBox]) -> Result<Resolved> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("iou_threshold {} outside [0, 1]", self.iou_threshold)));
        }
        let observed: BTreeSet<&str> = boxes.iter().map(|b| b.model_id.as_str()).collect();
        let num_models = match self.num_models {
            Some(0) => return Err(Error::Config("num_models must be positive".into())),
            Some(n) if n < observed.len() => {
                return Err(Error::Config(format!(
                    "num_models = {n} but the input contains {} distinct models",
                    observed.len()
                )))
            }
            Some(n) => n,
            None => observed.len().max(1),
        };
        if let Some(weights) = &self.model_weights {
            for (model, w) in weights {
                if !(w.is_finite() && *w > 0.0) {
                    return Err(Error::Config(format!("weight for model {model:?} must be positive, got {w}")));
                }
            }
        }
        let weighted = boxes
            .iter()
            .map(|b| {
                let w = match &self.model_weights {
                    None => 1.0,
                    Some(map) => *map
                        .get(&b.model_id)
                        .ok_or_else(|| Error::Config(format!("no weight configured for model {:?}", b.model_id)))?,
                };
                Ok((b.score * w).clamp(0.0, 1.0))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Resolved { weighted, num_models })
    }
}

/// A cluster of fused detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedBox {
    pub bbox: BoundingBox,
    pub score: f64,
    pub category_id: u32,
    pub image_id: String,
    /// Number of member boxes (T).
    pub cluster_size: usize,
    pub model_ids: BTreeSet<String>,
    /// Indices of the member boxes in the fusion input, in insertion order.
    pub members: Vec<usize>,
}

impl FusedBox {
    pub fn to_scored(&self, model_id: &str) -> ScoredBox {
        ScoredBox {
            bbox: self.bbox,
            score: self.score,
            category_id: self.category_id,
            image_id: self.image_id.clone(),
            model_id: model_id.to_string(),
        }
    }
}

struct Cluster {
    members: Vec<usize>,
    weight_sum: f64,
    score_sum: f64,
    weighted_coords: [f64; 4],
    plain_coords: [f64; 4],
    fused: BoundingBox,
}

impl Cluster {
    fn new(idx: usize, b: &BoundingBox, w: f64) -> Self {
        let c = b.to_array();
        Self {
            members: vec![idx],
            weight_sum: w,
            score_sum: w,
            weighted_coords: c.map(|v| v * w),
            plain_coords: c,
            fused: *b,
        }
    }

    fn push(&mut self, idx: usize, b: &BoundingBox, w: f64) {
        self.members.push(idx);
        self.weight_sum += w;
        self.score_sum += w;
        for (k, v) in b.to_array().into_iter().enumerate() {
            self.weighted_coords[k] += v * w;
            self.plain_coords[k] += v;
        }
        let coords = if self.weight_sum > 0.0 {
            self.weighted_coords.map(|v| v / self.weight_sum)
        } else {
            let t = self.members.len() as f64;
            self.plain_coords.map(|v| v / t)
        };
        // Convex combinations of valid boxes stay valid.
        self.fused = BoundingBox { x1: coords[0], y1: coords[1], x2: coords[2], y2: coords[3] };
    }
}

fn fuse_indices(boxes: &[ScoredBox], indices: &[usize], resolved: &Resolved, params: &WbfParams) -> Vec<FusedBox> {
    let mut by_category: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_category.entry(boxes[i].category_id).or_default().push(i);
    }
    let n = resolved.num_models;
    let mut out = Vec::new();
    for (category, mut members) in by_category {
        members.sort_by(|&i, &j| {
            score_order((resolved.weighted[i], &boxes[i].model_id, i), (resolved.weighted[j], &boxes[j].model_id, j))
        });
        let mut clusters: Vec<Cluster> = Vec::new();
        for i in members {
            let b = &boxes[i].bbox;
            let w = resolved.weighted[i];
            match clusters.iter_mut().find(|c| c.fused.iou(b) > params.iou_threshold) {
                Some(c) => c.push(i, b, w),
                None => clusters.push(Cluster::new(i, b, w)),
            }
        }
        for c in clusters {
            let t = c.members.len();
            let mut score = c.score_sum / t as f64;
            if params.score_mode == ScoreMode::Rescale {
                score *= t.min(n) as f64 / n as f64;
            }
            out.push(FusedBox {
                bbox: c.fused,
                score: score.clamp(0.0, 1.0),
                category_id: category,
                image_id: boxes[c.members[0]].image_id.clone(),
                cluster_size: t,
                model_ids: c.members.iter().map(|&m| boxes[m].model_id.clone()).collect(),
                members: c.members,
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Weighted Boxes Fusion over the boxes of a single image.
///
/// `members` in the output index into `boxes`.
pub fn wbf_fuse(boxes: &[ScoredBox], params: &WbfParams) -> Result<Vec<FusedBox>> {
    let resolved = params.resolve(boxes)?;
    if let Some(first) = boxes.first() {
        if let Some(other) = boxes.iter().find(|b| b.image_id != first.image_id) {
            return Err(Error::Precondition(format!(
                "wbf_fuse expects a single image, got {:?} and {:?}",
                first.image_id, other.image_id
            )));
        }
    }
    let all: Vec<usize> = (0..boxes.len()).collect();
    Ok(fuse_indices(boxes, &all, &resolved, params))
}

/// Fuses every image independently (in parallel) and returns the results
/// ordered by image id, then descending fused score.
///
/// The ensemble size is resolved over the whole input, so an image where
/// only some detectors fired is still rescaled against all of them.
pub fn wbf_fuse_images(boxes: &[ScoredBox], params: &WbfParams) -> Result<Vec<FusedBox>> {
    let resolved = params.resolve(boxes)?;
    let groups = group_by_image(boxes);
    let fused = par::map_slice(&groups, |(_, idx)| fuse_indices(boxes, idx, &resolved, params));
    Ok(fused.into_iter().flatten().collect())
}

/// Applies [`nms`] per image; output ordered by image id.
pub fn nms_images(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<ScoredBox> {
    let groups = group_by_image(boxes);
    par::map_slice(&groups, |(_, idx)| {
        let subset: Vec<ScoredBox> = idx.iter().map(|&i| boxes[i].clone()).collect();
        nms(&subset, iou_threshold)
    })
    .into_iter()
    .flatten()
    .collect()
}

fn group_by_image(boxes: &[ScoredBox]) -> Vec<(&str, Vec<usize>)> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, b) in boxes.iter().enumerate() {
        groups.entry(b.image_id.as_str()).or_default().push(i);
    }
    groups.into_iter().collect()
}
