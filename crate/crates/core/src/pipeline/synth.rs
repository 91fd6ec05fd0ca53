//! Seeded synthetic benchmark: ground-truth boxes, noisy detectors and
//! clustered multi-model embeddings with planted query/gallery matches.
//!
//! Every random draw comes from a ChaCha stream selected by
//! `(purpose, a, b)` under the spec's seed, so any image or item can be
//! generated independently and in parallel with identical results.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, ScoredBox};
use crate::embeddings::{EmbeddingMatrix, ItemMeta, Source};
use crate::error::{Error, Result};
use crate::eval::GroundTruthRet;
use crate::par;
use crate::pipeline::config::{DetectionInput, EmbeddingInput, EvalConfig, PipelineConfig, PostStep, SearchConfig};
use crate::pipeline::formats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoise {
    pub count: usize,
    /// Std-dev of per-coordinate jitter, pixels.
    pub jitter_sigma: f64,
    pub score_noise_sigma: f64,
    pub miss_rate: f64,
    /// Probability that a detected box is accompanied by a spurious box.
    pub fp_rate: f64,
    pub tp_score: f64,
    pub fp_score: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            count: 5,
            jitter_sigma: 4.0,
            score_noise_sigma: 0.15,
            miss_rate: 0.1,
            fp_rate: 0.1,
            tp_score: 0.8,
            fp_score: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingNoise {
    pub dim: usize,
    pub num_models: usize,
    /// Spread of item centers around their category center.
    pub cluster_spread: f64,
    /// Per-model sample noise; one value is broadcast to all models. The
    /// default keeps single-model top-10 accuracy well below 1.
    pub model_noise_sigma: Vec<f64>,
    pub gallery_per_item: usize,
    /// Extra gallery rows that match no query.
    pub distractors: usize,
}

impl Default for EmbeddingNoise {
    fn default() -> Self {
        Self {
            dim: 64,
            num_models: 3,
            cluster_spread: 1.0,
            model_noise_sigma: vec![1.2],
            gallery_per_item: 2,
            distractors: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    #[serde(default = "default_images")]
    pub num_images: usize,
    #[serde(default = "default_categories")]
    pub num_categories: u32,
    #[serde(default = "default_boxes")]
    pub gt_boxes_per_image: usize,
    #[serde(default = "default_image_size")]
    pub image_size: f64,
    #[serde(default)]
    pub detectors: DetectorNoise,
    #[serde(default)]
    pub embedding: EmbeddingNoise,
}

fn default_images() -> usize {
    100
}
fn default_categories() -> u32 {
    4
}
fn default_boxes() -> usize {
    3
}
fn default_image_size() -> f64 {
    640.0
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            num_images: default_images(),
            num_categories: default_categories(),
            gt_boxes_per_image: default_boxes(),
            image_size: default_image_size(),
            detectors: DetectorNoise::default(),
            embedding: EmbeddingNoise::default(),
        }
    }

    /// Every noise source switched off.
    pub fn noiseless(seed: u64) -> Self {
        let mut s = Self::new(seed);
        s.detectors.jitter_sigma = 0.0;
        s.detectors.score_noise_sigma = 0.0;
        s.detectors.miss_rate = 0.0;
        s.detectors.fp_rate = 0.0;
        s.embedding.model_noise_sigma = vec![0.0];
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        let d = &self.detectors;
        let e = &self.embedding;
        if self.num_images == 0 || self.num_categories == 0 || self.gt_boxes_per_image == 0 {
            return bad("image, category and box counts must be positive");
        }
        if !(self.image_size.is_finite() && self.image_size >= 16.0) {
            return bad("image_size must be >= 16");
        }
        for (name, r) in
            [("miss_rate", d.miss_rate), ("fp_rate", d.fp_rate), ("tp_score", d.tp_score), ("fp_score", d.fp_score)]
        {
            if !(0.0..=1.0).contains(&r) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        let sigmas = [d.jitter_sigma, d.score_noise_sigma, e.cluster_spread]
            .into_iter()
            .chain(e.model_noise_sigma.iter().copied());
        for s in sigmas {
            if !(s.is_finite() && s >= 0.0) {
                return bad("noise parameters must be finite and >= 0");
            }
        }
        if e.dim == 0 || e.num_models == 0 || e.gallery_per_item == 0 {
            return bad("embedding dim, model count and gallery_per_item must be positive");
        }
        if !(e.model_noise_sigma.len() == 1 || e.model_noise_sigma.len() == e.num_models) {
            return bad("model_noise_sigma needs 1 or num_models entries");
        }
        Ok(())
    }

    fn model_sigma(&self, m: usize) -> f64 {
        let s = &self.embedding.model_noise_sigma;
        if s.len() == 1 {
            s[0]
        } else {
            s[m]
        }
    }

    pub fn num_items(&self) -> usize {
        self.num_images * self.gt_boxes_per_image
    }
}

/// Random-stream purposes.
mod stream {
    pub const GT_LAYOUT: u64 = 1;
    pub const DETECTOR: u64 = 2;
    pub const CATEGORY_CENTER: u64 = 3;
    pub const ITEM_CENTER: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const DISTRACTOR: u64 = 6;
}

/// Independent generator for `(purpose, a, b)` under `seed`.
pub fn stream_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) ^ ((a & 0x0fff_ffff) << 28) ^ (b & 0x0fff_ffff));
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
    let n = crate::linalg::l2_norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

pub fn image_id(i: usize) -> String {
    format!("img{i:05}")
}

pub fn detector_id(d: usize) -> String {
    format!("det{d}")
}

/// In-memory benchmark instance.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub gt_boxes: Vec<ScoredBox>,
    /// One list per detector.
    pub detections: Vec<Vec<ScoredBox>>,
    /// One matrix per embedding model, queries then gallery rows.
    pub embeddings: Vec<EmbeddingMatrix>,
    pub retrieval_gt: GroundTruthRet,
}

impl SyntheticData {
    pub fn queries(&self, model: usize) -> EmbeddingMatrix {
        self.embeddings[model].filter_source(Source::Query).expect("queries present")
    }

    pub fn gallery(&self, model: usize) -> EmbeddingMatrix {
        self.embeddings[model].filter_source(Source::Gallery).expect("gallery present")
    }
}

fn gt_layout(spec: &SyntheticSpec, image: usize) -> Vec<ScoredBox> {
    let mut rng = stream_rng(spec.seed, stream::GT_LAYOUT, image as u64, 0);
    let n = spec.gt_boxes_per_image;
    let grid = (n as f64).sqrt().ceil() as usize;
    let cell = spec.image_size / grid as f64;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut rng);
    cells[..n]
        .iter()
        .map(|&c| {
            let (cx, cy) = ((c % grid) as f64 * cell, (c / grid) as f64 * cell);
            let w = cell * rng.random_range(0.4..0.9);
            let h = cell * rng.random_range(0.4..0.9);
            let x1 = cx + rng.random_range(0.0..cell - w);
            let y1 = cy + rng.random_range(0.0..cell - h);
            let category = rng.random_range(1..=spec.num_categories);
            ScoredBox::new(
                BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("positive size"),
                1.0,
                category,
                image_id(image),
                "gt",
            )
            .expect("valid gt box")
        })
        .collect()
}

fn jittered(b: &BoundingBox, sigma: f64, rng: &mut ChaCha8Rng) -> BoundingBox {
    let mut c = b.to_array().map(|v| v + sigma * normal(rng));
    if c[2] < c[0] + 1.0 {
        c[2] = c[0] + 1.0;
    }
    if c[3] < c[1] + 1.0 {
        c[3] = c[1] + 1.0;
    }
    BoundingBox::from_array(c).expect("ordered coordinates")
}

fn detect_image(spec: &SyntheticSpec, detector: usize, image: usize, gt: &[ScoredBox]) -> Vec<ScoredBox> {
    let d = &spec.detectors;
    let mut rng = stream_rng(spec.seed, stream::DETECTOR, detector as u64, image as u64);
    let model = detector_id(detector);
    let mut out = Vec::new();
    for g in gt {
        // Draw every variate up front so the stream layout does not depend on outcomes.
        let miss = rng.random::<f64>() < d.miss_rate;
        let bbox = jittered(&g.bbox, d.jitter_sigma, &mut rng);
        let score = (d.tp_score + d.score_noise_sigma * normal(&mut rng)).clamp(0.01, 1.0);
        let spawn_fp = rng.random::<f64>() < d.fp_rate;
        let size = spec.image_size;
        let (w, h) = (rng.random_range(0.05..0.3) * size, rng.random_range(0.05..0.3) * size);
        let (x1, y1) = (rng.random_range(0.0..size - w), rng.random_range(0.0..size - h));
        let fp_category = rng.random_range(1..=spec.num_categories);
        let fp_score = (d.fp_score + d.score_noise_sigma * normal(&mut rng)).clamp(0.01, 1.0);
        if miss {
            continue;
        }
        out.push(ScoredBox::new(bbox, score, g.category_id, g.image_id.clone(), model.clone()).expect("valid"));
        if spawn_fp {
            let fp = BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("positive size");
            out.push(ScoredBox::new(fp, fp_score, fp_category, g.image_id.clone(), model.clone()).expect("valid"));
        }
    }
    out
}

pub fn query_id(item: usize) -> String {
    format!("q{item:06}")
}

pub fn gallery_item_id(item: usize, j: usize) -> String {
    format!("g{item:06}-{j}")
}

/// Generates the whole benchmark in memory.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let per_image: Vec<Vec<ScoredBox>> = par::map_range(spec.num_images, |i| gt_layout(spec, i));
    let gt_boxes: Vec<ScoredBox> = per_image.iter().flatten().cloned().collect();
    let detections = (0..spec.detectors.count)
        .map(|d| {
            par::map_range(spec.num_images, |i| detect_image(spec, d, i, &per_image[i])).into_iter().flatten().collect()
        })
        .collect();

    let e = &spec.embedding;
    let dim = e.dim;
    let category_centers: Vec<Vec<f64>> = (0..spec.num_categories)
        .map(|c| unit_gaussian(&mut stream_rng(spec.seed, stream::CATEGORY_CENTER, c as u64, 0), dim))
        .collect();
    let items = spec.num_items();
    let item_centers: Vec<Vec<f64>> = par::map_range(items, |it| {
        let cat = gt_boxes[it].category_id as usize - 1;
        let mut rng = stream_rng(spec.seed, stream::ITEM_CENTER, it as u64, 0);
        let offset = unit_gaussian(&mut rng, dim);
        let v: Vec<f64> = category_centers[cat].iter().zip(&offset).map(|(c, o)| c + e.cluster_spread * o).collect();
        let n = crate::linalg::l2_norm(&v);
        v.into_iter().map(|x| x / n).collect()
    });

    // Rows: one query per item, then gallery_per_item rows per item, then distractors.
    let mut ids = Vec::new();
    let mut retrieval_gt = GroundTruthRet::default();
    for (it, g) in gt_boxes.iter().enumerate() {
        ids.push(ItemMeta {
            item_id: query_id(it),
            image_id: g.image_id.clone(),
            box_id: format!("{}#{}", g.image_id, it % spec.gt_boxes_per_image),
            category_id: g.category_id,
            source: Source::Query,
        });
        retrieval_gt
            .matches
            .insert(query_id(it), (0..e.gallery_per_item).map(|j| gallery_item_id(it, j)).collect::<BTreeSet<_>>());
    }
    for (it, g) in gt_boxes.iter().enumerate() {
        for j in 0..e.gallery_per_item {
            let id = gallery_item_id(it, j);
            ids.push(ItemMeta {
                item_id: id.clone(),
                image_id: format!("shop-{id}"),
                box_id: id,
                category_id: g.category_id,
                source: Source::Gallery,
            });
        }
    }
    let mut distractor_cats = Vec::with_capacity(e.distractors);
    for x in 0..e.distractors {
        let mut rng = stream_rng(spec.seed, stream::DISTRACTOR, x as u64, 0);
        let cat = rng.random_range(1..=spec.num_categories);
        distractor_cats.push(cat);
        let id = format!("x{x:06}");
        ids.push(ItemMeta {
            item_id: id.clone(),
            image_id: format!("shop-{id}"),
            box_id: id,
            category_id: cat,
            source: Source::Gallery,
        });
    }

    // Sample s of item it: s = 0 is the query, s >= 1 gallery copies.
    let samples_per_item = 1 + e.gallery_per_item;
    let embeddings = (0..e.num_models)
        .map(|m| {
            let sigma = spec.model_sigma(m);
            let sample = |center: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
                let noise = unit_gaussian(rng, dim);
                let v: Vec<f64> = center.iter().zip(&noise).map(|(c, z)| c + sigma * z).collect();
                let n = crate::linalg::l2_norm(&v);
                v.into_iter().map(|x| x / n).collect()
            };
            let per_item: Vec<Vec<Vec<f64>>> = par::map_range(items, |it| {
                (0..samples_per_item)
                    .map(|s| {
                        let mut rng =
                            stream_rng(spec.seed, stream::SAMPLE, (m * samples_per_item + s) as u64, it as u64);
                        sample(&item_centers[it], &mut rng)
                    })
                    .collect()
            });
            let distractors: Vec<Vec<f64>> = par::map_range(e.distractors, |x| {
                let mut rng = stream_rng(spec.seed, stream::DISTRACTOR, x as u64, 1 + m as u64);
                let offset = unit_gaussian(&mut rng, dim);
                let center: Vec<f64> = category_centers[distractor_cats[x] as usize - 1]
                    .iter()
                    .zip(&offset)
                    .map(|(c, o)| c + e.cluster_spread * o)
                    .collect();
                let n = crate::linalg::l2_norm(&center);
                let center: Vec<f64> = center.into_iter().map(|v| v / n).collect();
                sample(&center, &mut rng)
            });
            let mut data = Vec::with_capacity(ids.len() * dim);
            for rows in &per_item {
                data.extend_from_slice(&rows[0]);
            }
            for rows in &per_item {
                for r in &rows[1..] {
                    data.extend_from_slice(r);
                }
            }
            for r in &distractors {
                data.extend_from_slice(r);
            }
            EmbeddingMatrix::new(dim, data, ids.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticData { gt_boxes, detections, embeddings, retrieval_gt })
}

/// Paths written by [`generate_synthetic`], relative to the output dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub gt_detections: PathBuf,
    pub detections: Vec<PathBuf>,
    pub embeddings: Vec<EmbeddingInput>,
    pub retrieval_gt: PathBuf,
    pub config: PathBuf,
}

/// Writes the benchmark plus a ready-to-run `config.json` into `out_dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticManifest> {
    let data = synthesize(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rel = |name: String| PathBuf::from(name);
    let manifest = SyntheticManifest {
        gt_detections: rel("gt_detections.jsonl".into()),
        detections: (0..data.detections.len()).map(|d| rel(format!("detections_{d}.jsonl"))).collect(),
        embeddings: (0..data.embeddings.len())
            .map(|m| EmbeddingInput {
                data: rel(format!("embeddings_{m}.bin")),
                ids: rel(format!("embeddings_{m}.ids.jsonl")),
            })
            .collect(),
        retrieval_gt: rel("retrieval_gt.jsonl".into()),
        config: rel("config.json".into()),
    };
    formats::save_detections(&out_dir.join(&manifest.gt_detections), &data.gt_boxes)?;
    for (d, boxes) in data.detections.iter().enumerate() {
        formats::save_detections(&out_dir.join(&manifest.detections[d]), boxes)?;
    }
    for (m, matrix) in data.embeddings.iter().enumerate() {
        let e = &manifest.embeddings[m];
        formats::save_embeddings(matrix, &out_dir.join(&e.data), &out_dir.join(&e.ids))?;
    }
    formats::save_retrieval_gt(&out_dir.join(&manifest.retrieval_gt), &data.retrieval_gt)?;

    let config = PipelineConfig {
        detections: manifest.detections.iter().map(|p| DetectionInput { path: p.clone(), weight: None }).collect(),
        wbf: Default::default(),
        embeddings: manifest.embeddings.clone(),
        post: if manifest.embeddings.len() > 1 { vec![PostStep::Concat { renormalize: true }] } else { vec![] },
        search: SearchConfig::default(),
        eval: EvalConfig {
            detection_gt: Some(manifest.gt_detections.clone()),
            retrieval_gt: Some(manifest.retrieval_gt.clone()),
            ..Default::default()
        },
        output_dir: rel("out".into()),
    };
    let path = out_dir.join(&manifest.config);
    let text = serde_json::to_string_pretty(&config)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let summary: BTreeMap<&str, usize> = BTreeMap::from([
        ("gt_boxes", data.gt_boxes.len()),
        ("detections", data.detections.iter().map(Vec::len).sum()),
        ("embedding_rows", data.embeddings[0].rows()),
    ]);
    log::info!("synthetic benchmark written to {}: {summary:?}", out_dir.display());
    Ok(manifest)
}
