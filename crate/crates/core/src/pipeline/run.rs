use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use log::info;

use crate::boxes::{wbf_fuse_images, FusedBox, ScoredBox, WbfParams};
use crate::embeddings::{concat_features, l2_normalize, pca_fit, pca_transform, EmbeddingMatrix, Source};
use crate::error::{Error, Result};
use crate::eval::{acc_at_k, detection_ap, EvalReport, GroundTruthDet};
use crate::pipeline::config::{PipelineConfig, PostStep};
use crate::pipeline::formats;
use crate::rerank::{database_augmentation, k_reciprocal_rerank, query_expansion};
use crate::search::{build_index, knn_search, RankingList};

pub const FUSED_BOXES_FILE: &str = "fused_boxes.jsonl";
pub const RANKINGS_FILE: &str = "rankings.tsv";
pub const REPORT_FILE: &str = "report.json";

/// Model id stamped on fused boxes.
pub const FUSED_MODEL_ID: &str = "wbf";

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: EvalReport,
    pub fused: Vec<FusedBox>,
    pub rankings: Vec<RankingList>,
    pub rankings_path: Option<PathBuf>,
    pub report_path: PathBuf,
}

/// Query and gallery matrices flowing through the post-processing steps.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub queries: EmbeddingMatrix,
    pub gallery: EmbeddingMatrix,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn split(m: &EmbeddingMatrix, what: &str) -> Result<RetrievalSet> {
    let queries = m.filter_source(Source::Query).ok_or_else(|| Error::Data(format!("{what} has no query rows")))?;
    let gallery = m.filter_source(Source::Gallery).ok_or_else(|| Error::Data(format!("{what} has no gallery rows")))?;
    Ok(RetrievalSet { queries, gallery })
}

/// Applies one pre-search step. `concat` is handled by the caller.
pub fn apply_step(set: RetrievalSet, step: &PostStep) -> Result<RetrievalSet> {
    match step {
        PostStep::Concat { .. } | PostStep::Rerank(_) => Ok(set),
        PostStep::Pca { out_dim, whiten } => {
            let dim = out_dim.unwrap_or(set.gallery.dim()).min(set.gallery.rows());
            let model = pca_fit(&set.gallery, dim, *whiten)?;
            Ok(RetrievalSet {
                queries: l2_normalize(&pca_transform(&model, &set.queries)?)?,
                gallery: l2_normalize(&pca_transform(&model, &set.gallery)?)?,
            })
        }
        PostStep::Qe(p) => {
            let index = build_index(set.gallery.clone(), false)?;
            Ok(RetrievalSet { queries: query_expansion(&set.queries, &index, p)?, gallery: set.gallery })
        }
        PostStep::Dba(p) => Ok(RetrievalSet { gallery: database_augmentation(&set.gallery, p)?, queries: set.queries }),
    }
}

/// Splits each model's matrix into queries and gallery, L2-normalizes them
/// and concatenates across models when `concat` is configured.
pub fn assemble(parts: &[EmbeddingMatrix], concat: Option<bool>) -> Result<RetrievalSet> {
    let sets = parts
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let s = split(m, &format!("embedding input {i}"))?;
            Ok(RetrievalSet { queries: l2_normalize(&s.queries)?, gallery: l2_normalize(&s.gallery)? })
        })
        .collect::<Result<Vec<_>>>()?;
    match concat {
        Some(renormalize) => {
            let q: Vec<_> = sets.iter().map(|s| s.queries.clone()).collect();
            let g: Vec<_> = sets.iter().map(|s| s.gallery.clone()).collect();
            Ok(RetrievalSet { queries: concat_features(&q, renormalize)?, gallery: concat_features(&g, renormalize)? })
        }
        None => sets.into_iter().next().ok_or_else(|| Error::Config("no embedding inputs".into())),
    }
}

fn fuse_stage(config: &PipelineConfig) -> Result<Vec<FusedBox>> {
    let mut boxes: Vec<ScoredBox> = Vec::new();
    let mut weights: BTreeMap<String, f64> = BTreeMap::new();
    for input in &config.detections {
        let loaded = formats::load_detections(&input.path)?;
        info!("fuse: {} boxes from {}", loaded.len(), input.path.display());
        for b in &loaded {
            weights.insert(b.model_id.clone(), input.weight.unwrap_or(1.0));
        }
        boxes.extend(loaded);
    }
    if let Some(explicit) = &config.wbf.model_weights {
        weights.extend(explicit.iter().map(|(k, v)| (k.clone(), *v)));
    }
    let params = WbfParams { model_weights: Some(weights), ..config.wbf.clone() };
    let fused = wbf_fuse_images(&boxes, &params)?;
    info!("fuse: {} boxes in -> {} fused boxes out", boxes.len(), fused.len());
    Ok(fused)
}

/// Runs the configured stages in order and writes artifacts to
/// `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut fused = Vec::new();
    let mut detection = None;
    if !config.detections.is_empty() {
        fused = stage("fuse", fuse_stage(config))?;
        stage("fuse", formats::save_fused(&out_dir.join(FUSED_BOXES_FILE), &fused, FUSED_MODEL_ID))?;
        if let Some(gt_path) = &config.eval.detection_gt {
            let report = stage(
                "eval-det",
                (|| {
                    let gt = GroundTruthDet::from_scored(&formats::load_detections(gt_path)?);
                    let preds: Vec<ScoredBox> = fused.iter().map(|f| f.to_scored(FUSED_MODEL_ID)).collect();
                    info!("eval-det: {} predictions vs {} ground-truth boxes", preds.len(), gt.boxes.len());
                    detection_ap(&preds, &gt, &config.eval.iou_thresholds)
                })(),
            )?;
            detection = Some(report);
        }
    }

    let mut rankings = Vec::new();
    let mut rankings_path = None;
    let mut retrieval = None;
    if !config.embeddings.is_empty() {
        let parts = stage(
            "embeddings",
            config.embeddings.iter().map(|e| formats::load_embeddings(&e.data, &e.ids)).collect::<Result<Vec<_>>>(),
        )?;
        let concat = config.post.iter().find_map(|s| match s {
            PostStep::Concat { renormalize } => Some(*renormalize),
            _ => None,
        });
        let mut set = stage("embeddings", assemble(&parts, concat))?;
        info!(
            "embeddings: {} models -> {} queries, {} gallery rows, dim {}",
            parts.len(),
            set.queries.rows(),
            set.gallery.rows(),
            set.queries.dim()
        );
        if !fused.is_empty() {
            let box_ids: HashSet<String> = formats::fused_box_ids(&fused).into_iter().collect();
            let linked = set.queries.ids().iter().filter(|m| box_ids.contains(&m.box_id)).count();
            info!("embeddings: {linked} of {} query rows reference fused box ids", set.queries.rows());
        }
        for step in &config.post {
            if matches!(step, PostStep::Concat { .. } | PostStep::Rerank(_)) {
                continue;
            }
            set = stage(step.name(), apply_step(set, step))?;
            info!(
                "{}: {} queries, {} gallery rows, dim {}",
                step.name(),
                set.queries.rows(),
                set.gallery.rows(),
                set.queries.dim()
            );
        }

        let restrict = config.search.restrict_to_query_category;
        rankings = stage(
            "search",
            build_index(set.gallery.clone(), restrict)
                .and_then(|index| knn_search(&index, &set.queries, config.search.k, restrict)),
        )?;
        info!("search: {} queries -> {} rankings (K = {})", set.queries.rows(), rankings.len(), config.search.k);

        if let Some(p) = config.rerank_step() {
            rankings = stage("rerank", k_reciprocal_rerank(&set.queries, &set.gallery, &rankings, p))?;
            info!("rerank: {} rankings re-ordered", rankings.len());
        }

        let path = out_dir.join(RANKINGS_FILE);
        stage("search", formats::save_rankings(&path, &rankings))?;
        rankings_path = Some(path);

        if let Some(gt_path) = &config.eval.retrieval_gt {
            let report = stage(
                "eval-ret",
                (|| {
                    let gt = formats::load_retrieval_gt(gt_path)?;
                    let gallery_ids: HashSet<String> = set.gallery.ids().iter().map(|m| m.item_id.clone()).collect();
                    acc_at_k(&rankings, &gt, &config.eval.ks, Some(&gallery_ids))
                })(),
            )?;
            info!(
                "eval-ret: {} rankings -> {} scored, {} excluded",
                rankings.len(),
                report.num_queries,
                report.num_excluded
            );
            retrieval = Some(report);
        }
    }

    let report = EvalReport { detection, retrieval, config_digest: config.digest() };
    let report_path = out_dir.join(REPORT_FILE);
    write_report(&report_path, &report)?;
    Ok(PipelineOutput { report, fused, rankings, rankings_path, report_path })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
