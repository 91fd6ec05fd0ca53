use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::WbfParams;
use crate::error::{Error, Result};
use crate::eval::coco_iou_thresholds;
use crate::rerank::{QeParams, RerankParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionInput {
    pub path: PathBuf,
    /// Fusion weight for every model id in this file (default 1.0).
    #[serde(default)]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingInput {
    pub data: PathBuf,
    pub ids: PathBuf,
}

fn yes() -> bool {
    true
}

/// One post-processing step. `rerank` runs after search; everything else
/// runs before it, in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "lowercase")]
pub enum PostStep {
    Concat {
        #[serde(default = "yes")]
        renormalize: bool,
    },
    Pca {
        /// Defaults to the input dimension.
        #[serde(default)]
        out_dim: Option<usize>,
        #[serde(default = "yes")]
        whiten: bool,
    },
    Qe(QeParams),
    Dba(QeParams),
    Rerank(RerankParams),
}

impl PostStep {
    pub fn name(&self) -> &'static str {
        match self {
            PostStep::Concat { .. } => "concat",
            PostStep::Pca { .. } => "pca",
            PostStep::Qe(_) => "qe",
            PostStep::Dba(_) => "dba",
            PostStep::Rerank(_) => "rerank",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    pub restrict_to_query_category: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { k: 10, restrict_to_query_category: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub detection_gt: Option<PathBuf>,
    pub retrieval_gt: Option<PathBuf>,
    pub ks: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { detection_gt: None, retrieval_gt: None, ks: vec![1, 10], iou_thresholds: coco_iou_thresholds() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub detections: Vec<DetectionInput>,
    #[serde(default)]
    pub wbf: WbfParams,
    #[serde(default)]
    pub embeddings: Vec<EmbeddingInput>,
    #[serde(default)]
    pub post: Vec<PostStep>,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_relative_to(base);
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.detections {
            fix(&mut d.path);
        }
        for e in &mut self.embeddings {
            fix(&mut e.data);
            fix(&mut e.ids);
        }
        if let Some(p) = &mut self.eval.detection_gt {
            fix(p);
        }
        if let Some(p) = &mut self.eval.retrieval_gt {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    /// Checks step ordering and parameter ranges before any work is done.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.detections.is_empty() && self.embeddings.is_empty() {
            return bad("config has neither detection nor embedding inputs".into());
        }
        for d in &self.detections {
            if let Some(w) = d.weight {
                if !(w.is_finite() && w > 0.0) {
                    return bad(format!("weight for {} must be positive", d.path.display()));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.wbf.iou_threshold) {
            return bad(format!("wbf.iou_threshold {} outside [0, 1]", self.wbf.iou_threshold));
        }
        if self.wbf.num_models == Some(0) {
            return bad("wbf.num_models must be positive".into());
        }
        let steps: Vec<&str> = self.post.iter().map(PostStep::name).collect();
        if !self.post.is_empty() && self.embeddings.is_empty() {
            return bad("post-processing steps need embedding inputs".into());
        }
        let count = |n: &str| steps.iter().filter(|s| **s == n).count();
        if count("concat") > 1 {
            return bad("concat may appear at most once".into());
        }
        if count("concat") == 1 && steps[0] != "concat" {
            return bad("concat must be the first post-processing step".into());
        }
        if self.embeddings.len() > 1 && count("concat") == 0 {
            return bad(format!("{} embedding inputs need a leading concat step", self.embeddings.len()));
        }
        if count("rerank") > 1 {
            return bad("rerank may appear at most once".into());
        }
        if count("rerank") == 1 && steps.last() != Some(&"rerank") {
            return bad("rerank runs on search output and must be the last step".into());
        }
        for step in &self.post {
            match step {
                PostStep::Pca { out_dim: Some(0), .. } => return bad("pca.out_dim must be positive".into()),
                PostStep::Qe(p) | PostStep::Dba(p) if !(p.alpha.is_finite() && p.alpha >= 0.0) => {
                    return bad(format!("{} alpha must be >= 0", step.name()))
                }
                PostStep::Rerank(p) => {
                    p.validate()?;
                    if self.search.k < p.k1 {
                        return bad(format!("rerank needs search.k >= k1 ({} < {})", self.search.k, p.k1));
                    }
                }
                _ => {}
            }
        }
        if self.search.k == 0 {
            return bad("search.k must be >= 1".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty and >= 1".into());
        }
        if self.eval.detection_gt.is_some() && self.detections.is_empty() {
            return bad("eval.detection_gt needs detection inputs".into());
        }
        if self.eval.retrieval_gt.is_some() && self.embeddings.is_empty() {
            return bad("eval.retrieval_gt needs embedding inputs".into());
        }
        if self.eval.iou_thresholds.is_empty() || self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("eval.iou_thresholds must be non-empty and in (0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn rerank_step(&self) -> Option<&RerankParams> {
        self.post.iter().find_map(|s| match s {
            PostStep::Rerank(p) => Some(p),
            _ => None,
        })
    }
}
