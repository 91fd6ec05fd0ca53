//! Batch engine for the stages of a clothes-retrieval system that sit
//! around the neural networks: detector ensembling with Weighted Boxes
//! Fusion, global-descriptor pooling, feature concatenation and PCA
//! whitening, exact cosine retrieval, query expansion, database-side
//! augmentation, k-reciprocal re-ranking, and detection/retrieval scoring.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and runs sequentially
//! otherwise. Outputs never depend on the thread count.

pub mod boxes;
pub mod descriptors;
pub mod embeddings;
mod error;
pub mod eval;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod rerank;
pub mod search;

pub use boxes::{iou, nms, wbf_fuse, wbf_fuse_images, BoundingBox, FusedBox, ScoreMode, ScoredBox, WbfParams};
pub use descriptors::{combine_descriptors, pool, FeatureMap, PoolingKind, PoolingSpec};
pub use embeddings::{
    concat_features, l2_normalize, pca_fit, pca_inverse_transform, pca_transform, EmbeddingMatrix, ItemMeta, PcaModel,
    Source,
};
pub use error::{Error, Result};
pub use eval::{acc_at_k, detection_ap, EvalReport, GroundTruthDet, GroundTruthRet};
pub use rerank::{database_augmentation, k_reciprocal_rerank, query_expansion, KReciprocal, QeParams, RerankParams};
pub use search::{build_index, knn_search, RankedItem, RankingList, RetrievalIndex};
