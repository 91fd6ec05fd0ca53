//! Orchestration, file formats, configuration and the synthetic benchmark.

pub mod config;
pub mod formats;
pub mod run;
pub mod synth;

pub use config::{DetectionInput, EmbeddingInput, EvalConfig, PipelineConfig, PostStep, SearchConfig};
pub use formats::{
    load_detections, load_embeddings, load_rankings, load_retrieval_gt, save_detections, save_embeddings,
    save_rankings, save_retrieval_gt,
};
pub use run::{run_pipeline, PipelineOutput};
pub use synth::{generate_synthetic, synthesize, SyntheticData, SyntheticSpec};
