use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use garment::boxes::{nms_images, wbf_fuse_images, ScoreMode, WbfParams};
use garment::descriptors::{combine_descriptors, PoolingSpec};
use garment::embeddings::EmbeddingMatrix;
use garment::eval::{acc_at_k, coco_iou_thresholds, detection_ap, EvalReport, GroundTruthDet};
use garment::pipeline::formats::{self, load_feature_maps};
use garment::pipeline::run::{assemble, write_report, FUSED_MODEL_ID};
use garment::pipeline::{run_pipeline, PipelineConfig, SyntheticSpec};
use garment::rerank::{k_reciprocal_rerank, RerankParams};
use garment::search::{build_index, knn_search};
use garment::{par, pipeline};

#[derive(Parser, Debug)]
#[command(name = "garment", version, about = "Detection fusion, retrieval and evaluation for clothes retrieval")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the seed of `gen-synth` specs.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FuseMethod {
    Wbf,
    Nms,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoreModeArg {
    Rescale,
    Mean,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse detections from several models per image.
    Fuse {
        /// Detections JSONL files; model ids come from the records.
        #[arg(long, required = true, num_args = 1..)]
        detections: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "wbf")]
        method: FuseMethod,
        #[arg(long, default_value_t = 0.55)]
        iou_threshold: f64,
        #[arg(long)]
        num_models: Option<usize>,
        #[arg(long, value_enum, default_value = "rescale")]
        score_mode: ScoreModeArg,
        /// Per-model weight as MODEL=WEIGHT (unlisted models get 1.0).
        #[arg(long = "weight", value_parser = parse_weight)]
        weights: Vec<(String, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detection AP against ground-truth boxes.
    EvalDet {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated IoU thresholds (default 0.50:0.05:0.95).
        #[arg(long, value_delimiter = ',')]
        iou_thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact top-K search of query rows against gallery rows.
    Search {
        /// Embedding binaries, one per model; several are concatenated.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Matching ids sidecars, same order as --data.
        #[arg(long, required = true, num_args = 1..)]
        ids: Vec<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        restrict_category: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-reciprocal re-ranking of existing rankings.
    Rerank {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        ids: Vec<PathBuf>,
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long, default_value_t = 20)]
        k1: usize,
        #[arg(long, default_value_t = 6)]
        k2: usize,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-K accuracy of rankings against retrieval ground truth.
    EvalRet {
        #[arg(long)]
        rankings: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10")]
        ks: Vec<usize>,
        /// Gallery ids sidecar, used to flag unreachable queries.
        #[arg(long)]
        gallery_ids: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a seeded synthetic benchmark.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pool feature maps into combined global descriptors.
    Pool {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        ids: PathBuf,
        /// Pooling specs in order: spoc, mac, gem or gem:<p>.
        #[arg(long = "spec", required = true, num_args = 1..)]
        specs: Vec<PoolingSpec>,
        #[arg(long)]
        out_data: PathBuf,
        #[arg(long)]
        out_ids: PathBuf,
    },
}

fn parse_weight(s: &str) -> Result<(String, f64), String> {
    let (model, w) = s.split_once('=').ok_or("expected MODEL=WEIGHT")?;
    let w: f64 = w.parse().map_err(|_| format!("bad weight {w:?}"))?;
    Ok((model.to_string(), w))
}

fn load_parts(data: &[PathBuf], ids: &[PathBuf]) -> Result<Vec<EmbeddingMatrix>> {
    if data.len() != ids.len() {
        bail!("{} --data files but {} --ids files", data.len(), ids.len());
    }
    data.iter()
        .zip(ids)
        .map(|(d, i)| formats::load_embeddings(d, i).with_context(|| format!("loading {}", d.display())))
        .collect()
}

fn emit(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(path) = out {
        write_report(path, report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fuse { detections, method, iou_threshold, num_models, score_mode, weights, out } => {
            let mut boxes = Vec::new();
            for path in &detections {
                boxes.extend(formats::load_detections(path)?);
            }
            match method {
                FuseMethod::Wbf => {
                    let mut map: BTreeMap<String, f64> = boxes.iter().map(|b| (b.model_id.clone(), 1.0)).collect();
                    map.extend(weights);
                    let params = WbfParams {
                        iou_threshold,
                        model_weights: Some(map),
                        num_models,
                        score_mode: match score_mode {
                            ScoreModeArg::Rescale => ScoreMode::Rescale,
                            ScoreModeArg::Mean => ScoreMode::Mean,
                        },
                    };
                    let fused = wbf_fuse_images(&boxes, &params)?;
                    log::info!("fuse: {} boxes in -> {} fused boxes out", boxes.len(), fused.len());
                    formats::save_fused(&out, &fused, FUSED_MODEL_ID)?;
                }
                FuseMethod::Nms => {
                    let kept = nms_images(&boxes, iou_threshold);
                    log::info!("nms: {} boxes in -> {} kept", boxes.len(), kept.len());
                    formats::save_detections(&out, &kept)?;
                }
            }
        }
        Command::EvalDet { pred, gt, iou_thresholds, out } => {
            let preds = formats::load_detections(&pred)?;
            let gt = GroundTruthDet::from_scored(&formats::load_detections(&gt)?);
            let thresholds = if iou_thresholds.is_empty() { coco_iou_thresholds() } else { iou_thresholds };
            let report = EvalReport {
                detection: Some(detection_ap(&preds, &gt, &thresholds)?),
                retrieval: None,
                config_digest: String::new(),
            };
            emit(&report, out.as_deref())?;
        }
        Command::Search { data, ids, k, restrict_category, out } => {
            let parts = load_parts(&data, &ids)?;
            let set = assemble(&parts, (parts.len() > 1).then_some(true))?;
            let index = build_index(set.gallery, restrict_category)?;
            let rankings = knn_search(&index, &set.queries, k, restrict_category)?;
            log::info!("search: {} queries against {} gallery rows", set.queries.rows(), index.len());
            formats::save_rankings(&out, &rankings)?;
        }
        Command::Rerank { data, ids, rankings, k1, k2, lambda, out } => {
            let parts = load_parts(&data, &ids)?;
            let set = assemble(&parts, (parts.len() > 1).then_some(true))?;
            let initial = formats::load_rankings(&rankings)?;
            let params = RerankParams { k1, k2, lambda };
            let reranked = k_reciprocal_rerank(&set.queries, &set.gallery, &initial, &params)?;
            log::info!("rerank: {} rankings re-ordered", reranked.len());
            formats::save_rankings(&out, &reranked)?;
        }
        Command::EvalRet { rankings, gt, ks, gallery_ids, out } => {
            let rankings = formats::load_rankings(&rankings)?;
            let gt = formats::load_retrieval_gt(&gt)?;
            let gallery: Option<HashSet<String>> = match gallery_ids {
                None => None,
                Some(path) => Some(read_item_ids(&path)?),
            };
            let report = EvalReport {
                detection: None,
                retrieval: Some(acc_at_k(&rankings, &gt, &ks, gallery.as_ref())?),
                config_digest: String::new(),
            };
            emit(&report, out.as_deref())?;
        }
        Command::Run { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let output = run_pipeline(&cfg)?;
            println!("{}", output.report);
            log::info!("report written to {}", output.report_path.display());
        }
        Command::GenSynth { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text).context("parsing synthetic spec")?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let manifest = pipeline::generate_synthetic(&spec, &out)?;
            println!("{}", out.join(&manifest.config).display());
        }
        Command::Pool { maps, ids, specs, out_data, out_ids } => {
            let (maps, ids) = load_feature_maps(&maps, &ids)?;
            let rows = par::try_map_range(maps.len(), |i| {
                combine_descriptors(&maps[i], &specs).map_err(|e| anyhow::anyhow!("map {:?}: {e}", ids[i].item_id))
            })?;
            let dim = rows[0].len();
            let matrix = EmbeddingMatrix::new(dim, rows.concat(), ids)?;
            formats::save_embeddings(&matrix, &out_data, &out_ids)?;
            log::info!("pool: {} maps -> {}-dim descriptors", matrix.rows(), dim);
        }
    }
    Ok(())
}

fn read_item_ids(path: &Path) -> Result<HashSet<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l)?;
            v["item_id"].as_str().map(str::to_string).context("ids record without item_id")
        })
        .collect()
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).init();
    par::init_global_threads(cli.threads);
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
