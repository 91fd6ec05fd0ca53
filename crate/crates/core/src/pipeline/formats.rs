//! On-disk formats: detections JSONL, embeddings binary + ids sidecar,
//! rankings TSV, retrieval ground truth JSONL and feature-map tensors.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, FusedBox, ScoredBox};
use crate::descriptors::FeatureMap;
use crate::embeddings::{EmbeddingMatrix, ItemMeta, Source};
use crate::error::{Error, Result};
use crate::eval::GroundTruthRet;
use crate::search::{RankedItem, RankingList};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"FMP1";
const HEADER_LEN: usize = 12;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Non-blank lines with their 1-based line numbers.
fn jsonl_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, line_no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::parse(path.display(), line_no, format!("malformed record: {e}")))
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line of a detections file. Fused output adds the optional fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub model_id: String,
    pub category_id: i64,
    pub score: f64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<String>>,
}

impl DetectionRecord {
    fn into_box(self, path: &Path, line: usize) -> Result<ScoredBox> {
        let err = |field: &str, msg: String| Error::parse(path.display(), line, format!("field `{field}`: {msg}"));
        let bbox = BoundingBox::from_array(self.bbox).map_err(|e| err("bbox", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.score) {
            return Err(err("score", format!("{} outside [0, 1]", self.score)));
        }
        let category_id = u32::try_from(self.category_id)
            .ok()
            .filter(|c| *c >= 1)
            .ok_or_else(|| err("category_id", format!("{} is not a positive id", self.category_id)))?;
        Ok(ScoredBox { bbox, score: self.score, category_id, image_id: self.image_id, model_id: self.model_id })
    }
}

impl From<&ScoredBox> for DetectionRecord {
    fn from(b: &ScoredBox) -> Self {
        Self {
            image_id: b.image_id.clone(),
            model_id: b.model_id.clone(),
            category_id: b.category_id as i64,
            score: b.score,
            bbox: b.bbox.to_array(),
            box_id: None,
            cluster_size: None,
            models: None,
        }
    }
}

pub fn load_detections(path: &Path) -> Result<Vec<ScoredBox>> {
    jsonl_lines(path)?
        .into_iter()
        .map(|(n, line)| parse_line::<DetectionRecord>(path, n, &line)?.into_box(path, n))
        .collect()
}

pub fn save_detections(path: &Path, boxes: &[ScoredBox]) -> Result<()> {
    write_jsonl(path, boxes.iter().map(DetectionRecord::from))
}

/// Box ids handed to the embedding producer: `<image_id>#<n>`, numbered per
/// image in output order.
pub fn fused_box_ids(fused: &[FusedBox]) -> Vec<String> {
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    fused
        .iter()
        .map(|f| {
            let n = counters.entry(f.image_id.as_str()).or_insert(0);
            let id = format!("{}#{}", f.image_id, n);
            *n += 1;
            id
        })
        .collect()
}

pub fn save_fused(path: &Path, fused: &[FusedBox], model_id: &str) -> Result<()> {
    let ids = fused_box_ids(fused);
    write_jsonl(
        path,
        fused.iter().zip(ids).map(|(f, id)| DetectionRecord {
            box_id: Some(id),
            cluster_size: Some(f.cluster_size),
            models: Some(f.model_ids.iter().cloned().collect()),
            ..DetectionRecord::from(&f.to_scored(model_id))
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IdRecord {
    row: usize,
    item_id: String,
    image_id: String,
    box_id: String,
    category_id: u32,
    source: Source,
}

fn read_header(path: &Path, bytes: &[u8], magic: &[u8; 4], fields: usize) -> Result<Vec<usize>> {
    let header_len = 4 + 4 * fields;
    if bytes.len() < header_len {
        return Err(Error::Truncated { path: path.into(), expected: header_len, found: bytes.len() });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic(path.into()));
    }
    Ok((0..fields).map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect())
}

fn read_f32_payload(path: &Path, bytes: &[u8], offset: usize, count: usize) -> Result<Vec<f64>> {
    let expected = offset + count * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated { path: path.into(), expected, found: bytes.len() });
    }
    Ok(bytes[offset..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

fn f32_bytes(values: &[f64], what: &str) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Data(format!("{what} value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn load_ids(path: &Path) -> Result<Vec<ItemMeta>> {
    jsonl_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(expected_row, (n, line))| {
            let r: IdRecord = parse_line(path, n, &line)?;
            if r.row != expected_row {
                return Err(Error::parse(
                    path.display(),
                    n,
                    format!("field `row`: expected {expected_row}, found {}", r.row),
                ));
            }
            Ok(ItemMeta {
                item_id: r.item_id,
                image_id: r.image_id,
                box_id: r.box_id,
                category_id: r.category_id,
                source: r.source,
            })
        })
        .collect()
}

fn save_ids(path: &Path, ids: &[ItemMeta]) -> Result<()> {
    write_jsonl(
        path,
        ids.iter().enumerate().map(|(row, m)| IdRecord {
            row,
            item_id: m.item_id.clone(),
            image_id: m.image_id.clone(),
            box_id: m.box_id.clone(),
            category_id: m.category_id,
            source: m.source,
        }),
    )
}

pub fn load_embeddings(data_path: &Path, ids_path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = read_all(data_path)?;
    let header = read_header(data_path, &bytes, EMBEDDING_MAGIC, 2)?;
    let (rows, dim) = (header[0], header[1]);
    if rows == 0 {
        return Err(Error::EmptyMatrix);
    }
    let data = read_f32_payload(data_path, &bytes, HEADER_LEN, rows * dim)?;
    let ids = load_ids(ids_path)?;
    if ids.len() != rows {
        return Err(Error::CountMismatch { header: rows, ids: ids.len() });
    }
    EmbeddingMatrix::new(dim, data, ids)
}

pub fn save_embeddings(m: &EmbeddingMatrix, data_path: &Path, ids_path: &Path) -> Result<()> {
    let mut w = create(data_path)?;
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    buf.extend(f32_bytes(m.data(), "embedding")?);
    w.write_all(&buf).map_err(|e| Error::io(data_path, e))?;
    w.flush().map_err(|e| Error::io(data_path, e))?;
    save_ids(ids_path, m.ids())
}

/// Feature maps sharing one shape: `FMP1`, then u32 LE count, channels,
/// height, width, then the f32 LE activations map by map. Row `i` of the
/// ids sidecar names map `i`.
pub fn load_feature_maps(data_path: &Path, ids_path: &Path) -> Result<(Vec<FeatureMap>, Vec<ItemMeta>)> {
    let bytes = read_all(data_path)?;
    let h = read_header(data_path, &bytes, FEATURE_MAP_MAGIC, 4)?;
    let (count, c, height, width) = (h[0], h[1], h[2], h[3]);
    if count == 0 {
        return Err(Error::EmptyMatrix);
    }
    let per_map = c * height * width;
    let values = read_f32_payload(data_path, &bytes, 4 + 16, count * per_map)?;
    let ids = load_ids(ids_path)?;
    if ids.len() != count {
        return Err(Error::CountMismatch { header: count, ids: ids.len() });
    }
    let maps = values
        .chunks_exact(per_map.max(1))
        .enumerate()
        .map(|(i, chunk)| {
            FeatureMap::new(c, height, width, chunk.to_vec())
                .map_err(|e| Error::Data(format!("map {i} ({:?}): {e}", ids[i].item_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((maps, ids))
}

pub fn save_feature_maps(maps: &[FeatureMap], ids: &[ItemMeta], data_path: &Path, ids_path: &Path) -> Result<()> {
    let first = maps.first().ok_or(Error::EmptyMatrix)?;
    if ids.len() != maps.len() {
        return Err(Error::CountMismatch { header: maps.len(), ids: ids.len() });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAP_MAGIC);
    for v in [maps.len(), first.channels(), first.height(), first.width()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in maps {
        if (m.channels(), m.height(), m.width()) != (first.channels(), first.height(), first.width()) {
            return Err(Error::Data("feature maps in one file must share a shape".into()));
        }
        buf.extend(f32_bytes(m.values(), "activation")?);
    }
    let mut w = create(data_path)?;
    w.write_all(&buf).map_err(|e| Error::io(data_path, e))?;
    w.flush().map_err(|e| Error::io(data_path, e))?;
    save_ids(ids_path, ids)
}

/// Formats like C's `%.9g`.
pub fn format_score(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mantissa), sign, exp.abs())
    } else {
        trim(&format!("{:.*}", (8 - exp) as usize, x))
    }
}

/// `query_id \t rank \t item_id \t score`, ranks 1-based.
pub fn save_rankings(path: &Path, rankings: &[RankingList]) -> Result<()> {
    let mut w = create(path)?;
    for r in rankings {
        for (i, e) in r.entries.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}", r.query_id, i + 1, e.item_id, format_score(e.score))
                .map_err(|err| Error::io(path, err))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_rankings(path: &Path) -> Result<Vec<RankingList>> {
    let reader = BufReader::new(open(path)?);
    let mut out: Vec<RankingList> = Vec::new();
    let mut finished: BTreeSet<String> = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path.display(),
                n,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let rank: usize = fields[1]
            .parse()
            .map_err(|_| Error::parse(path.display(), n, format!("field `rank`: {:?} is not an integer", fields[1])))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path.display(), n, format!("field `score`: {:?} is not a number", fields[3])))?;
        let query = fields[0];
        let starts_new = out.last().is_none_or(|r| r.query_id != query);
        if starts_new {
            if let Some(prev) = out.last() {
                finished.insert(prev.query_id.clone());
            }
            if finished.contains(query) {
                return Err(Error::parse(path.display(), n, format!("rows for query {query:?} are not contiguous")));
            }
            out.push(RankingList { query_id: query.to_string(), entries: Vec::new() });
        }
        let current = out.last_mut().unwrap();
        if rank != current.entries.len() + 1 {
            return Err(Error::parse(
                path.display(),
                n,
                format!("field `rank`: expected {}, found {rank}", current.entries.len() + 1),
            ));
        }
        current.entries.push(RankedItem { item_id: fields[2].to_string(), score });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GtRecord {
    query_id: String,
    matches: Vec<String>,
}

pub fn load_retrieval_gt(path: &Path) -> Result<GroundTruthRet> {
    let mut gt = GroundTruthRet::default();
    for (n, line) in jsonl_lines(path)? {
        let r: GtRecord = parse_line(path, n, &line)?;
        if gt.matches.insert(r.query_id.clone(), r.matches.into_iter().collect()).is_some() {
            return Err(Error::parse(path.display(), n, format!("duplicate query_id {:?}", r.query_id)));
        }
    }
    Ok(gt)
}

pub fn save_retrieval_gt(path: &Path, gt: &GroundTruthRet) -> Result<()> {
    write_jsonl(
        path,
        gt.matches.iter().map(|(q, m)| GtRecord { query_id: q.clone(), matches: m.iter().cloned().collect() }),
    )
}
