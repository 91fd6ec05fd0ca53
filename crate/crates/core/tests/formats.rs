mod support;

use std::collections::BTreeSet;
use std::fs;

use garment::embeddings::Source;
use garment::pipeline::formats::{load_feature_maps, save_feature_maps, EMBEDDING_MAGIC};
use garment::pipeline::{
    load_detections, load_embeddings, load_rankings, load_retrieval_gt, save_detections, save_embeddings,
    save_rankings, save_retrieval_gt,
};
use garment::{EmbeddingMatrix, Error, FeatureMap, GroundTruthRet, RankedItem, RankingList, ScoredBox};
use rand::Rng;
use support::*;

#[test]
fn detections_round_trip_bitwise() {
    let mut r = rng(1);
    let boxes: Vec<ScoredBox> = (0..1000)
        .map(|i| {
            ScoredBox::new(
                random_box(&mut r, 500.0),
                r.random::<f64>(),
                r.random_range(1..=13),
                format!("img{}", i % 37),
                format!("m{}", i % 4),
            )
            .unwrap()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_detections(&path, &boxes).unwrap();
    let back = load_detections(&path).unwrap();
    assert_eq!(back.len(), boxes.len());
    for (a, b) in boxes.iter().zip(&back) {
        assert_eq!(a.score.to_bits(), b.score.to_bits());
        for (x, y) in a.bbox.to_array().iter().zip(b.bbox.to_array()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!((&a.image_id, &a.model_id, a.category_id), (&b.image_id, &b.model_id, b.category_id));
    }
}

#[test]
fn empty_detection_file_is_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    fs::write(&path, "").unwrap();
    assert!(load_detections(&path).unwrap().is_empty());
}

#[test]
fn detection_parse_errors_carry_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let good = r#"{"image_id":"i","model_id":"m","category_id":1,"score":0.5,"bbox":[0,0,1,1]}"#;
    let cases = [
        (r#"{"image_id":"i","model_id":"m","category_id":1,"score":1.5,"bbox":[0,0,1,1]}"#, "score"),
        (r#"{"image_id":"i","model_id":"m","category_id":0,"score":0.5,"bbox":[0,0,1,1]}"#, "category_id"),
        (r#"{"image_id":"i","model_id":"m","category_id":1,"score":0.5,"bbox":[5,0,1,1]}"#, "bbox"),
        (r#"{"image_id":"i","model_id":"m","category_id":1,"score":0.5}"#, "bbox"),
    ];
    for (bad, field) in cases {
        fs::write(&path, format!("{good}\n\n{bad}\n")).unwrap();
        let err = load_detections(&path).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 3);
                assert!(message.contains(field), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

fn write_matrix(dir: &std::path::Path, m: &EmbeddingMatrix) -> (std::path::PathBuf, std::path::PathBuf) {
    let (data, ids) = (dir.join("e.bin"), dir.join("e.ids.jsonl"));
    save_embeddings(m, &data, &ids).unwrap();
    (data, ids)
}

#[test]
fn embeddings_round_trip_bitwise() {
    let mut r = rng(2);
    let rows: Vec<Vec<f64>> =
        (0..100).map(|_| (0..64).map(|_| r.random_range(-1.0f32..1.0) as f64).collect()).collect();
    let m = matrix("g", Source::Gallery, &rows);
    let dir = tempfile::tempdir().unwrap();
    let (data, ids) = write_matrix(dir.path(), &m);
    assert_eq!(fs::metadata(&data).unwrap().len(), 12 + 100 * 64 * 4);
    let back = load_embeddings(&data, &ids).unwrap();
    assert_eq!(back.ids(), m.ids());
    assert!(back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn embedding_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = matrix("g", Source::Gallery, &[vec![0.5, 0.25], vec![1.0, 0.0]]);
    let (data, ids) = write_matrix(dir.path(), &m);
    let bytes = fs::read(&data).unwrap();

    let mut zero = EMBEDDING_MAGIC.to_vec();
    zero.extend(0u32.to_le_bytes());
    zero.extend(2u32.to_le_bytes());
    fs::write(&data, &zero).unwrap();
    assert!(matches!(load_embeddings(&data, &ids), Err(Error::EmptyMatrix)));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    fs::write(&data, &magic).unwrap();
    assert!(matches!(load_embeddings(&data, &ids), Err(Error::BadMagic(_))));

    fs::write(&data, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_embeddings(&data, &ids), Err(Error::Truncated { expected: 28, found: 25, .. })));

    fs::write(&data, &bytes[..7]).unwrap();
    assert!(matches!(load_embeddings(&data, &ids), Err(Error::Truncated { .. })));

    fs::write(&data, &bytes).unwrap();
    let id_text = fs::read_to_string(&ids).unwrap();
    let first_line = id_text.lines().next().unwrap().to_string();
    fs::write(&ids, first_line + "\n").unwrap();
    assert!(matches!(load_embeddings(&data, &ids), Err(Error::CountMismatch { header: 2, ids: 1 })));
}

#[test]
fn rankings_round_trip() {
    let lists = vec![
        RankingList {
            query_id: "q1".into(),
            entries: vec![
                RankedItem { item_id: "a".into(), score: 0.75 },
                RankedItem { item_id: "b".into(), score: -0.125 },
            ],
        },
        RankingList { query_id: "q0".into(), entries: vec![RankedItem { item_id: "c".into(), score: 1.0 }] },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.tsv");
    save_rankings(&path, &lists).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "q1\t1\ta\t0.75\nq1\t2\tb\t-0.125\nq0\t1\tc\t1\n");
    assert_eq!(load_rankings(&path).unwrap(), lists);

    fs::write(&path, "q1\t1\ta\t0.5\nq1\t3\tb\t0.4\n").unwrap();
    assert!(matches!(load_rankings(&path), Err(Error::Parse { line: 2, .. })));
    fs::write(&path, "q1\t1\ta\t0.5\nq2\t1\tb\t0.4\nq1\t2\tc\t0.3\n").unwrap();
    assert!(matches!(load_rankings(&path), Err(Error::Parse { line: 3, .. })));
    fs::write(&path, "q1\t1\ta\n").unwrap();
    assert!(matches!(load_rankings(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn retrieval_gt_round_trip() {
    let mut gt = GroundTruthRet::default();
    gt.matches.insert("q0".into(), BTreeSet::from(["g1".to_string(), "g2".to_string()]));
    gt.matches.insert("q1".into(), BTreeSet::new());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.jsonl");
    save_retrieval_gt(&path, &gt).unwrap();
    assert_eq!(load_retrieval_gt(&path).unwrap(), gt);

    let line = r#"{"query_id":"q0","matches":["g1"]}"#;
    fs::write(&path, format!("{line}\n{line}\n")).unwrap();
    assert!(matches!(load_retrieval_gt(&path), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn feature_maps_round_trip() {
    let mut r = rng(3);
    let maps: Vec<FeatureMap> = (0..5)
        .map(|_| FeatureMap::new(3, 2, 4, (0..24).map(|_| r.random::<f32>() as f64).collect()).unwrap())
        .collect();
    let ids = matrix("g", Source::Gallery, &vec![vec![1.0]; 5]).ids().to_vec();
    let dir = tempfile::tempdir().unwrap();
    let (data, id_path) = (dir.path().join("f.bin"), dir.path().join("f.ids.jsonl"));
    save_feature_maps(&maps, &ids, &data, &id_path).unwrap();
    let (back, back_ids) = load_feature_maps(&data, &id_path).unwrap();
    assert_eq!(back, maps);
    assert_eq!(back_ids, ids);
}
