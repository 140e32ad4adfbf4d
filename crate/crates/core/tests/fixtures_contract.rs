//! Files in `tests/fixtures/extract` mirror what the extraction scripts emit.
//! Every one of them must load through the public loaders without error.

use std::path::{Path, PathBuf};

use dejavu::datamodel::{
    ids_path, load_annotations, load_embeddings, load_labels, load_probs, SampleId,
};
use dejavu::knn::KnnIndex;
use dejavu::reference::{fit_nb, ReferencePredictor};
use dejavu::Error;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn sid(s: &str) -> SampleId {
    SampleId::new(s).unwrap()
}

#[test]
fn embeddings_fixture_loads_with_aligned_ids() {
    let path = fixture("extract/tiny.dvem");
    let m = load_embeddings(&path).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.dim(), 4);
    let id_lines = std::fs::read_to_string(ids_path(&path)).unwrap();
    let expect: Vec<SampleId> = id_lines.lines().map(sid).collect();
    assert_eq!(m.ids(), expect.as_slice());
    assert_eq!(m.row(1), &[0.6, 0.8, 0.0, 0.0]);

    let m = m.normalize_rows().unwrap();
    let index = KnnIndex::new(&m).unwrap();
    let hits = index.query(m.row(0), 1).unwrap();
    assert_eq!(hits.0[0].id, sid("img_0001"));
}

#[test]
fn extractor_sidecar_is_json() {
    let text = std::fs::read_to_string(fixture("extract/tiny.meta.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rows"], 3);
}

#[test]
fn annotation_fixture_keeps_empty_lines_as_samples() {
    let ann = load_annotations(&fixture("extract/annotations.jsonl")).unwrap();
    assert_eq!(ann.len(), 3);
    assert_eq!(ann.vocabulary(), ["grass", "tree", "water"]);
    assert!(ann.get(&sid("img_0003")).unwrap().is_empty());
    assert_eq!(ann.get(&sid("img_0002")).unwrap(), &[(0, 0.75), (1, 0.4)]);
}

#[test]
fn label_and_prob_fixtures_load() {
    let labels = load_labels(&fixture("extract/labels.csv")).unwrap();
    assert_eq!(labels.classes(), ["dog", "swan"]);
    assert_eq!(labels.get(&sid("img_0001")), Some(1));

    let probs = load_probs(&fixture("extract/probs.csv")).unwrap();
    assert_eq!(probs.classes(), labels.classes());
    let reference = ReferencePredictor::Ingested(probs);
    assert_eq!(
        reference.distribution(&sid("img_0002"), None, None).unwrap(),
        vec![0.75, 0.25]
    );
    assert!(matches!(
        reference.distribution(&sid("absent"), None, None),
        Err(Error::MissingSample(_))
    ));
}

#[test]
fn swan_fixture_fits() {
    let ann = load_annotations(&fixture("swan/annotations.jsonl")).unwrap();
    let labels = load_labels(&fixture("swan/labels.csv")).unwrap();
    let model = fit_nb(&ann, &labels, 1.0, ann.vocabulary().len()).unwrap();
    assert_eq!(model.classes(), ["dog", "swan"]);
    assert_eq!(model.vocabulary(), ["grass", "water"]);
}

#[test]
fn truncated_embedding_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = std::fs::read(fixture("extract/tiny.dvem")).unwrap();
    let path = dir.path().join("cut.dvem");
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    std::fs::copy(fixture("extract/tiny.ids"), ids_path(&path)).unwrap();
    assert!(matches!(load_embeddings(&path), Err(Error::Truncated { .. })));
}
