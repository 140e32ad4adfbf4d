use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SampleId;
use crate::error::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-5;

/// `(object index, detection score)`.
pub type ScoredObject = (usize, f64);

/// Foreground class per sample. Class indices point into `classes`, which is
/// sorted ascending by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabelTable {
    classes: Vec<String>,
    entries: BTreeMap<SampleId, usize>,
}

impl LabelTable {
    /// Builds a table from `(id, class name)` pairs. The class list is the
    /// sorted set of names seen.
    pub fn from_named<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, String)>,
    {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let classes: Vec<String> = pairs
            .iter()
            .map(|(_, c)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_classes(classes, pairs)
    }

    /// Like [`from_named`](Self::from_named) but against a fixed class list,
    /// which must be sorted and unique.
    pub fn with_classes<I>(classes: Vec<String>, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, String)>,
    {
        check_sorted_unique(&classes, "class list")?;
        let mut entries = BTreeMap::new();
        for (id, name) in pairs {
            let idx = classes
                .binary_search(&name)
                .map_err(|_| Error::InvalidParameter(format!("unknown class {name:?}")))?;
            if entries.insert(id.clone(), idx).is_some() {
                return Err(Error::DuplicateSample(id.to_string()));
            }
        }
        Ok(LabelTable { classes, entries })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, id: &SampleId) -> Option<usize> {
        self.entries.get(id).copied()
    }

    pub fn class_name(&self, idx: usize) -> &str {
        &self.classes[idx]
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(name)).ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, usize)> {
        self.entries.iter().map(|(id, c)| (id, *c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Re-indexes onto a (sorted) superset class list.
    pub fn reindex(&self, classes: &[String]) -> Result<Self> {
        let pairs = self
            .entries
            .iter()
            .map(|(id, &c)| (id.clone(), self.classes[c].clone()));
        Self::with_classes(classes.to_vec(), pairs)
    }
}

/// Detected objects per sample over a sorted vocabulary. Each sample's list
/// is kept sorted by object index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AnnotationTable {
    vocabulary: Vec<String>,
    entries: BTreeMap<SampleId, Vec<ScoredObject>>,
}

impl AnnotationTable {
    pub fn from_named<I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Vec<(String, f64)>)>,
    {
        let samples: Vec<_> = samples.into_iter().collect();
        let vocabulary: Vec<String> = samples
            .iter()
            .flat_map(|(_, objs)| objs.iter().map(|(n, _)| n.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_vocabulary(vocabulary, samples)
    }

    pub fn with_vocabulary<I>(vocabulary: Vec<String>, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Vec<(String, f64)>)>,
    {
        check_sorted_unique(&vocabulary, "vocabulary")?;
        let mut entries = BTreeMap::new();
        for (line, (id, objs)) in samples.into_iter().enumerate() {
            let mut list = Vec::with_capacity(objs.len());
            for (name, score) in objs {
                if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
                    return Err(Error::ScoreOutOfRange {
                        line: line + 1,
                        score,
                    });
                }
                let idx = vocabulary
                    .binary_search(&name)
                    .map_err(|_| Error::InvalidParameter(format!("unknown object {name:?}")))?;
                list.push((idx, score));
            }
            list.sort_by_key(|&(k, _)| k);
            if list.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::parse(
                    line + 1,
                    format!("duplicate object for sample {id}"),
                ));
            }
            if entries.insert(id.clone(), list).is_some() {
                return Err(Error::DuplicateSample(id.to_string()));
            }
        }
        Ok(AnnotationTable {
            vocabulary,
            entries,
        })
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn get(&self, id: &SampleId) -> Option<&[ScoredObject]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &SampleId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, &[ScoredObject])> {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.vocabulary
            .binary_search_by(|v| v.as_str().cmp(name))
            .ok()
    }

    /// Re-indexes onto a sorted superset vocabulary.
    pub fn reindex(&self, vocabulary: &[String]) -> Result<Self> {
        let samples = self.entries.iter().map(|(id, objs)| {
            (
                id.clone(),
                objs.iter()
                    .map(|&(k, s)| (self.vocabulary[k].clone(), s))
                    .collect(),
            )
        });
        Self::with_vocabulary(vocabulary.to_vec(), samples)
    }
}

/// Sorted union of several vocabularies or class lists.
pub fn union_vocabulary<'a, I>(lists: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a [String]>,
{
    lists
        .into_iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Per-sample class probabilities from an externally trained classifier.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ProbTable {
    classes: Vec<String>,
    entries: BTreeMap<SampleId, Vec<f64>>,
}

impl ProbTable {
    /// `classes` may come in any order; columns are permuted so the stored
    /// class list is sorted.
    pub fn new<I>(classes: Vec<String>, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (SampleId, Vec<f64>)>,
    {
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| classes[a].cmp(&classes[b]));
        let sorted: Vec<String> = order.iter().map(|&i| classes[i].clone()).collect();
        check_sorted_unique(&sorted, "class list")?;
        let mut entries = BTreeMap::new();
        for (line, (id, row)) in rows.into_iter().enumerate() {
            if row.len() != classes.len() {
                return Err(Error::parse(
                    line + 1,
                    format!("expected {} probabilities, found {}", classes.len(), row.len()),
                ));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::parse(line + 1, "probabilities must be finite and >= 0"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(Error::parse(
                    line + 1,
                    format!("probabilities sum to {sum}, expected 1"),
                ));
            }
            let permuted = order.iter().map(|&i| row[i]).collect();
            if entries.insert(id.clone(), permuted).is_some() {
                return Err(Error::DuplicateSample(id.to_string()));
            }
        }
        Ok(ProbTable { classes: sorted, entries })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn get(&self, id: &SampleId) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SampleId, &[f64])> {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_sorted_unique(names: &[String], what: &str) -> Result<()> {
    if names.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "{what} must be sorted and free of duplicates"
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    name: String,
    score: f64,
}

/// Reads JSONL annotations: `{"id": .., "objects": [{"name": .., "score": ..}]}`.
/// Blank lines are ignored.
pub fn load_annotations(path: &Path) -> Result<AnnotationTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(line_no, e.to_string()))?;
        let id = SampleId::new(rec.id).map_err(|e| Error::parse(line_no, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSample(id.to_string()));
        }
        let mut names = BTreeSet::new();
        let mut objs = Vec::with_capacity(rec.objects.len());
        for o in rec.objects {
            if !(o.score.is_finite() && (0.0..=1.0).contains(&o.score)) {
                return Err(Error::ScoreOutOfRange {
                    line: line_no,
                    score: o.score,
                });
            }
            if !names.insert(o.name.clone()) {
                return Err(Error::parse(line_no, format!("object {:?} listed twice", o.name)));
            }
            objs.push((o.name, o.score));
        }
        samples.push((id, objs));
    }
    AnnotationTable::from_named(samples)
}

/// Writes JSONL in id order with objects in vocabulary order.
pub fn save_annotations(path: &Path, table: &AnnotationTable) -> Result<()> {
    let mut out = String::new();
    for (id, objs) in table.iter() {
        let line = AnnotationLine {
            id: id.to_string(),
            objects: objs
                .iter()
                .map(|&(k, score)| ObjectRecord {
                    name: table.vocabulary[k].clone(),
                    score,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn record_line(rec: &csv::StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

/// Reads a CSV with header `id,label`.
pub fn load_labels(path: &Path) -> Result<LabelTable> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::parse(1, "expected header `id,label`"));
    }
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        if rec.len() != 2 {
            return Err(Error::parse(line, "expected 2 fields"));
        }
        let id = SampleId::new(&rec[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        if rec[1].is_empty() {
            return Err(Error::parse(line, "empty label"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSample(id.to_string()));
        }
        pairs.push((id, rec[1].to_string()));
    }
    LabelTable::from_named(pairs)
}

pub fn save_labels(path: &Path, table: &LabelTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "label"])?;
    for (id, c) in table.iter() {
        w.write_record([id.as_str(), table.class_name(c)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV with header `id,<class0>,<class1>,...`. Each row must be a
/// probability vector (entries >= 0 summing to 1 within 1e-5).
pub fn load_probs(path: &Path) -> Result<ProbTable> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "id" {
        return Err(Error::parse(1, "expected header `id,<class0>,...`"));
    }
    let classes: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if classes.iter().collect::<BTreeSet<_>>().len() != classes.len() {
        return Err(Error::parse(1, "duplicate class column"));
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(i + 2, e.to_string()))?;
        let line = record_line(&rec, i + 2);
        let id = SampleId::new(&rec[0]).map_err(|e| Error::parse(line, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSample(id.to_string()));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(line, e.to_string()))?;
        if row.len() != classes.len() {
            return Err(Error::parse(line, "wrong number of columns"));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::parse(line, "probabilities must be finite and >= 0"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::parse(line, format!("probabilities sum to {sum}")));
        }
        rows.push((id, row));
    }
    ProbTable::new(classes, rows)
}

pub fn save_probs(path: &Path, table: &ProbTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(table.classes.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in table.iter() {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|p| format!("{p:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sid(s: &str) -> SampleId {
        SampleId::new(s).unwrap()
    }

    #[test]
    fn single_annotation_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, r#"{"id":"a","objects":[{"name":"water","score":0.9}]}"#).unwrap();
        let t = load_annotations(&p).unwrap();
        assert_eq!(t.vocabulary(), ["water".to_string()]);
        assert_eq!(t.get(&sid("a")).unwrap(), &[(0, 0.9)]);
    }

    #[test]
    fn duplicate_annotation_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"objects\":[]}\n{\"id\":\"a\",\"objects\":[]}\n",
        )
        .unwrap();
        assert!(matches!(load_annotations(&p), Err(Error::DuplicateSample(id)) if id == "a"));
    }

    #[test]
    fn annotation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"objects\":[{\"name\":\"x\",\"score\":1.5}]}\n").unwrap();
        assert!(matches!(
            load_annotations(&p),
            Err(Error::ScoreOutOfRange { line: 1, .. })
        ));
        fs::write(&p, "{\"id\":\"a\",\"objects\":[]}\nnot json\n").unwrap();
        assert!(matches!(load_annotations(&p), Err(Error::ParseError { line: 2, .. })));
        fs::write(
            &p,
            "{\"id\":\"a\",\"objects\":[{\"name\":\"x\",\"score\":0.5},{\"name\":\"x\",\"score\":0.6}]}\n",
        )
        .unwrap();
        assert!(matches!(load_annotations(&p), Err(Error::ParseError { line: 1, .. })));
    }

    #[test]
    fn vocabulary_is_independent_of_line_order() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("1.jsonl");
        let p2 = dir.path().join("2.jsonl");
        let a = r#"{"id":"a","objects":[{"name":"zebra","score":0.5},{"name":"apple","score":0.4}]}"#;
        let b = r#"{"id":"b","objects":[{"name":"mango","score":0.3}]}"#;
        fs::write(&p1, format!("{a}\n{b}\n")).unwrap();
        fs::write(&p2, format!("{b}\n{a}\n")).unwrap();
        let t1 = load_annotations(&p1).unwrap();
        let t2 = load_annotations(&p2).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.vocabulary(), ["apple", "mango", "zebra"]);
    }

    #[test]
    fn probability_row_must_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        fs::write(&p, "id,cat,dog\na,0.5,0.3\n").unwrap();
        assert!(matches!(load_probs(&p), Err(Error::ParseError { line: 2, .. })));
        fs::write(&p, "id,dog,cat\na,0.1,0.9\n").unwrap();
        let t = load_probs(&p).unwrap();
        assert_eq!(t.classes(), ["cat", "dog"]);
        assert_eq!(t.get(&sid("a")).unwrap(), &[0.9, 0.1]);
    }

    #[test]
    fn labels_header_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        fs::write(&p, "id,class\na,x\n").unwrap();
        assert!(matches!(load_labels(&p), Err(Error::ParseError { line: 1, .. })));
        fs::write(&p, "id,label\na,x\na,y\n").unwrap();
        assert!(matches!(load_labels(&p), Err(Error::DuplicateSample(_))));
        fs::write(&p, "id,label\nb,swan\na,dog\n").unwrap();
        let t = load_labels(&p).unwrap();
        assert_eq!(t.classes(), ["dog", "swan"]);
        assert_eq!(t.get(&sid("b")), Some(1));
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelTable::from_named(vec![
            (sid("a"), "swan".to_string()),
            (sid("b,quoted"), "dog".to_string()),
        ])
        .unwrap();
        let lp = dir.path().join("l.csv");
        save_labels(&lp, &labels).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), labels);

        let ann = AnnotationTable::from_named(vec![
            (sid("a"), vec![("water".into(), 0.9), ("sky".into(), 0.123456789)]),
            (sid("b"), vec![]),
        ])
        .unwrap();
        let ap = dir.path().join("a.jsonl");
        save_annotations(&ap, &ann).unwrap();
        assert_eq!(load_annotations(&ap).unwrap(), ann);

        let probs = ProbTable::new(
            vec!["b".into(), "a".into()],
            vec![(sid("x"), vec![0.1, 0.9]), (sid("y"), vec![1.0 / 3.0, 2.0 / 3.0])],
        )
        .unwrap();
        let pp = dir.path().join("p.csv");
        save_probs(&pp, &probs).unwrap();
        assert_eq!(load_probs(&pp).unwrap(), probs);
    }

    #[test]
    fn reindex_onto_superset() {
        let ann = AnnotationTable::from_named(vec![(sid("a"), vec![("water".into(), 0.9)])]).unwrap();
        let vocab = union_vocabulary([ann.vocabulary(), &["grass".to_string()][..]]);
        let re = ann.reindex(&vocab).unwrap();
        assert_eq!(re.vocabulary(), ["grass", "water"]);
        assert_eq!(re.get(&sid("a")).unwrap(), &[(1, 0.9)]);
    }
}
