//! Vision-language test: predict a training image's objects from its caption
//! by looking up the caption's nearest public neighbors, once with the target
//! model and once with a text-only reference, then compare.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{union_vocabulary, AnnotationTable, EmbeddingMatrix, SampleId};
use crate::error::{Error, Result};
use crate::knn::{KnnIndex, NeighborList};
use crate::report::{format_sig17, Meta};

pub type ObjectSet = BTreeSet<usize>;

/// Number of public samples containing each vocabulary object.
pub fn object_frequencies(public: &AnnotationTable) -> Vec<usize> {
    let mut freq = vec![0usize; public.vocabulary().len()];
    for (_, objs) in public.iter() {
        for &(o, _) in objs {
            freq[o] += 1;
        }
    }
    freq
}

/// Union of the neighbors' object sets. With `top_k_objects` only the best
/// objects survive, ranked by neighbor count, then public frequency, then
/// name.
pub fn objects_from_neighbors<'a>(
    neighbors: impl IntoIterator<Item = &'a SampleId>,
    public: &AnnotationTable,
    freq: &[usize],
    top_k_objects: Option<usize>,
) -> Result<ObjectSet> {
    let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
    for id in neighbors {
        let objs = public
            .get(id)
            .ok_or_else(|| Error::MissingAnnotation(id.to_string()))?;
        for &(o, _) in objs {
            *votes.entry(o).or_default() += 1;
        }
    }
    let Some(top) = top_k_objects else {
        return Ok(votes.into_keys().collect());
    };
    let mut ranked: Vec<(usize, usize)> = votes.into_iter().collect();
    // vocabulary is sorted, so index order is name order
    ranked.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| freq[b.0].cmp(&freq[a.0]))
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(ranked.into_iter().take(top).map(|(o, _)| o).collect())
}

/// Object prediction for one caption embedding.
pub fn predict_objects(
    index: &KnnIndex,
    q: &[f32],
    k: usize,
    public_objects: &AnnotationTable,
    top_k_objects: Option<usize>,
) -> Result<ObjectSet> {
    let nbrs = index.query(q, k)?;
    let freq = object_frequencies(public_objects);
    objects_from_neighbors(nbrs.ids(), public_objects, &freq, top_k_objects)
}

/// `|pred ∩ truth| / |pred|`, 0 for an empty prediction.
pub fn precision(pred: &ObjectSet, truth: &ObjectSet) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.intersection(truth).count() as f64 / pred.len() as f64
}

/// `|pred ∩ truth| / |truth|`.
pub fn recall(pred: &ObjectSet, truth: &ObjectSet) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptyTruth);
    }
    Ok(pred.intersection(truth).count() as f64 / truth.len() as f64)
}

/// Signed fraction of `(target, reference)` pairs where the target is
/// strictly better. Ties count for neither side.
pub fn population_gap(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (mut wins, mut losses) = (0i64, 0i64);
    for &(t, r) in pairs {
        if t > r {
            wins += 1;
        } else if t < r {
            losses += 1;
        }
    }
    Ok((wins - losses) as f64 / pairs.len() as f64)
}

/// Population precision gap over `(prec_target, prec_ref)` pairs.
pub fn ppg(pairs: &[(f64, f64)]) -> Result<f64> {
    population_gap(pairs)
}

/// Population recall gap over `(rec_target, rec_ref)` pairs.
pub fn prg(pairs: &[(f64, f64)]) -> Result<f64> {
    population_gap(pairs)
}

/// Area between the empirical recall CDFs, `∫₀¹ CDF_ref − CDF_target`.
/// Integrated piecewise over the merged sample points.
pub fn aucg(target: &[f64], reference: &[f64]) -> Result<f64> {
    if target.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &v in target.iter().chain(reference) {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParameter(format!("recall {v} outside [0, 1]")));
        }
    }
    let mut t = target.to_vec();
    let mut r = reference.to_vec();
    t.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    let mut points: Vec<f64> = t.iter().chain(&r).copied().chain([0.0, 1.0]).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();

    let (nt, nr) = (t.len() as f64, r.len() as f64);
    let (mut it, mut ir) = (0usize, 0usize);
    let mut area = 0.0;
    for w in points.windows(2) {
        // right-continuous CDFs are constant on [w[0], w[1])
        while it < t.len() && t[it] <= w[0] {
            it += 1;
        }
        while ir < r.len() && r[ir] <= w[0] {
            ir += 1;
        }
        area += (w[1] - w[0]) * (ir as f64 / nr - it as f64 / nt);
    }
    Ok(area)
}

/// Mean per-sample Jaccard index of two correct-object maps; two empty sets
/// count as identical.
pub fn jaccard_agreement(
    a: &BTreeMap<SampleId, ObjectSet>,
    b: &BTreeMap<SampleId, ObjectSet>,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::IdSetMismatch);
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = a
        .values()
        .zip(b.values())
        .map(|(x, y)| {
            let union = x.union(y).count();
            if union == 0 {
                1.0
            } else {
                x.intersection(y).count() as f64 / union as f64
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// One evaluated caption with both models' predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmSample {
    pub id: SampleId,
    pub truth: ObjectSet,
    pub pred_target: ObjectSet,
    pub pred_ref: ObjectSet,
}

impl VlmSample {
    pub fn prec_target(&self) -> f64 {
        precision(&self.pred_target, &self.truth)
    }

    pub fn prec_ref(&self) -> f64 {
        precision(&self.pred_ref, &self.truth)
    }

    pub fn rec_target(&self) -> Result<f64> {
        recall(&self.pred_target, &self.truth)
    }

    pub fn rec_ref(&self) -> Result<f64> {
        recall(&self.pred_ref, &self.truth)
    }

    pub fn correct_target(&self) -> ObjectSet {
        self.pred_target.intersection(&self.truth).copied().collect()
    }

    pub fn correct_ref(&self) -> ObjectSet {
        self.pred_ref.intersection(&self.truth).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapEntry {
    pub id: SampleId,
    pub prec_gap: f64,
    pub rec_gap: f64,
}

/// Samples ordered from most to least memorized: recall gap descending,
/// then precision gap descending, then id.
pub fn gap_ranking(samples: &[VlmSample]) -> Result<Vec<GapEntry>> {
    let mut out = samples
        .iter()
        .map(|s| {
            Ok(GapEntry {
                id: s.id.clone(),
                prec_gap: s.prec_target() - s.prec_ref(),
                rec_gap: s.rec_target()? - s.rec_ref()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.rec_gap
            .total_cmp(&a.rec_gap)
            .then_with(|| b.prec_gap.total_cmp(&a.prec_gap))
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    /// Caption against public images.
    T2i,
    /// Caption against public captions.
    T2t,
}

/// Everything the VLM test consumes, already loaded. Only the target's
/// public side depends on the search mode.
pub struct VlmInputs {
    pub target_captions: EmbeddingMatrix,
    pub target_public: EmbeddingMatrix,
    pub ref_captions: EmbeddingMatrix,
    pub ref_public: EmbeddingMatrix,
    pub train_objects: AnnotationTable,
    pub public_objects: AnnotationTable,
}

#[derive(Clone, Debug, Serialize)]
pub struct VlmOptions {
    pub mode: SearchMode,
    pub k: usize,
    pub top_k_objects: Option<usize>,
    /// Extra neighbor counts and object caps evaluated as a grid.
    pub grid_k: Vec<usize>,
    pub grid_top_k: Vec<Option<usize>>,
}

impl Default for VlmOptions {
    fn default() -> Self {
        VlmOptions {
            mode: SearchMode::T2i,
            k: 10,
            top_k_objects: None,
            grid_k: Vec::new(),
            grid_top_k: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VlmPerSample {
    pub id: SampleId,
    pub truth: Vec<String>,
    pub pred_target: Vec<String>,
    pub pred_ref: Vec<String>,
    pub prec_target: f64,
    pub rec_target: f64,
    pub prec_ref: f64,
    pub rec_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub k: usize,
    pub top_k_objects: Option<usize>,
    pub ppg: f64,
    pub prg: f64,
    pub aucg: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub ppg: f64,
    pub prg: f64,
    pub aucg: f64,
    pub jaccard: f64,
}

/// All aggregate metrics over samples with nonempty ground truth.
pub fn metrics(samples: &[VlmSample]) -> Result<Metrics> {
    let prec: Vec<(f64, f64)> = samples.iter().map(|s| (s.prec_target(), s.prec_ref())).collect();
    let rec = samples
        .iter()
        .map(|s| Ok((s.rec_target()?, s.rec_ref()?)))
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let rt: Vec<f64> = rec.iter().map(|p| p.0).collect();
    let rr: Vec<f64> = rec.iter().map(|p| p.1).collect();
    let ca = samples.iter().map(|s| (s.id.clone(), s.correct_target())).collect();
    let cb = samples.iter().map(|s| (s.id.clone(), s.correct_ref())).collect();
    Ok(Metrics {
        ppg: ppg(&prec)?,
        prg: prg(&rec)?,
        aucg: aucg(&rt, &rr)?,
        jaccard: jaccard_agreement(&ca, &cb)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VlmReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
    pub mode: SearchMode,
    pub k: usize,
    pub top_k_objects: Option<usize>,
    pub n_evaluated: usize,
    pub excluded_empty_truth: usize,
    pub ppg: f64,
    pub prg: f64,
    pub aucg: f64,
    pub jaccard: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<GridCell>,
    pub per_sample: Vec<VlmPerSample>,
    pub gap_ranking: Vec<GapEntry>,
    #[serde(skip)]
    pub samples: Vec<VlmSample>,
    #[serde(skip)]
    pub grid_k: Vec<usize>,
    #[serde(skip)]
    pub grid_top_k: Vec<Option<usize>>,
}

struct Searched {
    ids: Vec<SampleId>,
    truths: Vec<ObjectSet>,
    target: Vec<NeighborList>,
    reference: Vec<NeighborList>,
    excluded: usize,
}

fn unit_rows(m: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.is_normalized() {
        Ok(m)
    } else {
        m.normalize_rows()
    }
}

fn search(inputs: &VlmInputs, train: &AnnotationTable, max_k: usize) -> Result<Searched> {
    let mut ids: Vec<SampleId> = inputs.target_captions.ids().to_vec();
    ids.sort();
    let mut kept = Vec::with_capacity(ids.len());
    let mut truths = Vec::with_capacity(ids.len());
    let mut excluded = 0;
    for id in ids {
        let objs = train
            .get(&id)
            .ok_or_else(|| Error::MissingAnnotation(id.to_string()))?;
        if objs.is_empty() {
            excluded += 1;
            continue;
        }
        truths.push(objs.iter().map(|&(o, _)| o).collect());
        kept.push(id);
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }

    let t_index = KnnIndex::new(&unit_rows(inputs.target_public.clone())?)?;
    let t_queries = unit_rows(inputs.target_captions.select(&kept)?)?;
    let target = t_index.query_matrix(&t_queries, max_k)?;

    let r_index = KnnIndex::new(&unit_rows(inputs.ref_public.clone())?)?;
    let r_queries = unit_rows(inputs.ref_captions.select(&kept).map_err(|e| match e {
        Error::MissingSample(_) => Error::MissingInput("a reference caption embedding for every sample"),
        other => other,
    })?)?;
    let reference = r_index.query_matrix(&r_queries, max_k)?;

    Ok(Searched {
        ids: kept,
        truths,
        target,
        reference,
        excluded,
    })
}

fn predict_all(
    s: &Searched,
    public: &AnnotationTable,
    freq: &[usize],
    k: usize,
    top_k_objects: Option<usize>,
) -> Result<Vec<VlmSample>> {
    (0..s.ids.len())
        .into_par_iter()
        .map(|i| {
            let t = s.target[i].iter().take(k).map(|n| &n.id);
            let r = s.reference[i].iter().take(k).map(|n| &n.id);
            Ok(VlmSample {
                id: s.ids[i].clone(),
                truth: s.truths[i].clone(),
                pred_target: objects_from_neighbors(t, public, freq, top_k_objects)?,
                pred_ref: objects_from_neighbors(r, public, freq, top_k_objects)?,
            })
        })
        .collect()
}

pub fn run_vlm_test(inputs: &VlmInputs, opts: &VlmOptions) -> Result<VlmReport> {
    if opts.k == 0 || opts.grid_k.contains(&0) {
        return Err(Error::ZeroNeighbors);
    }
    let vocabulary = union_vocabulary([
        inputs.train_objects.vocabulary(),
        inputs.public_objects.vocabulary(),
    ]);
    let train = inputs.train_objects.reindex(&vocabulary)?;
    let public = inputs.public_objects.reindex(&vocabulary)?;
    let freq = object_frequencies(&public);

    let max_k = opts.grid_k.iter().copied().chain([opts.k]).max().unwrap_or(opts.k);
    let searched = search(inputs, &train, max_k)?;

    let samples = predict_all(&searched, &public, &freq, opts.k, opts.top_k_objects)?;
    let m = metrics(&samples)?;

    let mut grid = Vec::new();
    for &k in &opts.grid_k {
        for &top in &opts.grid_top_k {
            let cell = predict_all(&searched, &public, &freq, k, top)?;
            let gm = metrics(&cell)?;
            grid.push(GridCell {
                k,
                top_k_objects: top,
                ppg: gm.ppg,
                prg: gm.prg,
                aucg: gm.aucg,
                jaccard: gm.jaccard,
            });
        }
    }

    let names = |set: &ObjectSet| -> Vec<String> { set.iter().map(|&o| vocabulary[o].clone()).collect() };
    let per_sample = samples
        .iter()
        .map(|s| {
            Ok(VlmPerSample {
                id: s.id.clone(),
                truth: names(&s.truth),
                pred_target: names(&s.pred_target),
                pred_ref: names(&s.pred_ref),
                prec_target: s.prec_target(),
                rec_target: s.rec_target()?,
                prec_ref: s.prec_ref(),
                rec_ref: s.rec_ref()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(VlmReport {
        meta: None,
        mode: opts.mode,
        k: opts.k,
        top_k_objects: opts.top_k_objects,
        n_evaluated: samples.len(),
        excluded_empty_truth: searched.excluded,
        ppg: m.ppg,
        prg: m.prg,
        aucg: m.aucg,
        jaccard: m.jaccard,
        grid,
        per_sample,
        gap_ranking: gap_ranking(&samples)?,
        samples,
        grid_k: opts.grid_k.clone(),
        grid_top_k: opts.grid_top_k.clone(),
    })
}

/// Grid metric as a CSV matrix: one row per neighbor count, one column per
/// object cap (`all` when uncapped).
pub fn write_grid_csv(
    path: &Path,
    report: &VlmReport,
    value: impl Fn(&GridCell) -> f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string()];
    header.extend(report.grid_top_k.iter().map(|t| match t {
        Some(n) => format!("top{n}"),
        None => "all".to_string(),
    }));
    w.write_record(&header)?;
    for (row, &k) in report.grid_k.iter().enumerate() {
        let n = report.grid_top_k.len();
        let mut rec = vec![k.to_string()];
        rec.extend(report.grid[row * n..(row + 1) * n].iter().map(|c| format_sig17(value(c))));
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

    fn set(v: &[usize]) -> ObjectSet {
        v.iter().copied().collect()
    }

    fn public() -> AnnotationTable {
        AnnotationTable::from_named(vec![
            (sid("n1"), vec![("cat".to_string(), 0.9)]),
            (sid("n2"), vec![("cat".to_string(), 0.8), ("sofa".to_string(), 0.5)]),
            (sid("n3"), vec![]),
        ])
        .unwrap()
    }

    #[test]
    fn union_and_top_k() {
        let p = public();
        let freq = object_frequencies(&p);
        let cat = p.object_index("cat").unwrap();
        let sofa = p.object_index("sofa").unwrap();
        let nb = [sid("n1"), sid("n2")];
        assert_eq!(objects_from_neighbors(&nb, &p, &freq, None).unwrap(), set(&[cat, sofa]));
        assert_eq!(objects_from_neighbors(&nb, &p, &freq, Some(1)).unwrap(), set(&[cat]));
        assert!(objects_from_neighbors(&[sid("n3")], &p, &freq, None).unwrap().is_empty());
        assert!(matches!(
            objects_from_neighbors(&[sid("zz")], &p, &freq, None),
            Err(Error::MissingAnnotation(_))
        ));
    }

    #[test]
    fn top_k_ties_fall_back_to_frequency_then_name() {
        let p = AnnotationTable::from_named(vec![
            (sid("a"), vec![("x".to_string(), 0.5), ("y".to_string(), 0.5), ("z".to_string(), 0.5)]),
            (sid("b"), vec![("z".to_string(), 0.5)]),
        ])
        .unwrap();
        let freq = object_frequencies(&p);
        let z = p.object_index("z").unwrap();
        let x = p.object_index("x").unwrap();
        // one neighbor: all three tie on count; z wins on frequency, x on name
        let got = objects_from_neighbors(&[sid("a")], &p, &freq, Some(2)).unwrap();
        assert_eq!(got, set(&[x, z]));
    }

    #[test]
    fn predict_objects_through_index() {
        let p = public();
        let emb = EmbeddingMatrix::from_rows(
            vec![sid("n1"), sid("n2"), sid("n3")],
            &[vec![1.0, 0.0], vec![0.8, 0.6], vec![0.0, 1.0]],
        )
        .unwrap()
        .normalize_rows()
        .unwrap();
        let index = KnnIndex::new(&emb).unwrap();
        let got = predict_objects(&index, &[1.0, 0.0], 2, &p, None).unwrap();
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn precision_recall_cases() {
        let pred = set(&[0, 1, 2]);
        let truth = set(&[1, 2, 3, 4]);
        assert!((precision(&pred, &truth) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall(&pred, &truth).unwrap(), 0.5);
        assert_eq!(precision(&truth, &truth), 1.0);
        assert_eq!(recall(&truth, &truth).unwrap(), 1.0);
        assert_eq!(precision(&set(&[]), &truth), 0.0);
        assert_eq!(recall(&set(&[]), &truth).unwrap(), 0.0);
        assert!(matches!(recall(&pred, &set(&[])), Err(Error::EmptyTruth)));
    }

    #[test]
    fn gaps() {
        assert_eq!(ppg(&[(0.5, 0.3), (0.2, 0.4), (0.9, 0.9)]).unwrap(), 0.0);
        assert_eq!(prg(&[(0.4, 0.4), (0.1, 0.1)]).unwrap(), 0.0);
        assert_eq!(ppg(&[(0.5, 0.3), (0.2, 0.1)]).unwrap(), 1.0);
        assert!(matches!(ppg(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn aucg_cases() {
        assert_eq!(aucg(&[0.2, 0.7], &[0.2, 0.7]).unwrap(), 0.0);
        assert_eq!(aucg(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!((aucg(&[0.5, 0.5], &[0.25, 0.25]).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(aucg(&[], &[0.1]), Err(Error::EmptyInput)));
        assert!(aucg(&[1.5], &[0.1]).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let m = |v: Vec<ObjectSet>| -> BTreeMap<SampleId, ObjectSet> {
            v.into_iter().enumerate().map(|(i, s)| (sid(&format!("s{i}")), s)).collect()
        };
        let a = m(vec![set(&[0, 1]), set(&[])]);
        assert_eq!(jaccard_agreement(&a, &a).unwrap(), 1.0);
        let x = m(vec![set(&[0, 1])]);
        let y = m(vec![set(&[1, 2])]);
        assert!((jaccard_agreement(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let z = m(vec![set(&[5])]);
        assert_eq!(jaccard_agreement(&x, &z).unwrap(), 0.0);
        assert!(matches!(jaccard_agreement(&a, &x), Err(Error::IdSetMismatch)));
    }

    #[test]
    fn ranking_order() {
        let s = |id: &str, t: &[usize], r: &[usize]| VlmSample {
            id: sid(id),
            truth: set(&[0, 1, 2, 3]),
            pred_target: set(t),
            pred_ref: set(r),
        };
        // a: rec gap 0.25; b: rec gap 0.75
        let samples = vec![s("a", &[0, 1], &[0]), s("b", &[0, 1, 2], &[9])];
        let ranked = gap_ranking(&samples).unwrap();
        let order: Vec<&str> = ranked.iter().map(|g| g.id.as_str()).collect();
        assert_eq!(order, ["b", "a"]);
        let same = vec![s("z", &[0], &[0]), s("y", &[1], &[1])];
        let g = gap_ranking(&same).unwrap();
        assert_eq!(g.iter().map(|g| g.id.as_str()).collect::<Vec<_>>(), ["y", "z"]);
        assert!(g.iter().all(|g| g.prec_gap == 0.0 && g.rec_gap == 0.0));
        assert_eq!(gap_ranking(&same[..1]).unwrap().len(), 1);
    }
}
