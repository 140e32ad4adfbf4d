//! Image-representation test: the target model's KNN label attack on
//! background-crop embeddings against a correlation-only reference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::datamodel::{union_vocabulary, EmbeddingMatrix, LabelTable, SampleId};
use crate::error::{Error, Result};
use crate::knn::{self, entropy, KnnIndex, LabelDistribution};
use crate::reference::{align_distribution, ReferencePredictor};
use crate::report::{percent_key, Meta};

/// One evaluated training sample. Both distributions share a class list.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionSample {
    pub id: SampleId,
    pub true_label: usize,
    pub target: LabelDistribution,
    pub reference: Vec<f64>,
}

impl VisionSample {
    pub fn target_pred(&self) -> usize {
        knn::argmax(&self.target.probs)
    }

    pub fn ref_pred(&self) -> usize {
        knn::argmax(&self.reference)
    }

    pub fn correct_target(&self) -> u8 {
        acc_f(self.target_pred(), self.true_label)
    }

    pub fn correct_ref(&self) -> u8 {
        acc_f(self.ref_pred(), self.true_label)
    }

    /// `-entropy` of the target vote.
    pub fn target_confidence(&self) -> Result<f64> {
        Ok(-entropy(&self.target.probs)?)
    }
}

/// 1 when the predicted foreground class is the true one.
pub fn acc_f(pred: usize, truth: usize) -> u8 {
    u8::from(pred == truth)
}

/// `(acc_target, acc_ref)` over `samples`.
pub fn accuracies(samples: &[VisionSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = samples.len() as f64;
    let t: u64 = samples.iter().map(|s| u64::from(s.correct_target())).sum();
    let r: u64 = samples.iter().map(|s| u64::from(s.correct_ref())).sum();
    Ok((t as f64 / n, r as f64 / n))
}

pub fn dejavu_score(samples: &[VisionSample]) -> Result<f64> {
    let (t, r) = accuracies(samples)?;
    Ok(t - r)
}

/// The `ceil(p n / 100)` samples with the most confident target vote, ties
/// by id ascending. Independent of input order.
pub fn most_confident(samples: &[VisionSample], p: f64) -> Result<Vec<&VisionSample>> {
    check_percent(p)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ranked = samples
        .iter()
        .map(|s| Ok((s.target_confidence()?, s)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let m = top_count(samples.len(), p);
    Ok(ranked.into_iter().take(m).map(|(_, s)| s).collect())
}

/// Déjà vu score on the top `p` percent by target confidence; both
/// accuracies are computed on that same subset.
pub fn dejavu_score_at_p(samples: &[VisionSample], p: f64) -> Result<f64> {
    let subset: Vec<VisionSample> = most_confident(samples, p)?.into_iter().cloned().collect();
    dejavu_score(&subset)
}

pub(crate) fn check_percent(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidParameter(format!("percent must be in (0, 100], got {p}")));
    }
    Ok(())
}

pub(crate) fn top_count(n: usize, p: f64) -> usize {
    ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n)
}

/// Memorization confidence: reference entropy minus target-vote entropy.
pub fn mem_conf(sample: &VisionSample) -> Result<f64> {
    Ok(entropy(&sample.reference)? - entropy(&sample.target.probs)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistFilter {
    All,
    /// Target attack correct, reference wrong.
    TargetCorrectRefWrong,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]` of the values; the maximum lands in
/// the last bin. A degenerate range is widened to `[v - 0.5, v + 0.5]`.
pub fn histogram(values: &[f64], bins: usize) -> Result<Vec<HistBin>> {
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be >= 1".into()));
    }
    if values.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistBin {
            bin_low: lo + width * i as f64,
            bin_high: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect())
}

pub fn memconf_histogram(
    samples: &[VisionSample],
    bins: usize,
    filter: HistFilter,
) -> Result<Vec<HistBin>> {
    let values = samples
        .iter()
        .filter(|s| match filter {
            HistFilter::All => true,
            HistFilter::TargetCorrectRefWrong => s.correct_target() == 1 && s.correct_ref() == 0,
        })
        .map(mem_conf)
        .collect::<Result<Vec<_>>>()?;
    histogram(&values, bins)
}

pub fn write_histogram_csv(path: &Path, bins: &[HistBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["bin_low", "bin_high", "count"])?;
    for b in bins {
        w.write_record([
            crate::report::format_sig17(b.bin_low),
            crate::report::format_sig17(b.bin_high),
            b.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

/// Reference-correct counts per true class (every class listed, in class
/// order) and the five largest, ties by class name ascending.
pub fn per_class_correct_counts(
    samples: &[VisionSample],
    classes: &[String],
) -> (Vec<ClassCount>, Vec<ClassCount>) {
    let mut counts = vec![0usize; classes.len()];
    for s in samples {
        if s.correct_ref() == 1 {
            counts[s.true_label] += 1;
        }
    }
    let all: Vec<ClassCount> = classes
        .iter()
        .zip(counts)
        .map(|(c, count)| ClassCount {
            class: c.clone(),
            count,
        })
        .collect();
    let mut top = all.clone();
    top.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.class.cmp(&b.class)));
    top.truncate(5);
    (all, top)
}

/// Fraction of samples on which two predictors output the same value.
pub fn agreement_fraction<T: PartialEq>(
    a: &BTreeMap<SampleId, T>,
    b: &BTreeMap<SampleId, T>,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::IdSetMismatch);
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let same = a.values().zip(b.values()).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Accuracy of `probe` on the samples every base predictor gets right. With
/// `restrict = Some((p, confidence))` the candidate ids are first cut to the
/// top `p` percent by probe confidence (ties by id ascending).
pub fn intersection_accuracy(
    base: &[BTreeMap<SampleId, bool>],
    probe: &BTreeMap<SampleId, bool>,
    restrict: Option<(f64, &BTreeMap<SampleId, f64>)>,
) -> Result<f64> {
    for b in base {
        if b.len() != probe.len() || b.keys().zip(probe.keys()).any(|(x, y)| x != y) {
            return Err(Error::IdSetMismatch);
        }
    }
    let candidates: BTreeSet<&SampleId> = match restrict {
        None => probe.keys().collect(),
        Some((p, conf)) => {
            check_percent(p)?;
            let mut ranked = probe
                .keys()
                .map(|id| {
                    conf.get(id)
                        .map(|c| (*c, id))
                        .ok_or_else(|| Error::MissingSample(id.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            let m = top_count(ranked.len().max(1), p);
            ranked.into_iter().take(m).map(|(_, id)| id).collect()
        }
    };
    let s: Vec<&SampleId> = candidates
        .into_iter()
        .filter(|id| base.iter().all(|b| b[*id]))
        .collect();
    if s.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    let hits = s.iter().filter(|id| probe[**id]).count();
    Ok(hits as f64 / s.len() as f64)
}

/// Everything the image test consumes, already loaded.
pub struct VisionInputs {
    /// Target-model embeddings of the evaluated samples' background crops.
    pub target: EmbeddingMatrix,
    /// Target-model embeddings of the labeled public (KNN) set.
    pub public: EmbeddingMatrix,
    pub public_labels: LabelTable,
    /// Foreground labels of the evaluated samples.
    pub eval_labels: LabelTable,
    pub reference: ReferencePredictor,
}

#[derive(Clone, Debug, Serialize)]
pub struct VisionOptions {
    pub k: usize,
    pub percents: Vec<f64>,
    pub hist_bins: usize,
    /// Compare correctness instead of top-1 predictions in the agreement block.
    pub agreement_by_correctness: bool,
}

impl Default for VisionOptions {
    fn default() -> Self {
        VisionOptions {
            k: 10,
            percents: vec![20.0, 100.0],
            hist_bins: 20,
            agreement_by_correctness: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerSample {
    pub id: SampleId,
    pub true_label: String,
    pub pred_target: String,
    pub pred_ref: String,
    pub correct_target: u8,
    pub correct_ref: u8,
    pub target_confidence: f64,
    pub ref_confidence: f64,
    pub mem_conf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Agreement {
    pub mode: &'static str,
    pub target_vs_reference: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VisionReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
    pub reference: String,
    pub k: usize,
    pub n_evaluated: usize,
    pub acc_target: f64,
    pub acc_ref: f64,
    pub dv_score: f64,
    pub dv_score_at: BTreeMap<String, f64>,
    pub per_class_counts: Vec<ClassCount>,
    pub per_class_top5: Vec<ClassCount>,
    pub agreement: Agreement,
    pub per_sample: Vec<PerSample>,
    #[serde(skip)]
    pub histogram_all: Vec<HistBin>,
    #[serde(skip)]
    pub histogram_target_correct_ref_wrong: Option<Vec<HistBin>>,
    #[serde(skip)]
    pub samples: Vec<VisionSample>,
}

/// Builds the per-sample records: target vote from the public-set KNN and
/// reference distribution, both on the union class list.
pub fn build_vision_samples(
    inputs: &VisionInputs,
    k: usize,
) -> Result<(Vec<VisionSample>, Vec<String>)> {
    let classes = union_vocabulary([
        inputs.public_labels.classes(),
        inputs.eval_labels.classes(),
        inputs.reference.classes(),
    ]);
    let public_labels = inputs.public_labels.reindex(&classes)?;
    let eval_labels = inputs.eval_labels.reindex(&classes)?;

    // evaluation runs in id order regardless of file order
    let mut ids: Vec<SampleId> = inputs.target.ids().to_vec();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let truth = ids
        .iter()
        .map(|id| {
            eval_labels
                .get(id)
                .ok_or_else(|| Error::MissingLabel(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let public = unit_rows(inputs.public.clone())?;
    let index = KnnIndex::new(&public)?;
    let queries = unit_rows(inputs.target.select(&ids)?)?;
    let neighbors = index.query_matrix(&queries, k)?;
    let targets = neighbors
        .par_iter()
        .map(|n| knn::vote(n, &public_labels))
        .collect::<Result<Vec<_>>>()?;

    let ref_classes = inputs.reference.classes().to_vec();
    let references = inputs
        .reference
        .distributions(&ids)?
        .into_par_iter()
        .map(|d| align_distribution(&d, &ref_classes, &classes))
        .collect::<Result<Vec<_>>>()?;

    let samples = ids
        .into_iter()
        .zip(truth)
        .zip(targets.into_iter().zip(references))
        .map(|((id, true_label), (target, reference))| VisionSample {
            id,
            true_label,
            target,
            reference,
        })
        .collect();
    Ok((samples, classes))
}

fn unit_rows(m: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.is_normalized() {
        Ok(m)
    } else {
        m.normalize_rows()
    }
}

pub fn run_vision_test(inputs: &VisionInputs, opts: &VisionOptions) -> Result<VisionReport> {
    if opts.k == 0 {
        return Err(Error::ZeroNeighbors);
    }
    for &p in &opts.percents {
        check_percent(p)?;
    }
    let (samples, classes) = build_vision_samples(inputs, opts.k)?;
    let (acc_target, acc_ref) = accuracies(&samples)?;

    let mut dv_score_at = BTreeMap::new();
    for &p in &opts.percents {
        dv_score_at.insert(percent_key(p), dejavu_score_at_p(&samples, p)?);
    }

    let per_sample = samples
        .iter()
        .map(|s| {
            Ok(PerSample {
                id: s.id.clone(),
                true_label: classes[s.true_label].clone(),
                pred_target: classes[s.target_pred()].clone(),
                pred_ref: classes[s.ref_pred()].clone(),
                correct_target: s.correct_target(),
                correct_ref: s.correct_ref(),
                target_confidence: s.target_confidence()?,
                ref_confidence: -entropy(&s.reference)?,
                mem_conf: mem_conf(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (per_class_counts, per_class_top5) = per_class_correct_counts(&samples, &classes);

    let agreement = if opts.agreement_by_correctness {
        let a = samples.iter().map(|s| (s.id.clone(), s.correct_target())).collect();
        let b = samples.iter().map(|s| (s.id.clone(), s.correct_ref())).collect();
        Agreement {
            mode: "correctness",
            target_vs_reference: agreement_fraction(&a, &b)?,
        }
    } else {
        let a = samples.iter().map(|s| (s.id.clone(), s.target_pred())).collect();
        let b = samples.iter().map(|s| (s.id.clone(), s.ref_pred())).collect();
        Agreement {
            mode: "prediction",
            target_vs_reference: agreement_fraction(&a, &b)?,
        }
    };

    let histogram_all = memconf_histogram(&samples, opts.hist_bins, HistFilter::All)?;
    let histogram_target_correct_ref_wrong =
        match memconf_histogram(&samples, opts.hist_bins, HistFilter::TargetCorrectRefWrong) {
            Ok(h) => Some(h),
            Err(Error::EmptyAfterFilter) => None,
            Err(e) => return Err(e),
        };

    Ok(VisionReport {
        meta: None,
        reference: inputs.reference.name().to_string(),
        k: opts.k,
        n_evaluated: samples.len(),
        acc_target,
        acc_ref,
        dv_score: acc_target - acc_ref,
        dv_score_at,
        per_class_counts,
        per_class_top5,
        agreement,
        per_sample,
        histogram_all,
        histogram_target_correct_ref_wrong,
        samples,
    })
}
