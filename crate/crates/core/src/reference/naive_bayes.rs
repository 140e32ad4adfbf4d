//! Naive Bayes over detected background objects.
//!
//! Estimates, with `n_t` training samples of class `t` and `n` in total:
//!
//! ```text
//! P(o_k | t) = (count(o_k, t) + alpha) / (n_t + 2 alpha)
//! P(o_k)     = (count(o_k) + alpha)    / (n + 2 alpha)
//! P(t)       = n_t / n
//! ```
//!
//! and scores a sample by `ln P(t) + sum_k [ln P(o_k|t) - ln P(o_k)]` over its
//! top-K detected objects only; absent objects contribute nothing.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datamodel::{AnnotationTable, LabelTable, ScoredObject};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbModel {
    classes: Vec<String>,
    vocabulary: Vec<String>,
    alpha: f64,
    top_k: usize,
    /// `ln P(t)`.
    #[serde(with = "log_vec")]
    log_prior: Vec<f64>,
    /// `ln P(o_k | t)`, one row per class.
    #[serde(with = "log_mat")]
    log_cond: Vec<Vec<f64>>,
    /// `ln P(o_k)`.
    #[serde(with = "log_vec")]
    log_marginal: Vec<f64>,
}

/// Indices of the `top_k` highest-scoring objects, ties by index (which is
/// name order, since vocabularies are sorted). Returned in index order.
pub fn truncate_objects(objects: &[ScoredObject], top_k: usize) -> Vec<usize> {
    let mut ranked: Vec<ScoredObject> = objects.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = ranked.into_iter().take(top_k).map(|(k, _)| k).collect();
    kept.sort_unstable();
    kept
}

/// Fits the model on every annotated training sample. Each annotated id must
/// carry a label, and every class in `labels` needs at least one sample.
pub fn fit_nb(
    annotations: &AnnotationTable,
    labels: &LabelTable,
    alpha: f64,
    top_k: usize,
) -> Result<NbModel> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
    }
    if top_k == 0 {
        return Err(Error::InvalidParameter("top_k must be positive".into()));
    }
    let n_classes = labels.n_classes();
    let n_objects = annotations.vocabulary().len();
    let mut class_count = vec![0u64; n_classes];
    let mut joint = vec![vec![0u64; n_objects]; n_classes];
    let mut marginal = vec![0u64; n_objects];

    for (id, objs) in annotations.iter() {
        let t = labels
            .get(id)
            .ok_or_else(|| Error::UnlabeledSample(id.to_string()))?;
        class_count[t] += 1;
        for k in truncate_objects(objs, top_k) {
            joint[t][k] += 1;
            marginal[k] += 1;
        }
    }
    if let Some(t) = class_count.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(labels.class_name(t).to_string()));
    }
    let n: u64 = class_count.iter().sum();
    let smoothed = |count: u64, total: u64| {
        ((count as f64 + alpha) / (total as f64 + 2.0 * alpha)).ln()
    };

    Ok(NbModel {
        classes: labels.classes().to_vec(),
        vocabulary: annotations.vocabulary().to_vec(),
        alpha,
        top_k,
        log_prior: class_count
            .iter()
            .map(|&c| (c as f64 / n as f64).ln())
            .collect(),
        log_cond: joint
            .iter()
            .zip(&class_count)
            .map(|(row, &nt)| row.iter().map(|&c| smoothed(c, nt)).collect())
            .collect(),
        log_marginal: marginal.iter().map(|&c| smoothed(c, n)).collect(),
    })
}

impl NbModel {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|v| v.exp()).collect()
    }

    pub fn cond(&self, class: usize, object: usize) -> f64 {
        self.log_cond[class][object].exp()
    }

    pub fn marginal(&self, object: usize) -> f64 {
        self.log_marginal[object].exp()
    }

    /// Unnormalized log scores per class for a detected-object list
    /// (indices into this model's vocabulary).
    pub fn log_scores(&self, objects: &[ScoredObject]) -> Result<Vec<f64>> {
        if let Some(&(k, _)) = objects.iter().find(|(k, _)| *k >= self.vocabulary.len()) {
            return Err(Error::UnknownObject(k));
        }
        let kept = truncate_objects(objects, self.top_k);
        let mut scores = self.log_prior.clone();
        for k in kept {
            let lm = self.log_marginal[k];
            // never counted in training (only possible with alpha = 0): no evidence
            if lm == f64::NEG_INFINITY {
                continue;
            }
            for (t, s) in scores.iter_mut().enumerate() {
                *s += self.log_cond[t][k] - lm;
            }
        }
        Ok(scores)
    }

    /// Class posterior: the normalized exponentials of [`log_scores`].
    /// When every class scores zero probability (contradictory evidence
    /// under alpha = 0) the class prior is returned.
    ///
    /// [`log_scores`]: Self::log_scores
    pub fn posterior(&self, objects: &[ScoredObject]) -> Result<Vec<f64>> {
        let scores = self.log_scores(objects)?;
        Ok(softmax_or(&scores, &self.log_prior))
    }

    /// Maps an annotation list from another vocabulary into this model's
    /// indices; objects the model never saw are dropped.
    pub fn map_objects(&self, objects: &[ScoredObject], vocabulary: &[String]) -> Vec<ScoredObject> {
        objects
            .iter()
            .filter_map(|&(k, s)| {
                self.vocabulary
                    .binary_search(&vocabulary[k])
                    .ok()
                    .map(|idx| (idx, s))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = crate::report::to_json_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: NbModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let c = self.classes.len();
        let v = self.vocabulary.len();
        let shape_ok = self.log_prior.len() == c
            && self.log_cond.len() == c
            && self.log_cond.iter().all(|r| r.len() == v)
            && self.log_marginal.len() == v;
        if !shape_ok {
            return Err(Error::InvalidParameter("model arrays have inconsistent shapes".into()));
        }
        let sum: f64 = self.prior().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!("class prior sums to {sum}")));
        }
        Ok(())
    }
}

/// Log-sum-exp normalization of `scores`, falling back to `fallback` when
/// all scores are `-inf`.
fn softmax_or(scores: &[f64], fallback: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return softmax_or(fallback, &vec![0.0; fallback.len()]);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

// Zero probabilities (alpha = 0) have log -inf, which JSON cannot carry;
// they travel as null.
mod log_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

mod log_mat {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
        m.iter()
            .map(|row| row.iter().map(|x| x.is_finite().then_some(*x)).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
        let raw: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
            .collect())
    }
}
