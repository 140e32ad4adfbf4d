//! Correlation-only predictors that estimate how well the foreground label
//! can be guessed from dataset-level statistics alone.

mod naive_bayes;

pub use naive_bayes::{fit_nb, truncate_objects, NbModel};

use crate::datamodel::{AnnotationTable, EmbeddingMatrix, LabelTable, ProbTable, SampleId, ScoredObject};
use crate::error::{Error, Result};
use crate::knn::{vote, KnnIndex};

/// One reference backend. Every backend yields a class distribution over
/// [`ReferencePredictor::classes`].
#[derive(Debug)]
pub enum ReferencePredictor {
    /// Naive Bayes over per-sample annotations (already indexed by the
    /// model vocabulary).
    NaiveBayes {
        model: NbModel,
        annotations: AnnotationTable,
    },
    /// Softmax outputs of an externally trained classifier.
    Ingested(ProbTable),
    /// KNN vote in a second model's embedding space (two-model test).
    AltKnn {
        index: KnnIndex,
        labels: LabelTable,
        k: usize,
        queries: EmbeddingMatrix,
    },
}

impl ReferencePredictor {
    /// Builds the NB backend, re-indexing `annotations` onto the model's
    /// vocabulary. Objects the model has never seen are dropped.
    pub fn naive_bayes(model: NbModel, annotations: &AnnotationTable) -> Result<Self> {
        let mapped = AnnotationTable::with_vocabulary(
            model.vocabulary().to_vec(),
            annotations.iter().map(|(id, objs)| {
                let objs = model
                    .map_objects(objs, annotations.vocabulary())
                    .into_iter()
                    .map(|(k, s)| (model.vocabulary()[k].clone(), s))
                    .collect();
                (id.clone(), objs)
            }),
        )?;
        Ok(ReferencePredictor::NaiveBayes {
            model,
            annotations: mapped,
        })
    }

    pub fn alt_knn(
        public: &EmbeddingMatrix,
        labels: LabelTable,
        k: usize,
        queries: EmbeddingMatrix,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroNeighbors);
        }
        let public = normalized(public.clone())?;
        Ok(ReferencePredictor::AltKnn {
            index: KnnIndex::new(&public)?,
            labels,
            k,
            queries: normalized(queries)?,
        })
    }

    pub fn classes(&self) -> &[String] {
        match self {
            ReferencePredictor::NaiveBayes { model, .. } => model.classes(),
            ReferencePredictor::Ingested(t) => t.classes(),
            ReferencePredictor::AltKnn { labels, .. } => labels.classes(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferencePredictor::NaiveBayes { .. } => "naive_bayes",
            ReferencePredictor::Ingested(_) => "ingested",
            ReferencePredictor::AltKnn { .. } => "alt_knn",
        }
    }

    /// Class distribution for one sample. `objects` (model vocabulary
    /// indices) and `embedding` override the stored per-sample inputs.
    pub fn distribution(
        &self,
        id: &SampleId,
        objects: Option<&[ScoredObject]>,
        embedding: Option<&[f32]>,
    ) -> Result<Vec<f64>> {
        match self {
            ReferencePredictor::NaiveBayes { model, annotations } => {
                let objs = match objects {
                    Some(o) => o,
                    None => annotations
                        .get(id)
                        .ok_or_else(|| Error::MissingSample(id.to_string()))?,
                };
                model.posterior(objs)
            }
            ReferencePredictor::Ingested(table) => table
                .get(id)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::MissingSample(id.to_string())),
            ReferencePredictor::AltKnn {
                index,
                labels,
                k,
                queries,
            } => {
                let q = match embedding {
                    Some(e) => e,
                    None => {
                        let row = queries
                            .position(id)
                            .ok_or(Error::MissingInput("an embedding for the sample"))?;
                        queries.row(row)
                    }
                };
                Ok(vote(&index.query(q, *k)?, labels)?.probs)
            }
        }
    }

    /// Distributions for many samples from the stored per-sample inputs, in
    /// the order of `ids`. KNN queries run as one batch.
    pub fn distributions(&self, ids: &[SampleId]) -> Result<Vec<Vec<f64>>> {
        match self {
            ReferencePredictor::AltKnn {
                index,
                labels,
                k,
                queries,
            } => {
                let sub = queries.select(ids).map_err(|e| match e {
                    Error::MissingSample(_) => Error::MissingInput("an embedding for every sample"),
                    other => other,
                })?;
                index
                    .query_matrix(&sub, *k)?
                    .iter()
                    .map(|n| vote(n, labels).map(|d| d.probs))
                    .collect()
            }
            _ => ids.iter().map(|id| self.distribution(id, None, None)).collect(),
        }
    }
}

fn normalized(m: EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if m.is_normalized() {
        Ok(m)
    } else {
        m.normalize_rows()
    }
}

/// Re-expresses a distribution over `from` classes on the `to` class list
/// (a superset); classes missing from `from` get probability 0.
pub fn align_distribution(dist: &[f64], from: &[String], to: &[String]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; to.len()];
    for (p, name) in dist.iter().zip(from) {
        let idx = to
            .binary_search(name)
            .map_err(|_| Error::InvalidParameter(format!("class {name:?} missing from class list")))?;
        out[idx] = *p;
    }
    Ok(out)
}
