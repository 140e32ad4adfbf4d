//! Domain types shared by every test: sample ids, embedding matrices and
//! the label / annotation / probability tables, plus their on-disk formats.

mod embeddings;
mod tables;

pub use embeddings::{ids_path, load_embeddings, save_embeddings, EmbeddingMatrix};
pub use tables::{
    load_annotations, load_labels, load_probs, save_annotations, save_labels, save_probs,
    union_vocabulary, AnnotationTable, LabelTable, ProbTable, ScoredObject,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of one sample. Nonempty and free of line breaks so it can live
/// one-per-line in an `.ids` sidecar.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SampleId(String);

impl SampleId {
    pub fn new(token: impl Into<String>) -> Result<Self> {
        let token = token.into();
        if token.is_empty() || token.contains('\n') || token.contains('\r') {
            return Err(Error::InvalidId(token));
        }
        Ok(SampleId(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SampleId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        SampleId::new(value)
    }
}

impl From<SampleId> for String {
    fn from(id: SampleId) -> String {
        id.0
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for SampleId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_id_rejects_empty_and_newlines() {
        assert!(SampleId::new("").is_err());
        assert!(SampleId::new("a\nb").is_err());
        assert!(SampleId::new("a\rb").is_err());
        assert_eq!(SampleId::new("img_001").unwrap().as_str(), "img_001");
    }
}
