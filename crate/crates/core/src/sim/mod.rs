//! The feature-extractor port and its implementations.
//!
//! [`SimWorld`] is a synthetic multi-instance matcher: identities live in a
//! shared latent space and every model instance observes it through its own
//! Haar-random orthogonal transform. [`FileExtractor`] serves embeddings that
//! were computed elsewhere and written in the embedding record format.

mod calibrate;
mod config;
mod corpus;
mod file;
mod haar;
pub mod seed;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{calibrate_sigma, CalibrationOutcome, SIGMA_SEARCH_RANGE};
pub use config::SimWorldConfig;
pub use corpus::{Corpus, Sample};
pub use file::FileExtractor;
pub use haar::{haar_orthogonal, InstanceTransform, OrthogonalMatrix};
pub use world::{generate_corpus, SimWorld};

use crate::embedding::{EmbeddingError, FeatureVector};
use crate::ids::ModelInstanceId;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("unknown model instance {0}")]
    UnknownInstance(ModelInstanceId),
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: u64,
        limit: u64,
    },
    #[error("unknown group label {0:?}")]
    UnknownGroup(String),
    #[error("capture cannot be resolved by this extractor: {0}")]
    UnresolvableCapture(String),
    #[error("no embedding for identity {identity:?}, image {image:?}, instance {instance}")]
    MissingRecord {
        identity: String,
        image: String,
        instance: ModelInstanceId,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("target d-prime {target} unreachable; achievable band at this dimension is [{min:.3}, {max:.3}]")]
    Unreachable { target: f64, min: f64, max: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// One biometric presentation, standing in for a face image.
///
/// Synthetic captures are addressed by index; externally computed embeddings
/// by their identity/image keys. The two forms convert into each other through
/// the `id{i}` / `img{j}` naming used by corpus generation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CaptureDescriptor {
    Indexed {
        identity_index: u32,
        image_index: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_label: Option<String>,
    },
    Keyed {
        identity: String,
        image: String,
    },
}

impl CaptureDescriptor {
    pub fn indexed(identity_index: u32, image_index: u32) -> Self {
        Self::Indexed {
            identity_index,
            image_index,
            group_label: None,
        }
    }

    pub fn keyed(identity: impl Into<String>, image: impl Into<String>) -> Self {
        Self::Keyed {
            identity: identity.into(),
            image: image.into(),
        }
    }

    /// `(identity, image)` record keys.
    pub fn keys(&self) -> (String, String) {
        match self {
            Self::Indexed {
                identity_index,
                image_index,
                ..
            } => (identity_key(*identity_index), image_key(*image_index)),
            Self::Keyed { identity, image } => (identity.clone(), image.clone()),
        }
    }

    /// `(identity_index, image_index)` if the capture is or names a synthetic one.
    pub fn indices(&self) -> Option<(u32, u32)> {
        match self {
            Self::Indexed {
                identity_index,
                image_index,
                ..
            } => Some((*identity_index, *image_index)),
            Self::Keyed { identity, image } => Some((
                identity.strip_prefix("id")?.parse().ok()?,
                image.strip_prefix("img")?.parse().ok()?,
            )),
        }
    }

    pub fn group_label(&self) -> Option<&str> {
        match self {
            Self::Indexed { group_label, .. } => group_label.as_deref(),
            Self::Keyed { .. } => None,
        }
    }
}

pub fn identity_key(index: u32) -> String {
    format!("id{index}")
}

pub fn image_key(index: u32) -> String {
    format!("img{index}")
}

/// Anything that turns a capture into a template under a given model instance.
///
/// Implementations must be deterministic: the same `(capture, instance)` always
/// yields the same vector.
pub trait ExtractorPort: Send + Sync {
    fn extract(
        &self,
        capture: &CaptureDescriptor,
        instance: &ModelInstanceId,
    ) -> Result<FeatureVector, SimError>;

    fn instances(&self) -> Vec<ModelInstanceId>;

    fn dim(&self) -> usize;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capture_keys_round_trip() {
        let c = CaptureDescriptor::indexed(12, 3);
        assert_eq!(c.keys(), ("id12".to_string(), "img3".to_string()));
        let k = CaptureDescriptor::keyed("id12", "img3");
        assert_eq!(k.indices(), Some((12, 3)));
        assert_eq!(CaptureDescriptor::keyed("alice", "img3").indices(), None);
    }

    #[test]
    fn capture_json_forms() {
        let c: CaptureDescriptor =
            serde_json::from_str(r#"{"identity_index":1,"image_index":2}"#).unwrap();
        assert_eq!(c, CaptureDescriptor::indexed(1, 2));
        let k: CaptureDescriptor =
            serde_json::from_str(r#"{"identity":"alice","image":"front"}"#).unwrap();
        assert_eq!(k, CaptureDescriptor::keyed("alice", "front"));
    }
}
