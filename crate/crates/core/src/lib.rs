//! Revocable biometric templates built on interchangeable matcher instances.
//!
//! Each enrolled identity is bound to one model instance out of a pool of
//! equally accurate but mutually incompatible instances. Revoking a template
//! moves the identity to a fresh instance; the stolen template then scores like
//! an impostor against the re-enrolled one.

pub mod audit;
pub mod clock;
pub mod embedding;
pub mod eval;
pub mod ids;
pub mod lifecycle;
pub mod metrics;
pub mod pairs;
pub mod registry;
pub mod sim;

pub use embedding::{
    cosine_similarity, EmbeddingError, EmbeddingRecord, FeatureVector, SimilarityScore,
};
pub use ids::ModelInstanceId;
pub use lifecycle::{
    LifecycleError, RevocationOutcome, System, SystemStatus, VerificationDecision,
};
pub use metrics::{d_prime, fmr_threshold, DPrimeValue, MetricsError, ScoreSet, ThresholdSpec};
pub use registry::{IdentityRecord, ModelInstanceRecord, Registry, RegistryError, ThresholdMode};
pub use sim::{
    CaptureDescriptor, Corpus, ExtractorPort, FileExtractor, SimError, SimWorld, SimWorldConfig,
};
