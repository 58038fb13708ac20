//! Enrollment, verification and revocation over a registry and an extractor.
//!
//! Mutations are prepared outside the registry lock (extraction may be slow),
//! then committed under the write lock: validated, journaled, applied. Reads
//! take the read lock just long enough to copy what they need, so a
//! verification sees either the whole old record or the whole new one.
//! Mutations of one identity are serialized by a striped lock.

use std::hash::{BuildHasher, RandomState};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{score_band, AuditDecision, AuditEvent, AuditLog, AuditOp};
use crate::clock::{Clock, SystemClock};
use crate::embedding::{cosine_similarity, EmbeddingError, FeatureVector};
use crate::ids::ModelInstanceId;
use crate::metrics::ThresholdSpec;
use crate::registry::{
    IdentityRecord, Mutation, Registry, RegistryError, Store, ThresholdMode, Timestamp,
};
use crate::sim::{CaptureDescriptor, ExtractorPort, SimError};

/// Mutations between automatic checkpoints of a persistent system.
pub const DEFAULT_CHECKPOINT_INTERVAL: usize = 1024;

const IDENTITY_LOCK_STRIPES: usize = 64;

#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("extraction failed: {0}")]
    Extraction(#[from] SimError),
}

impl From<EmbeddingError> for LifecycleError {
    fn from(e: EmbeddingError) -> Self {
        Self::Registry(RegistryError::Template(e))
    }
}

impl LifecycleError {
    pub fn registry(&self) -> Option<&RegistryError> {
        match self {
            Self::Registry(e) => Some(e),
            Self::Extraction(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationDecision {
    pub accepted: bool,
    pub score: f64,
    pub instance_used: ModelInstanceId,
    pub threshold_used: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationOutcome {
    pub identity_id: String,
    pub old_instance: ModelInstanceId,
    pub new_instance: ModelInstanceId,
    /// SHA-256 (hex) of the new template's little-endian f32 bytes.
    pub new_template_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStatus {
    pub instances_registered: usize,
    pub identities_enrolled: usize,
    pub threshold_mode: ThresholdMode,
    pub dimension: usize,
    pub mutations: u64,
}

pub fn template_digest(components: &[f32]) -> String {
    let mut h = Sha256::new();
    for c in components {
        h.update(c.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// The running biometric system.
pub struct System {
    registry: RwLock<Registry>,
    store: Mutex<Option<Store>>,
    extractor: Arc<dyn ExtractorPort>,
    clock: Arc<dyn Clock>,
    audit: Option<AuditLog>,
    stripes: Vec<Mutex<()>>,
    hasher: RandomState,
    checkpoint_interval: usize,
}

impl std::fmt::Debug for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System")
            .field("status", &self.status())
            .finish_non_exhaustive()
    }
}

impl System {
    /// A system whose state lives only in memory.
    pub fn in_memory(
        extractor: Arc<dyn ExtractorPort>,
        registry: Registry,
    ) -> Result<Self, LifecycleError> {
        Self::build(extractor, registry, None)
    }

    /// Opens (or creates) a persistent store in `dir`. `mode` applies only
    /// when the store is new.
    pub fn open(
        dir: &Path,
        extractor: Arc<dyn ExtractorPort>,
        mode: ThresholdMode,
    ) -> Result<Self, LifecycleError> {
        let (store, registry) = Store::open(dir, extractor.dim(), mode)?;
        Self::build(extractor, registry, Some(store))
    }

    fn build(
        extractor: Arc<dyn ExtractorPort>,
        registry: Registry,
        store: Option<Store>,
    ) -> Result<Self, LifecycleError> {
        if extractor.dim() != registry.dim() {
            return Err(RegistryError::DimMismatch {
                expected: registry.dim(),
                actual: extractor.dim(),
            }
            .into());
        }
        Ok(Self {
            registry: RwLock::new(registry),
            store: Mutex::new(store),
            extractor,
            clock: Arc::new(SystemClock),
            audit: None,
            stripes: (0..IDENTITY_LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            hasher: RandomState::new(),
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    /// Zero disables automatic checkpoints.
    pub fn with_checkpoint_interval(mut self, mutations: usize) -> Self {
        self.checkpoint_interval = mutations;
        self
    }

    pub fn extractor(&self) -> &Arc<dyn ExtractorPort> {
        &self.extractor
    }

    /// Runs `f` against a consistent view of the registry.
    pub fn with_registry<R>(&self, f: impl FnOnce(&Registry) -> R) -> R {
        f(&self.registry.read())
    }

    pub fn registry_snapshot(&self) -> Registry {
        self.registry.read().clone()
    }

    pub fn status(&self) -> SystemStatus {
        let r = self.registry.read();
        SystemStatus {
            instances_registered: r.instances().len(),
            identities_enrolled: r.identity_count(),
            threshold_mode: r.threshold_mode(),
            dimension: r.dim(),
            mutations: r.seq(),
        }
    }

    pub fn lookup(&self, identity: &str) -> Result<IdentityRecord, LifecycleError> {
        Ok(self.registry.read().lookup(identity)?.clone())
    }

    fn identity_lock(&self, identity: &str) -> parking_lot::MutexGuard<'_, ()> {
        let h = self.hasher.hash_one(identity) as usize;
        self.stripes[h % self.stripes.len()].lock()
    }

    /// Validates, journals and applies the mutation built from the current
    /// registry state and commit time.
    fn commit(
        &self,
        build: impl FnOnce(&Registry, Timestamp) -> Mutation,
    ) -> Result<Mutation, LifecycleError> {
        let mut registry = self.registry.write();
        let at = registry.next_timestamp(self.clock.now_micros());
        let m = build(&registry, at);
        registry.validate(&m)?;
        let mut store = self.store.lock();
        if let Some(store) = store.as_mut() {
            store.append(registry.seq() + 1, &m)?;
        }
        registry.apply(&m)?;
        if let Some(store) = store.as_mut() {
            if self.checkpoint_interval > 0 && store.pending() >= self.checkpoint_interval {
                // The mutation is already durable in the journal; a failed
                // checkpoint only delays compaction.
                if let Err(e) = store.checkpoint(&registry) {
                    log::warn!("checkpoint failed: {e}");
                }
            }
        }
        Ok(m)
    }

    /// Writes a snapshot and truncates the journal. No-op for in-memory systems.
    pub fn checkpoint(&self) -> Result<(), LifecycleError> {
        let registry = self.registry.read();
        if let Some(store) = self.store.lock().as_mut() {
            store.checkpoint(&registry)?;
        }
        Ok(())
    }

    fn audit(
        &self,
        op: AuditOp,
        identity: &str,
        instance: Option<&ModelInstanceId>,
        decision: AuditDecision,
        score: Option<f64>,
    ) {
        if let Some(log) = &self.audit {
            let event = AuditEvent {
                ts: self.clock.now_micros(),
                op,
                identity: identity.to_owned(),
                instance: instance.cloned(),
                decision,
                score_band: score.map(score_band),
            };
            if let Err(e) = log.record(&event) {
                log::error!("audit write failed: {e}");
            }
        }
    }

    fn audit_failure<T>(
        &self,
        op: AuditOp,
        identity: &str,
        r: Result<T, LifecycleError>,
    ) -> Result<T, LifecycleError> {
        if r.is_err() {
            self.audit(op, identity, None, AuditDecision::Failed, None);
        }
        r
    }

    // ---- admin -------------------------------------------------------------

    pub fn register_instance(
        &self,
        id: ModelInstanceId,
        threshold: Option<ThresholdSpec>,
    ) -> Result<(), LifecycleError> {
        self.commit(|_, at| Mutation::RegisterInstance { id, threshold, at })?;
        Ok(())
    }

    pub fn set_threshold(
        &self,
        id: ModelInstanceId,
        threshold: ThresholdSpec,
    ) -> Result<(), LifecycleError> {
        self.commit(|_, _| Mutation::SetThreshold { id, threshold })?;
        Ok(())
    }

    pub fn set_shared_threshold(&self, threshold: ThresholdSpec) -> Result<(), LifecycleError> {
        self.commit(|_, _| Mutation::SetSharedThreshold { threshold })?;
        Ok(())
    }

    pub fn set_threshold_mode(&self, mode: ThresholdMode) -> Result<(), LifecycleError> {
        if self.registry.read().threshold_mode() == mode {
            return Ok(());
        }
        self.commit(|_, _| Mutation::SetThresholdMode { mode })?;
        Ok(())
    }

    // ---- enrollment ----------------------------------------------------------

    /// Assigns the next eligible instance and stores the template extracted
    /// from `capture` under it.
    pub fn enroll(
        &self,
        identity: &str,
        capture: &CaptureDescriptor,
    ) -> Result<IdentityRecord, LifecycleError> {
        let r = self.enroll_with(identity, |instance| {
            Ok(self.extractor.extract(capture, instance)?)
        });
        self.audit_failure(AuditOp::Enroll, identity, r)
    }

    /// Enrollment with a template extracted elsewhere.
    pub fn enroll_template(
        &self,
        identity: &str,
        template: Vec<f32>,
    ) -> Result<IdentityRecord, LifecycleError> {
        let r = self.enroll_with(identity, |_| Ok(FeatureVector::new(template)?.normalize()?));
        self.audit_failure(AuditOp::Enroll, identity, r)
    }

    fn enroll_with(
        &self,
        identity: &str,
        template_for: impl FnOnce(&ModelInstanceId) -> Result<FeatureVector, LifecycleError>,
    ) -> Result<IdentityRecord, LifecycleError> {
        let _guard = self.identity_lock(identity);
        let instance = {
            let r = self.registry.read();
            if r.lookup(identity).is_ok() {
                return Err(RegistryError::AlreadyEnrolled(identity.to_owned()).into());
            }
            r.assign_next_instance(identity)?
        };
        let template = template_for(&instance)?.into_components();
        self.commit(|_, at| Mutation::Enroll {
            identity: identity.to_owned(),
            instance: instance.clone(),
            template,
            at,
        })?;
        let record = self.lookup(identity)?;
        self.audit(
            AuditOp::Enroll,
            identity,
            Some(&instance),
            AuditDecision::Enrolled,
            None,
        );
        Ok(record)
    }

    // ---- verification --------------------------------------------------------

    /// Extracts `capture` with the identity's active instance and compares it
    /// to the enrolled template.
    pub fn verify(
        &self,
        identity: &str,
        capture: &CaptureDescriptor,
    ) -> Result<VerificationDecision, LifecycleError> {
        let r = self.verify_inner(identity, |instance| {
            Ok(self.extractor.extract(capture, instance)?)
        });
        self.finish_verify(AuditOp::Verify, identity, r)
    }

    /// Compares a caller-supplied template to the enrolled one, skipping
    /// extraction. This is also the path a replayed stolen template takes.
    pub fn verify_raw_template(
        &self,
        identity: &str,
        probe: &[f32],
    ) -> Result<VerificationDecision, LifecycleError> {
        let r = self.verify_inner(identity, |_| {
            let dim = self.registry.read().dim();
            if probe.len() != dim {
                return Err(RegistryError::DimMismatch {
                    expected: dim,
                    actual: probe.len(),
                }
                .into());
            }
            Ok(FeatureVector::new(probe.to_vec())?.normalize()?)
        });
        self.finish_verify(AuditOp::VerifyRaw, identity, r)
    }

    fn verify_inner(
        &self,
        identity: &str,
        probe_for: impl FnOnce(&ModelInstanceId) -> Result<FeatureVector, LifecycleError>,
    ) -> Result<VerificationDecision, LifecycleError> {
        let (instance, template, threshold) = {
            let r = self.registry.read();
            let record = r.lookup(identity)?;
            let threshold = r.threshold_for(&record.active_instance)?;
            (
                record.active_instance.clone(),
                record.template.clone(),
                threshold,
            )
        };
        let probe = probe_for(&instance)?;
        let score = cosine_similarity(&probe, &template)
            .map_err(RegistryError::from)?
            .value();
        Ok(VerificationDecision {
            accepted: threshold.accepts(score),
            score,
            instance_used: instance,
            threshold_used: threshold.threshold,
        })
    }

    fn finish_verify(
        &self,
        op: AuditOp,
        identity: &str,
        r: Result<VerificationDecision, LifecycleError>,
    ) -> Result<VerificationDecision, LifecycleError> {
        match &r {
            Ok(d) => {
                let decision = if d.accepted {
                    AuditDecision::Accepted
                } else {
                    AuditDecision::Rejected
                };
                self.audit(
                    op,
                    identity,
                    Some(&d.instance_used),
                    decision,
                    Some(d.score),
                );
            }
            Err(_) => self.audit(op, identity, None, AuditDecision::Failed, None),
        }
        r
    }

    // ---- revocation ----------------------------------------------------------

    /// Retires the identity's active instance and re-enrolls it from a fresh
    /// capture under the next eligible instance. Other identities are untouched.
    pub fn revoke(
        &self,
        identity: &str,
        fresh_capture: &CaptureDescriptor,
    ) -> Result<RevocationOutcome, LifecycleError> {
        let r = self.revoke_with(identity, |instance| {
            Ok(self.extractor.extract(fresh_capture, instance)?)
        });
        self.audit_failure(AuditOp::Revoke, identity, r)
    }

    /// Revocation with a template the caller extracted under the instance
    /// returned by [`System::next_instance`].
    pub fn revoke_with_template(
        &self,
        identity: &str,
        expected_new_instance: &ModelInstanceId,
        template: Vec<f32>,
    ) -> Result<RevocationOutcome, LifecycleError> {
        let r = self.revoke_with(identity, |instance| {
            if instance != expected_new_instance {
                return Err(RegistryError::StaleRevocation {
                    identity: identity.to_owned(),
                    expected: expected_new_instance.clone(),
                    actual: instance.clone(),
                }
                .into());
            }
            Ok(FeatureVector::new(template)?.normalize()?)
        });
        self.audit_failure(AuditOp::Revoke, identity, r)
    }

    /// The instance a revocation of `identity` would move it to.
    pub fn next_instance(&self, identity: &str) -> Result<ModelInstanceId, LifecycleError> {
        let r = self.registry.read();
        r.lookup(identity)?;
        Ok(r.assign_next_instance(identity)?)
    }

    fn revoke_with(
        &self,
        identity: &str,
        template_for: impl FnOnce(&ModelInstanceId) -> Result<FeatureVector, LifecycleError>,
    ) -> Result<RevocationOutcome, LifecycleError> {
        let _guard = self.identity_lock(identity);
        let (old_instance, new_instance) = {
            let r = self.registry.read();
            let old = r.lookup(identity)?.active_instance.clone();
            (old, r.assign_next_instance(identity)?)
        };
        let template = template_for(&new_instance)?.into_components();
        let digest = template_digest(&template);
        self.commit(|_, at| Mutation::Revoke {
            identity: identity.to_owned(),
            old_instance: old_instance.clone(),
            new_instance: new_instance.clone(),
            template,
            at,
        })?;
        self.audit(
            AuditOp::Revoke,
            identity,
            Some(&new_instance),
            AuditDecision::Revoked,
            None,
        );
        Ok(RevocationOutcome {
            identity_id: identity.to_owned(),
            old_instance,
            new_instance,
            new_template_digest: digest,
        })
    }

    /// Revokes several identities one after another. Each revocation stands
    /// alone; a failure does not undo the others.
    pub fn revoke_batch(
        &self,
        requests: &[(String, CaptureDescriptor)],
    ) -> Vec<Result<RevocationOutcome, LifecycleError>> {
        requests
            .iter()
            .map(|(id, capture)| self.revoke(id, capture))
            .collect()
    }
}
