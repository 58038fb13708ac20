//! Durable system state: the model-instance pool, the identity-to-instance
//! mapping and the template gallery.
//!
//! Every state change is a [`Mutation`]. [`Registry::apply`] is the only
//! transition function, which lets the same records drive live updates,
//! journal replay and tests.

mod snapshot;
mod store;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use snapshot::{snapshot_load, snapshot_save, temp_path_for, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use store::{JournalEntry, Store};

use crate::embedding::{EmbeddingError, FeatureVector};
use crate::ids::ModelInstanceId;
use crate::metrics::ThresholdSpec;

/// Microseconds since the Unix epoch.
pub type Timestamp = u64;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model instance {0} is already registered")]
    DuplicateInstance(ModelInstanceId),
    #[error("unknown model instance {0}")]
    UnknownInstance(ModelInstanceId),
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("identity {0:?} is already enrolled")]
    AlreadyEnrolled(String),
    #[error("no eligible model instance left for identity {0:?}; register new instances")]
    InstancePoolExhausted(String),
    #[error("model instance {0} has no verification threshold")]
    MissingThreshold(ModelInstanceId),
    #[error("template dimension {actual} does not match registry dimension {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("instance {instance} was already used by identity {identity:?}")]
    InstanceReuse {
        identity: String,
        instance: ModelInstanceId,
    },
    #[error("identity {identity:?} is active on {actual}, not {expected}")]
    StaleRevocation {
        identity: String,
        expected: ModelInstanceId,
        actual: ModelInstanceId,
    },
    #[error("invalid template: {0}")]
    Template(#[from] EmbeddingError),
    #[error("snapshot version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("corrupt journal: {0}")]
    CorruptJournal(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Available,
    InService,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Each instance verifies against its own calibrated threshold.
    #[default]
    PerInstance,
    /// One threshold for every instance.
    Shared,
}

impl std::str::FromStr for ThresholdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-instance" => Ok(Self::PerInstance),
            "shared" => Ok(Self::Shared),
            other => Err(format!(
                "unknown threshold mode {other:?} (per-instance|shared)"
            )),
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerInstance => "per-instance",
            Self::Shared => "shared",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInstanceRecord {
    pub id: ModelInstanceId,
    /// Registration order, starting at 0.
    pub index: u64,
    pub status: InstanceStatus,
    pub threshold: Option<ThresholdSpec>,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevocationEntry {
    pub instance: ModelInstanceId,
    pub revoked_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub identity_id: String,
    pub active_instance: ModelInstanceId,
    /// Always normalized.
    pub template: FeatureVector,
    pub revocation_history: Vec<RevocationEntry>,
    pub enrolled_at: Timestamp,
}

impl IdentityRecord {
    /// Whether the identity has ever been bound to `instance`.
    pub fn has_used(&self, instance: &ModelInstanceId) -> bool {
        &self.active_instance == instance
            || self
                .revocation_history
                .iter()
                .any(|e| &e.instance == instance)
    }
}

/// One state transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    RegisterInstance {
        id: ModelInstanceId,
        threshold: Option<ThresholdSpec>,
        at: Timestamp,
    },
    SetThreshold {
        id: ModelInstanceId,
        threshold: ThresholdSpec,
    },
    SetSharedThreshold {
        threshold: ThresholdSpec,
    },
    SetThresholdMode {
        mode: ThresholdMode,
    },
    Enroll {
        identity: String,
        instance: ModelInstanceId,
        template: Vec<f32>,
        at: Timestamp,
    },
    Revoke {
        identity: String,
        old_instance: ModelInstanceId,
        new_instance: ModelInstanceId,
        template: Vec<f32>,
        at: Timestamp,
    },
}

/// Chooses among the instances an identity may still use.
pub trait InstanceSelector {
    /// `eligible` is non-empty and in registration order.
    fn select<'a>(
        &self,
        identity: &str,
        eligible: &[&'a ModelInstanceRecord],
    ) -> &'a ModelInstanceRecord;
}

/// Deterministic default: the lowest registration index.
#[derive(Debug, Clone, Copy, Default)]
pub struct LowestIndex;

impl InstanceSelector for LowestIndex {
    fn select<'a>(&self, _: &str, eligible: &[&'a ModelInstanceRecord]) -> &'a ModelInstanceRecord {
        eligible[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    dim: usize,
    mode: ThresholdMode,
    shared_threshold: Option<ThresholdSpec>,
    instances: Vec<ModelInstanceRecord>,
    instance_pos: HashMap<ModelInstanceId, usize>,
    identities: HashMap<String, IdentityRecord>,
    last_timestamp: Timestamp,
    seq: u64,
}

impl Registry {
    pub fn new(dim: usize, mode: ThresholdMode) -> Self {
        Self {
            dim,
            mode,
            shared_threshold: None,
            instances: Vec::new(),
            instance_pos: HashMap::new(),
            identities: HashMap::new(),
            last_timestamp: 0,
            seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn threshold_mode(&self) -> ThresholdMode {
        self.mode
    }

    pub fn shared_threshold(&self) -> Option<&ThresholdSpec> {
        self.shared_threshold.as_ref()
    }

    /// Number of mutations applied since the registry was created.
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn last_timestamp(&self) -> Timestamp {
        self.last_timestamp
    }

    /// Instances in registration order.
    pub fn instances(&self) -> &[ModelInstanceRecord] {
        &self.instances
    }

    pub fn instance(&self, id: &ModelInstanceId) -> Result<&ModelInstanceRecord, RegistryError> {
        self.instance_pos
            .get(id)
            .map(|&p| &self.instances[p])
            .ok_or_else(|| RegistryError::UnknownInstance(id.clone()))
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    /// Identity ids in sorted order.
    pub fn identity_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.identities.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    pub fn identities(&self) -> impl Iterator<Item = &IdentityRecord> {
        self.identities.values()
    }

    pub fn lookup(&self, identity: &str) -> Result<&IdentityRecord, RegistryError> {
        self.identities
            .get(identity)
            .ok_or_else(|| RegistryError::UnknownIdentity(identity.to_owned()))
    }

    /// A timestamp strictly after every timestamp issued so far.
    pub fn next_timestamp(&self, now: Timestamp) -> Timestamp {
        now.max(self.last_timestamp + 1)
    }

    /// The threshold verification must use for `instance` under the current mode.
    pub fn threshold_for(
        &self,
        instance: &ModelInstanceId,
    ) -> Result<ThresholdSpec, RegistryError> {
        let record = self.instance(instance)?;
        let spec = match self.mode {
            ThresholdMode::PerInstance => record.threshold,
            ThresholdMode::Shared => self.shared_threshold,
        };
        spec.ok_or_else(|| RegistryError::MissingThreshold(instance.clone()))
    }

    pub fn assign_next_instance(&self, identity: &str) -> Result<ModelInstanceId, RegistryError> {
        self.assign_next_instance_with(identity, &LowestIndex)
    }

    /// Picks an instance the identity has never used. Does not mutate.
    pub fn assign_next_instance_with(
        &self,
        identity: &str,
        selector: &dyn InstanceSelector,
    ) -> Result<ModelInstanceId, RegistryError> {
        let current = self.identities.get(identity);
        let eligible: Vec<&ModelInstanceRecord> = self
            .instances
            .iter()
            .filter(|r| current.is_none_or(|c| !c.has_used(&r.id)))
            .collect();
        if eligible.is_empty() {
            return Err(RegistryError::InstancePoolExhausted(identity.to_owned()));
        }
        Ok(selector.select(identity, &eligible).id.clone())
    }

    fn check_template(&self, template: &[f32]) -> Result<FeatureVector, RegistryError> {
        if template.len() != self.dim {
            return Err(RegistryError::DimMismatch {
                expected: self.dim,
                actual: template.len(),
            });
        }
        Ok(FeatureVector::new(template.to_vec())?.normalize()?)
    }

    /// Checks a mutation against the current state without applying it.
    pub fn validate(&self, m: &Mutation) -> Result<(), RegistryError> {
        match m {
            Mutation::RegisterInstance { id, .. } => {
                if self.instance_pos.contains_key(id) {
                    return Err(RegistryError::DuplicateInstance(id.clone()));
                }
            }
            Mutation::SetThreshold { id, .. } => {
                self.instance(id)?;
            }
            Mutation::SetSharedThreshold { .. } | Mutation::SetThresholdMode { .. } => {}
            Mutation::Enroll {
                identity,
                instance,
                template,
                ..
            } => {
                if self.identities.contains_key(identity) {
                    return Err(RegistryError::AlreadyEnrolled(identity.clone()));
                }
                self.instance(instance)?;
                self.check_template(template)?;
            }
            Mutation::Revoke {
                identity,
                old_instance,
                new_instance,
                template,
                ..
            } => {
                let record = self.lookup(identity)?;
                if &record.active_instance != old_instance {
                    return Err(RegistryError::StaleRevocation {
                        identity: identity.clone(),
                        expected: old_instance.clone(),
                        actual: record.active_instance.clone(),
                    });
                }
                self.instance(new_instance)?;
                if record.has_used(new_instance) {
                    return Err(RegistryError::InstanceReuse {
                        identity: identity.clone(),
                        instance: new_instance.clone(),
                    });
                }
                self.check_template(template)?;
            }
        }
        Ok(())
    }

    /// Validates and applies one mutation.
    pub fn apply(&mut self, m: &Mutation) -> Result<(), RegistryError> {
        self.validate(m)?;
        match m {
            Mutation::RegisterInstance { id, threshold, at } => {
                self.bump_clock(*at);
                self.instance_pos.insert(id.clone(), self.instances.len());
                self.instances.push(ModelInstanceRecord {
                    id: id.clone(),
                    index: self.instances.len() as u64,
                    status: InstanceStatus::Available,
                    threshold: *threshold,
                    registered_at: *at,
                });
            }
            Mutation::SetThreshold { id, threshold } => {
                let p = self.instance_pos[id];
                self.instances[p].threshold = Some(*threshold);
            }
            Mutation::SetSharedThreshold { threshold } => self.shared_threshold = Some(*threshold),
            Mutation::SetThresholdMode { mode } => self.mode = *mode,
            Mutation::Enroll {
                identity,
                instance,
                template,
                at,
            } => {
                let template = self.check_template(template)?;
                self.bump_clock(*at);
                self.mark_in_service(instance);
                self.identities.insert(
                    identity.clone(),
                    IdentityRecord {
                        identity_id: identity.clone(),
                        active_instance: instance.clone(),
                        template,
                        revocation_history: Vec::new(),
                        enrolled_at: *at,
                    },
                );
            }
            Mutation::Revoke {
                identity,
                old_instance,
                new_instance,
                template,
                at,
            } => {
                let template = self.check_template(template)?;
                self.bump_clock(*at);
                self.mark_in_service(new_instance);
                let record = self.identities.get_mut(identity).expect("validated");
                record.revocation_history.push(RevocationEntry {
                    instance: old_instance.clone(),
                    revoked_at: *at,
                });
                record.active_instance = new_instance.clone();
                record.template = template;
            }
        }
        self.seq += 1;
        Ok(())
    }

    fn bump_clock(&mut self, at: Timestamp) {
        self.last_timestamp = self.last_timestamp.max(at);
    }

    fn mark_in_service(&mut self, id: &ModelInstanceId) {
        let p = self.instance_pos[id];
        self.instances[p].status = InstanceStatus::InService;
    }

    pub fn register_instance(
        &mut self,
        id: ModelInstanceId,
        threshold: Option<ThresholdSpec>,
        now: Timestamp,
    ) -> Result<&ModelInstanceRecord, RegistryError> {
        let at = self.next_timestamp(now);
        self.apply(&Mutation::RegisterInstance {
            id: id.clone(),
            threshold,
            at,
        })?;
        self.instance(&id)
    }

    /// Reassembles a registry from persisted parts, checking every invariant.
    pub(crate) fn from_parts(
        dim: usize,
        mode: ThresholdMode,
        shared_threshold: Option<ThresholdSpec>,
        instances: Vec<ModelInstanceRecord>,
        identities: Vec<IdentityRecord>,
        last_timestamp: Timestamp,
        seq: u64,
    ) -> Result<Self, String> {
        let mut instance_pos = HashMap::with_capacity(instances.len());
        for (p, r) in instances.iter().enumerate() {
            if r.index != p as u64 {
                return Err(format!(
                    "instance {} has index {} at position {p}",
                    r.id, r.index
                ));
            }
            if instance_pos.insert(r.id.clone(), p).is_some() {
                return Err(format!("duplicate instance {}", r.id));
            }
        }
        let mut map = HashMap::with_capacity(identities.len());
        for rec in identities {
            let known = |id: &ModelInstanceId| instance_pos.contains_key(id);
            if !known(&rec.active_instance)
                || !rec.revocation_history.iter().all(|e| known(&e.instance))
            {
                return Err(format!(
                    "identity {:?} references an unregistered instance",
                    rec.identity_id
                ));
            }
            if rec.template.dim() != dim || !rec.template.is_normalized() {
                return Err(format!(
                    "identity {:?} has an invalid template",
                    rec.identity_id
                ));
            }
            if rec
                .revocation_history
                .iter()
                .any(|e| e.instance == rec.active_instance)
                || !rec
                    .revocation_history
                    .windows(2)
                    .all(|w| w[0].revoked_at < w[1].revoked_at)
            {
                return Err(format!(
                    "identity {:?} has an inconsistent history",
                    rec.identity_id
                ));
            }
            if map.insert(rec.identity_id.clone(), rec).is_some() {
                return Err("duplicate identity".into());
            }
        }
        Ok(Self {
            dim,
            mode,
            shared_threshold,
            instances,
            instance_pos,
            identities: map,
            last_timestamp,
            seq,
        })
    }
}
