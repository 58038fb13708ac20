use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SimError;

pub const MIN_DIM: usize = 8;

/// Parameters of the synthetic multi-instance matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimWorldConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_instances")]
    pub num_instances: usize,
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// Latent noise scale; per-coordinate noise is `sigma / sqrt(dim)`.
    pub sigma: f64,
    /// Optional per-group noise multipliers. Identities are assigned to groups
    /// round-robin over the labels in sorted order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_noise_multipliers: BTreeMap<String, f64>,
    pub master_seed: u64,
}

fn default_dim() -> usize {
    512
}

fn default_instances() -> usize {
    10
}

impl SimWorldConfig {
    pub fn new(
        num_instances: usize,
        num_identities: usize,
        images_per_identity: usize,
        sigma: f64,
        master_seed: u64,
    ) -> Self {
        Self {
            dim: default_dim(),
            num_instances,
            num_identities,
            images_per_identity,
            sigma,
            group_noise_multipliers: BTreeMap::new(),
            master_seed,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn with_groups<I, S>(mut self, groups: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.group_noise_multipliers = groups.into_iter().map(|(k, v)| (k.into(), v)).collect();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.dim < MIN_DIM {
            return bad(format!("dim must be at least {MIN_DIM}, got {}", self.dim));
        }
        if self.num_instances == 0 {
            return bad("num_instances must be positive".into());
        }
        if self.num_identities == 0 {
            return bad("num_identities must be positive".into());
        }
        if self.images_per_identity == 0 {
            return bad("images_per_identity must be positive".into());
        }
        if u32::try_from(self.num_identities).is_err()
            || u32::try_from(self.images_per_identity).is_err()
        {
            return bad("identity and image counts must fit in 32 bits".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            ));
        }
        for (label, m) in &self.group_noise_multipliers {
            if !(m.is_finite() && *m > 0.0) {
                return bad(format!(
                    "group {label:?} multiplier must be positive, got {m}"
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical (compact, field-ordered) JSON form.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Group label of an identity, if groups are configured.
    pub fn group_of(&self, identity_index: usize) -> Option<&str> {
        let n = self.group_noise_multipliers.len();
        if n == 0 {
            return None;
        }
        self.group_noise_multipliers
            .keys()
            .nth(identity_index % n)
            .map(String::as_str)
    }

    pub fn effective_sigma(
        &self,
        identity_index: usize,
        override_group: Option<&str>,
    ) -> Result<f64, SimError> {
        let label = match override_group {
            Some(g) => Some(g),
            None => self.group_of(identity_index),
        };
        match label {
            None => Ok(self.sigma),
            Some(g) => self
                .group_noise_multipliers
                .get(g)
                .map(|m| self.sigma * m)
                .ok_or_else(|| SimError::UnknownGroup(g.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_unknown_keys() {
        let cfg = SimWorldConfig::from_json(
            r#"{"num_identities":5,"images_per_identity":2,"sigma":1.0,"master_seed":3}"#,
        )
        .unwrap();
        assert_eq!((cfg.dim, cfg.num_instances), (512, 10));
        let err = SimWorldConfig::from_json(
            r#"{"num_identities":5,"images_per_identity":2,"sigma":1.0,"master_seed":3,"extra":1}"#,
        );
        assert!(matches!(err, Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn validation() {
        let ok = SimWorldConfig::new(2, 3, 2, 0.5, 1);
        assert!(ok.validate().is_ok());
        assert!(ok.clone().with_dim(4).validate().is_err());
        assert!(SimWorldConfig::new(0, 3, 2, 0.5, 1).validate().is_err());
        assert!(SimWorldConfig::new(2, 3, 2, -0.5, 1).validate().is_err());
        assert!(ok.with_groups([("g", 0.0)]).validate().is_err());
    }

    #[test]
    fn groups_round_robin_over_sorted_labels() {
        let cfg = SimWorldConfig::new(2, 6, 2, 2.0, 1).with_groups([("g2", 1.3), ("g1", 1.0)]);
        assert_eq!(cfg.group_of(0), Some("g1"));
        assert_eq!(cfg.group_of(1), Some("g2"));
        assert_eq!(cfg.group_of(2), Some("g1"));
        assert!((cfg.effective_sigma(1, None).unwrap() - 2.6).abs() < 1e-12);
        assert_eq!(cfg.effective_sigma(1, Some("g1")).unwrap(), 2.0);
        assert!(matches!(
            cfg.effective_sigma(0, Some("zz")),
            Err(SimError::UnknownGroup(_))
        ));
    }

    #[test]
    fn digest_is_stable() {
        let a = SimWorldConfig::new(2, 3, 2, 0.5, 1);
        assert_eq!(a.digest(), a.clone().digest());
        let mut b = a.clone();
        b.master_seed = 2;
        assert_ne!(a.digest(), b.digest());
    }
}
