use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque name of one trained matcher instance ("m0", "m1", ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelInstanceId(String);

impl ModelInstanceId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    /// Conventional name for the instance at a given pool position.
    pub fn indexed(index: usize) -> Self {
        Self(format!("m{index}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ModelInstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ModelInstanceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}
