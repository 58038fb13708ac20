use std::fmt;
use std::process::ExitCode;

use revbio_core::eval::EvalError;
use revbio_core::{LifecycleError, MetricsError, RegistryError, SimError};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_INSUFFICIENT_IMPOSTORS: u8 = 3;
pub const EXIT_PORT_IN_USE: u8 = 4;

/// A message plus the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(EXIT_VALIDATION, message)
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn sim_exit(e: &SimError) -> u8 {
    match e {
        SimError::InvalidConfig(_) | SimError::UnknownGroup(_) | SimError::Unreachable { .. } => {
            EXIT_VALIDATION
        }
        SimError::Metrics(MetricsError::InvalidTarget(_)) => EXIT_VALIDATION,
        _ => EXIT_FAILURE,
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Self::new(sim_exit(&e), e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match &e {
            EvalError::InsufficientImpostors { .. } => EXIT_INSUFFICIENT_IMPOSTORS,
            EvalError::InsufficientInstances(_)
            | EvalError::UnknownInstance(_)
            | EvalError::SelfComparison(_)
            | EvalError::ScenarioReferencesUnknownIdentity(_)
            | EvalError::InvalidScenario(_)
            | EvalError::Metrics(MetricsError::InvalidTarget(_)) => EXIT_VALIDATION,
            EvalError::Sim(s) => sim_exit(s),
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<LifecycleError> for Failure {
    fn from(e: LifecycleError) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<RegistryError> for Failure {
    fn from(e: RegistryError) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, format!("i/o failure: {e}"))
    }
}
