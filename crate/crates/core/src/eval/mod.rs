//! Evaluation over a multi-instance corpus: per-instance consistency,
//! cross-model score distributions, the instance relationship matrix and the
//! end-to-end impersonation experiment.

mod consistency;
mod cross;
mod impersonation;
mod matrix;

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use consistency::{consistency_report, ConsistencyReport, InstanceConsistency, Spread};
pub use cross::{cross_model_distributions, CrossModelDistribution, CrossModelStudy};
pub use impersonation::{
    calibrate_held_out, calibrate_instance_thresholds, enroll_population, impersonation_experiment,
    prepare_scenario_system, run_preset, ImpersonationReport, Scenario, ScenarioEvent,
    ScenarioPreset, ScenarioSetup,
};
pub use matrix::{
    relationship_matrix, DiagonalCell, MatrixSummary, OffDiagonalCell, RelationshipMatrix,
};

use crate::ids::ModelInstanceId;
use crate::lifecycle::LifecycleError;
use crate::metrics::{MetricsError, ScoreSet};
use crate::pairs::PairProtocol;
use crate::sim::{Corpus, SimError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 model instances, corpus has {0}")]
    InsufficientInstances(usize),
    #[error("unknown model instance {0}")]
    UnknownInstance(ModelInstanceId),
    #[error("reference instance {0} also listed as an alternative; pass allow_self to compare a model with itself")]
    SelfComparison(ModelInstanceId),
    #[error(
        "instance {instance} has {count} impostor scores; FMR target {fmr_target} needs at least {needed} \
         (more identities or images, or a coarser target)"
    )]
    InsufficientImpostors {
        instance: ModelInstanceId,
        count: usize,
        needed: usize,
        fmr_target: f64,
    },
    #[error("scenario references unknown identity {0:?}")]
    ScenarioReferencesUnknownIdentity(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
}

/// Where a report's numbers came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_seed: Option<u64>,
    pub config_digest: Option<String>,
    pub pair_seed: u64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub impostor_population: u64,
}

impl Provenance {
    pub fn new(corpus: &Corpus, protocol: &PairProtocol) -> Self {
        Self {
            corpus_seed: corpus.seed(),
            config_digest: corpus.config_digest().map(str::to_owned),
            pair_seed: protocol.seed,
            genuine_pairs: protocol.genuine.len(),
            impostor_pairs: protocol.impostor.len(),
            impostor_population: protocol.impostor_population,
        }
    }
}

/// Pair protocol over every identity of the corpus.
pub fn corpus_protocol(corpus: &Corpus, impostor_cap: usize, seed: u64) -> PairProtocol {
    PairProtocol::build(corpus.identity_ranges(), impostor_cap, seed)
}

fn check_instances(corpus: &Corpus) -> Result<(), EvalError> {
    match corpus.instances().len() {
        n if n < 2 => Err(EvalError::InsufficientInstances(n)),
        _ => Ok(()),
    }
}

fn instance_index(corpus: &Corpus, id: &ModelInstanceId) -> Result<usize, EvalError> {
    corpus
        .instance_index(id)
        .ok_or_else(|| EvalError::UnknownInstance(id.clone()))
}

/// Scores of `pairs`, first sample under instance `ka`, second under `kb`.
fn pair_scores(corpus: &Corpus, ka: usize, kb: usize, pairs: &[(u32, u32)]) -> Vec<f64> {
    pairs
        .par_iter()
        .map(|&(a, b)| corpus.score(ka, a as usize, kb, b as usize))
        .collect()
}

fn same_instance_scores(corpus: &Corpus, k: usize, protocol: &PairProtocol) -> ScoreSet {
    ScoreSet::new(
        pair_scores(corpus, k, k, &protocol.genuine),
        pair_scores(corpus, k, k, &protocol.impostor),
    )
}

/// Every ordered pair of distinct samples of the same identity.
fn ordered_genuine_pairs(ranges: &[Range<usize>]) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for r in ranges {
        for a in r.clone() {
            for b in r.clone() {
                if a != b {
                    out.push((a as u32, b as u32));
                }
            }
        }
    }
    out
}
