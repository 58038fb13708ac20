use serde::{Deserialize, Serialize};

use super::{check_instances, instance_index, pair_scores, EvalError, Provenance};
use crate::ids::ModelInstanceId;
use crate::metrics::{d_prime, DPrimeValue, ScoreSet};
use crate::pairs::PairProtocol;
use crate::sim::Corpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelDistribution {
    pub reference: ModelInstanceId,
    pub alternative: ModelInstanceId,
    /// Raw scores; left out of serialized reports.
    #[serde(skip)]
    pub scores: ScoreSet,
    pub d_prime: DPrimeValue,
    pub max_genuine: f64,
    pub max_impostor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModelStudy {
    /// The reference compared with itself.
    pub same_model: CrossModelDistribution,
    pub alternatives: Vec<CrossModelDistribution>,
    pub provenance: Provenance,
}

fn distribution(
    corpus: &Corpus,
    protocol: &PairProtocol,
    reference: usize,
    alternative: usize,
) -> Result<CrossModelDistribution, EvalError> {
    let scores = ScoreSet::new(
        pair_scores(corpus, reference, alternative, &protocol.genuine),
        pair_scores(corpus, reference, alternative, &protocol.impostor),
    );
    let d = d_prime(&scores)?;
    Ok(CrossModelDistribution {
        reference: corpus.instances()[reference].clone(),
        alternative: corpus.instances()[alternative].clone(),
        max_genuine: scores.max_genuine().unwrap_or(f64::NAN),
        max_impostor: scores.max_impostor().unwrap_or(f64::NAN),
        d_prime: d,
        scores,
    })
}

/// Genuine and impostor score distributions with the first sample of every
/// pair embedded by `reference` and the second by each alternative.
///
/// Listing the reference among the alternatives is rejected unless
/// `allow_self` is set, in which case that entry reproduces the same-model
/// distribution.
pub fn cross_model_distributions(
    corpus: &Corpus,
    protocol: &PairProtocol,
    reference: &ModelInstanceId,
    alternatives: &[ModelInstanceId],
    allow_self: bool,
) -> Result<CrossModelStudy, EvalError> {
    check_instances(corpus)?;
    let r = instance_index(corpus, reference)?;
    let alts = alternatives
        .iter()
        .map(|a| {
            let k = instance_index(corpus, a)?;
            if k == r && !allow_self {
                return Err(EvalError::SelfComparison(a.clone()));
            }
            Ok(k)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CrossModelStudy {
        same_model: distribution(corpus, protocol, r, r)?,
        alternatives: alts
            .into_iter()
            .map(|k| distribution(corpus, protocol, r, k))
            .collect::<Result<_, _>>()?,
        provenance: Provenance::new(corpus, protocol),
    })
}
