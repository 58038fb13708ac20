use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_instances, ordered_genuine_pairs, pair_scores, same_instance_scores, EvalError,
    Provenance,
};
use crate::ids::ModelInstanceId;
use crate::metrics::{d_prime, fmr_threshold, DPrimeValue, ThresholdSpec};
use crate::pairs::PairProtocol;
use crate::sim::Corpus;

/// Same-instance statistics. Both the threshold and d-prime are labelled
/// explicitly; neither is "the top value".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCell {
    pub index: usize,
    pub instance: ModelInstanceId,
    pub fmr_threshold: ThresholdSpec,
    pub d_prime: DPrimeValue,
    pub genuine_mean: f64,
    pub max_impostor: f64,
}

/// Cross-instance genuine statistics for one unordered instance pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonalCell {
    pub i: usize,
    pub j: usize,
    pub instance_i: ModelInstanceId,
    pub instance_j: ModelInstanceId,
    pub max_cross_genuine: f64,
    pub cross_genuine_count: usize,
    pub accepted_vs_i: usize,
    pub accepted_vs_j: usize,
    /// Fraction of cross genuine scores strictly above instance i's threshold.
    pub accept_rate_vs_i: f64,
    pub accept_rate_vs_j: f64,
    /// The larger of the two rates.
    pub cross_genuine_accept_rate: f64,
}

impl OffDiagonalCell {
    fn transposed(&self) -> Self {
        Self {
            i: self.j,
            j: self.i,
            instance_i: self.instance_j.clone(),
            instance_j: self.instance_i.clone(),
            accepted_vs_i: self.accepted_vs_j,
            accepted_vs_j: self.accepted_vs_i,
            accept_rate_vs_i: self.accept_rate_vs_j,
            accept_rate_vs_j: self.accept_rate_vs_i,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixSummary {
    pub min_diagonal_threshold: f64,
    pub max_off_diagonal_genuine: f64,
    pub worst_accept_rate: f64,
    pub min_diagonal_d_prime: f64,
    /// Every diagonal genuine mean exceeds every off-diagonal maximum.
    pub diagonal_dominance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipMatrix {
    pub n: usize,
    pub fmr_target: f64,
    pub instances: Vec<ModelInstanceId>,
    pub diagonal: Vec<DiagonalCell>,
    /// Upper triangle, row-major: (0,1), (0,2), ..., (n-2,n-1).
    pub off_diagonal: Vec<OffDiagonalCell>,
    pub summary: MatrixSummary,
    pub provenance: Provenance,
}

impl RelationshipMatrix {
    /// The cell for `(i, j)` in either orientation; `None` on the diagonal.
    pub fn cell(&self, i: usize, j: usize) -> Option<OffDiagonalCell> {
        if i == j || i >= self.n || j >= self.n {
            return None;
        }
        let (a, b) = (i.min(j), i.max(j));
        let pos = a * (2 * self.n - a - 1) / 2 + (b - a - 1);
        let c = &self.off_diagonal[pos];
        Some(if i < j { c.clone() } else { c.transposed() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    /// Long form: `i,j,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["i", "j", "metric", "value"])
            .expect("in-memory csv");
        let mut put = |i: usize, j: usize, metric: &str, value: String| {
            w.write_record([i.to_string(), j.to_string(), metric.to_owned(), value])
                .expect("in-memory csv");
        };
        for d in &self.diagonal {
            let k = d.index;
            put(k, k, "fmr_threshold", d.fmr_threshold.threshold.to_string());
            put(
                k,
                k,
                "empirical_fmr",
                d.fmr_threshold.empirical_fmr.to_string(),
            );
            put(
                k,
                k,
                "impostor_count",
                d.fmr_threshold.impostor_count.to_string(),
            );
            put(k, k, "d_prime", d.d_prime.value.to_string());
            put(k, k, "genuine_mean", d.genuine_mean.to_string());
            put(k, k, "max_impostor", d.max_impostor.to_string());
        }
        for c in &self.off_diagonal {
            put(
                c.i,
                c.j,
                "max_cross_genuine",
                c.max_cross_genuine.to_string(),
            );
            put(
                c.i,
                c.j,
                "cross_genuine_count",
                c.cross_genuine_count.to_string(),
            );
            put(c.i, c.j, "accept_rate_vs_i", c.accept_rate_vs_i.to_string());
            put(c.i, c.j, "accept_rate_vs_j", c.accept_rate_vs_j.to_string());
            put(
                c.i,
                c.j,
                "cross_genuine_accept_rate",
                c.cross_genuine_accept_rate.to_string(),
            );
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Cross-instance cell from every ordered pair of distinct same-identity
/// samples, the first under instance `i`, the second under `j`.
pub(crate) fn cross_cell(
    corpus: &Corpus,
    pairs: &[(u32, u32)],
    i: usize,
    j: usize,
    threshold_i: f64,
    threshold_j: f64,
) -> OffDiagonalCell {
    let scores = pair_scores(corpus, i, j, pairs);
    let count = scores.len();
    let accepted_vs_i = scores.iter().filter(|&&s| s > threshold_i).count();
    let accepted_vs_j = scores.iter().filter(|&&s| s > threshold_j).count();
    let rate = |n: usize| {
        if count == 0 {
            0.0
        } else {
            n as f64 / count as f64
        }
    };
    OffDiagonalCell {
        i,
        j,
        instance_i: corpus.instances()[i].clone(),
        instance_j: corpus.instances()[j].clone(),
        max_cross_genuine: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        cross_genuine_count: count,
        accepted_vs_i,
        accepted_vs_j,
        accept_rate_vs_i: rate(accepted_vs_i),
        accept_rate_vs_j: rate(accepted_vs_j),
        cross_genuine_accept_rate: rate(accepted_vs_i.max(accepted_vs_j)),
    }
}

/// Instance-by-instance relationship matrix at `fmr_target`.
///
/// Diagonal cells calibrate each instance's threshold on its own impostor
/// scores. Off-diagonal cells score cross-instance genuine pairs and count
/// those strictly above each side's threshold.
pub fn relationship_matrix(
    corpus: &Corpus,
    protocol: &PairProtocol,
    fmr_target: f64,
) -> Result<RelationshipMatrix, EvalError> {
    check_instances(corpus)?;
    let needed = (1.0 / fmr_target).ceil() as usize;
    if fmr_target > 0.0 && fmr_target < 1.0 && protocol.impostor.len() < needed {
        return Err(EvalError::InsufficientImpostors {
            instance: corpus.instances()[0].clone(),
            count: protocol.impostor.len(),
            needed,
            fmr_target,
        });
    }
    let n = corpus.instances().len();

    let mut diagonal = Vec::with_capacity(n);
    for k in 0..n {
        let scores = same_instance_scores(corpus, k, protocol);
        let spec = fmr_threshold(&scores.impostor, fmr_target)?;
        let dp = d_prime(&scores)?;
        diagonal.push(DiagonalCell {
            index: k,
            instance: corpus.instances()[k].clone(),
            fmr_threshold: spec,
            genuine_mean: dp.genuine_mean,
            max_impostor: scores.max_impostor().unwrap_or(f64::NAN),
            d_prime: dp,
        });
    }

    let pairs = ordered_genuine_pairs(corpus.identity_ranges());
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let off_diagonal: Vec<OffDiagonalCell> = cells
        .par_iter()
        .map(|&(i, j)| {
            cross_cell(
                corpus,
                &pairs,
                i,
                j,
                diagonal[i].fmr_threshold.threshold,
                diagonal[j].fmr_threshold.threshold,
            )
        })
        .collect();

    let min_genuine_mean = diagonal
        .iter()
        .map(|d| d.genuine_mean)
        .fold(f64::INFINITY, f64::min);
    let max_off = off_diagonal
        .iter()
        .map(|c| c.max_cross_genuine)
        .fold(f64::NEG_INFINITY, f64::max);
    let summary = MatrixSummary {
        min_diagonal_threshold: diagonal
            .iter()
            .map(|d| d.fmr_threshold.threshold)
            .fold(f64::INFINITY, f64::min),
        max_off_diagonal_genuine: max_off,
        worst_accept_rate: off_diagonal
            .iter()
            .map(|c| c.cross_genuine_accept_rate)
            .fold(0.0, f64::max),
        min_diagonal_d_prime: diagonal
            .iter()
            .map(|d| d.d_prime.value)
            .fold(f64::INFINITY, f64::min),
        diagonal_dominance: min_genuine_mean > max_off,
    };
    Ok(RelationshipMatrix {
        n,
        fmr_target,
        instances: corpus.instances().to_vec(),
        diagonal,
        off_diagonal,
        summary,
        provenance: Provenance::new(corpus, protocol),
    })
}
