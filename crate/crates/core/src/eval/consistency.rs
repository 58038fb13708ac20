use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{check_instances, same_instance_scores, EvalError, Provenance};
use crate::ids::ModelInstanceId;
use crate::metrics::{d_prime, mean_and_std, verification_accuracy, DPrimeValue, ScoreSet};
use crate::pairs::PairProtocol;
use crate::sim::seed::stream_rng;
use crate::sim::Corpus;

/// Mean and unbiased sample standard deviation across instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Self {
        let (mean, std) = mean_and_std(xs);
        Self { mean, std }
    }

    /// `std / mean`, the coefficient of variation.
    pub fn relative_std(&self) -> f64 {
        self.std / self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceConsistency {
    pub instance: ModelInstanceId,
    /// Mean k-fold verification accuracy, percent.
    pub accuracy: f64,
    pub accuracy_per_fold: Vec<f64>,
    pub d_prime: DPrimeValue,
    pub group_d_prime: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub folds: usize,
    pub accuracy_pairs: usize,
    pub instances: Vec<InstanceConsistency>,
    pub accuracy: Spread,
    pub d_prime: Spread,
    pub group_d_prime: BTreeMap<String, Spread>,
    pub provenance: Provenance,
}

impl ConsistencyReport {
    /// CSV with one row per instance: accuracy, d-prime, then one column per group.
    pub fn to_csv(&self) -> String {
        let groups: Vec<&String> = self.group_d_prime.keys().collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["instance".to_owned(), "accuracy".into(), "d_prime".into()];
        header.extend(groups.iter().map(|g| format!("d_prime_{g}")));
        w.write_record(&header).expect("in-memory csv");
        let mut row = |name: String, acc: f64, d: f64, per_group: Vec<f64>| {
            let mut rec = vec![name, acc.to_string(), d.to_string()];
            rec.extend(per_group.iter().map(f64::to_string));
            w.write_record(&rec).expect("in-memory csv");
        };
        for inst in &self.instances {
            let per_group = groups.iter().map(|g| inst.group_d_prime[*g]).collect();
            row(
                inst.instance.to_string(),
                inst.accuracy,
                inst.d_prime.value,
                per_group,
            );
        }
        row(
            "mean".into(),
            self.accuracy.mean,
            self.d_prime.mean,
            groups.iter().map(|g| self.group_d_prime[*g].mean).collect(),
        );
        row(
            "std".into(),
            self.accuracy.std,
            self.d_prime.std,
            groups.iter().map(|g| self.group_d_prime[*g].std).collect(),
        );
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

/// Positions (into `protocol.impostor`) of the impostor pairs used for the
/// accuracy protocol: as many as there are genuine pairs, seeded.
fn balanced_impostors(protocol: &PairProtocol) -> Vec<usize> {
    let (g, m) = (protocol.genuine.len(), protocol.impostor.len());
    if g >= m {
        return (0..m).collect();
    }
    let mut rng = stream_rng(protocol.seed, "accuracy-pairs", &[]);
    let mut picks = index::sample(&mut rng, m, g).into_vec();
    picks.sort_unstable();
    picks
}

/// Per-instance verification accuracy and d-prime on identical pair lists,
/// with their spread across instances.
///
/// d-prime uses every protocol pair. Accuracy uses all genuine pairs plus an
/// equally sized seeded subset of the impostor pairs, dealt round-robin into
/// `folds` folds. Group d-prime restricts genuine pairs to the group's
/// identities and impostor pairs to pairs with both identities in the group.
pub fn consistency_report(
    corpus: &Corpus,
    protocol: &PairProtocol,
    folds: usize,
) -> Result<ConsistencyReport, EvalError> {
    check_instances(corpus)?;
    let owner: Vec<usize> = {
        let mut owner = vec![0; corpus.sample_count()];
        for (i, r) in corpus.identity_ranges().iter().enumerate() {
            owner[r.clone()].iter_mut().for_each(|o| *o = i);
        }
        owner
    };
    let group_of = |s: u32| corpus.identity_group(owner[s as usize]);
    let groups = corpus.group_labels();
    let group_pairs: Vec<(Vec<usize>, Vec<usize>)> = groups
        .iter()
        .map(|g| {
            let g = Some(g.as_str());
            let gen = (0..protocol.genuine.len())
                .filter(|&p| group_of(protocol.genuine[p].0) == g)
                .collect();
            let imp = (0..protocol.impostor.len())
                .filter(|&p| {
                    let (a, b) = protocol.impostor[p];
                    group_of(a) == g && group_of(b) == g
                })
                .collect();
            (gen, imp)
        })
        .collect();
    let accuracy_impostors = balanced_impostors(protocol);

    let mut instances = Vec::with_capacity(corpus.instances().len());
    for (k, id) in corpus.instances().iter().enumerate() {
        let scores = same_instance_scores(corpus, k, protocol);
        let dp = d_prime(&scores)?;

        let mut pairs: Vec<(f64, bool)> = scores.genuine.iter().map(|&s| (s, true)).collect();
        pairs.extend(
            accuracy_impostors
                .iter()
                .map(|&p| (scores.impostor[p], false)),
        );
        let acc = verification_accuracy(&pairs, folds)?;

        let mut group_d_prime = BTreeMap::new();
        for (g, (gen, imp)) in groups.iter().zip(&group_pairs) {
            let subset = ScoreSet::new(
                gen.iter().map(|&p| scores.genuine[p]).collect(),
                imp.iter().map(|&p| scores.impostor[p]).collect(),
            );
            group_d_prime.insert(g.clone(), d_prime(&subset)?.value);
        }
        instances.push(InstanceConsistency {
            instance: id.clone(),
            accuracy: acc.mean_accuracy,
            accuracy_per_fold: acc.per_fold,
            d_prime: dp,
            group_d_prime,
        });
    }

    let collect = |f: &dyn Fn(&InstanceConsistency) -> f64| {
        Spread::of(&instances.iter().map(f).collect::<Vec<_>>())
    };
    let group_spread = groups
        .iter()
        .map(|g| (g.clone(), collect(&|i| i.group_d_prime[g])))
        .collect();
    Ok(ConsistencyReport {
        folds,
        accuracy_pairs: protocol.genuine.len() + accuracy_impostors.len(),
        accuracy: collect(&|i| i.accuracy),
        d_prime: collect(&|i| i.d_prime.value),
        group_d_prime: group_spread,
        instances,
        provenance: Provenance::new(corpus, protocol),
    })
}
