//! Genuine/impostor pair protocol over a sample list grouped by identity.

use std::ops::Range;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::sim::seed::stream_rng;

/// Default cap on sampled impostor pairs.
pub const DEFAULT_IMPOSTOR_CAP: usize = 1_000_000;

/// Sample-index pairs `(a, b)` with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProtocol {
    pub genuine: Vec<(u32, u32)>,
    pub impostor: Vec<(u32, u32)>,
    /// Number of cross-identity pairs before subsampling.
    pub impostor_population: u64,
    pub seed: u64,
}

impl PairProtocol {
    /// Genuine pairs are every within-identity pair of distinct samples.
    /// Impostor pairs are every cross-identity pair when there are at most
    /// `impostor_cap` of them, otherwise a seeded uniform subsample of exactly
    /// `impostor_cap` distinct pairs, listed in enumeration order.
    ///
    /// `identities` must partition `0..n` into contiguous, ascending ranges.
    pub fn build(identities: &[Range<usize>], impostor_cap: usize, seed: u64) -> Self {
        let n = identities.last().map_or(0, |r| r.end);
        let mut genuine = Vec::new();
        for r in identities {
            for a in r.clone() {
                for b in a + 1..r.end {
                    genuine.push((a as u32, b as u32));
                }
            }
        }

        // For sample a, partners are [end_of_identity(a), n).
        let mut ends = vec![0usize; n];
        for r in identities {
            for a in r.clone() {
                ends[a] = r.end;
            }
        }
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0u64);
        for &end in &ends {
            let last = *cumulative.last().expect("non-empty");
            cumulative.push(last + (n - end) as u64);
        }
        let population = *cumulative.last().expect("non-empty");

        let nth_pair = |k: u64| -> (u32, u32) {
            // Largest a with cumulative[a] <= k.
            let a = cumulative.partition_point(|&c| c <= k) - 1;
            let b = ends[a] + (k - cumulative[a]) as usize;
            (a as u32, b as u32)
        };

        let impostor = if population <= impostor_cap as u64 {
            (0..population).map(nth_pair).collect()
        } else {
            let mut rng = stream_rng(seed, "impostor-pairs", &[]);
            let len = usize::try_from(population).expect("pair population fits in usize");
            let mut picks: Vec<u64> = index::sample(&mut rng, len, impostor_cap)
                .into_iter()
                .map(|i| i as u64)
                .collect();
            picks.sort_unstable();
            picks.into_iter().map(nth_pair).collect()
        };

        Self {
            genuine,
            impostor,
            impostor_population: population,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ranges(sizes: &[usize]) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for &s in sizes {
            out.push(start..start + s);
            start += s;
        }
        out
    }

    fn brute_impostors(ids: &[Range<usize>]) -> Vec<(u32, u32)> {
        let n = ids.last().unwrap().end;
        let owner = |s: usize| ids.iter().position(|r| r.contains(&s)).unwrap();
        let mut out = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if owner(a) != owner(b) {
                    out.push((a as u32, b as u32));
                }
            }
        }
        out
    }

    #[test]
    fn full_enumeration_matches_brute_force() {
        let ids = ranges(&[3, 1, 4, 2]);
        let p = PairProtocol::build(&ids, usize::MAX, 0);
        assert_eq!(p.impostor, brute_impostors(&ids));
        assert_eq!(p.genuine.len(), 3 + 6 + 1);
        assert_eq!(p.impostor_population, p.impostor.len() as u64);
    }

    #[test]
    fn subsample_is_distinct_valid_and_seeded() {
        let ids = ranges(&[4; 50]);
        let all: HashSet<_> = brute_impostors(&ids).into_iter().collect();
        let p = PairProtocol::build(&ids, 1000, 9);
        assert_eq!(p.impostor.len(), 1000);
        let uniq: HashSet<_> = p.impostor.iter().copied().collect();
        assert_eq!(uniq.len(), 1000);
        assert!(uniq.is_subset(&all));
        assert_eq!(p, PairProtocol::build(&ids, 1000, 9));
        assert_ne!(p.impostor, PairProtocol::build(&ids, 1000, 10).impostor);
    }
}
