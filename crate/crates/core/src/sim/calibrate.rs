use serde::{Deserialize, Serialize};

use super::seed::derive_seed;
use super::world::{image_noise, latent_identity};
use super::{SimError, SimWorldConfig};
use crate::embedding::dot_f64;
use crate::metrics::{d_prime, ScoreSet};
use crate::pairs::PairProtocol;

/// Bisection bracket for the latent noise scale.
pub const SIGMA_SEARCH_RANGE: (f64, f64) = (0.05, 4.0);

/// A calibration is accepted when the simulated d-prime is this close to target.
pub const CALIBRATION_TOLERANCE: f64 = 0.25;

const CALIBRATION_IMPOSTOR_CAP: usize = 200_000;
const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub sigma: f64,
    pub d_prime: f64,
    pub iterations: usize,
}

/// Inner products that determine every same-instance score as a function of
/// the noise scale.
///
/// An orthogonal transform preserves inner products, so the same-instance
/// cosine between captures `a` and `b` equals the latent cosine
/// `<u_a, u_b> / (|u_a| |u_b|)` with `u = v + s n`. Expanding that in `s`
/// leaves a handful of sigma-independent dot products per pair.
struct LatentGeometry {
    /// Per sample: identity index, `<v, n>`, `<n, n>`, `<v, v>`.
    samples: Vec<(usize, f64, f64, f64)>,
    /// Per pair: sample a, sample b, `<v_a, v_b>`, `<v_a, n_b>`, `<n_a, v_b>`, `<n_a, n_b>`.
    genuine: Vec<(usize, usize, [f64; 4])>,
    impostor: Vec<(usize, usize, [f64; 4])>,
    multipliers: Vec<f64>,
    inv_sqrt_dim: f64,
}

impl LatentGeometry {
    fn build(cfg: &SimWorldConfig) -> Result<Self, SimError> {
        let m = cfg.images_per_identity;
        let latents: Vec<Vec<f64>> = (0..cfg.num_identities)
            .map(|i| latent_identity(cfg, i))
            .collect();
        let mut noises = Vec::with_capacity(cfg.num_identities * m);
        let mut samples = Vec::with_capacity(cfg.num_identities * m);
        for (i, v) in latents.iter().enumerate() {
            for j in 0..m {
                let n = image_noise(cfg, i, j);
                samples.push((i, dot_f64(v, &n), dot_f64(&n, &n), dot_f64(v, v)));
                noises.push(n);
            }
        }
        let unit = SimWorldConfig {
            sigma: 1.0,
            ..cfg.clone()
        };
        let multipliers = (0..cfg.num_identities)
            .map(|i| unit.effective_sigma(i, None))
            .collect::<Result<Vec<_>, _>>()?;

        let ranges: Vec<_> = (0..cfg.num_identities)
            .map(|i| i * m..(i + 1) * m)
            .collect();
        let protocol = PairProtocol::build(
            &ranges,
            CALIBRATION_IMPOSTOR_CAP,
            derive_seed(cfg.master_seed, "calibration", &[]),
        );
        let terms = |pairs: &[(u32, u32)]| -> Vec<(usize, usize, [f64; 4])> {
            pairs
                .iter()
                .map(|&(a, b)| {
                    let (a, b) = (a as usize, b as usize);
                    let (va, vb) = (&latents[samples[a].0], &latents[samples[b].0]);
                    let (na, nb) = (&noises[a], &noises[b]);
                    (
                        a,
                        b,
                        [
                            dot_f64(va, vb),
                            dot_f64(va, nb),
                            dot_f64(na, vb),
                            dot_f64(na, nb),
                        ],
                    )
                })
                .collect()
        };
        Ok(Self {
            genuine: terms(&protocol.genuine),
            impostor: terms(&protocol.impostor),
            samples,
            multipliers,
            inv_sqrt_dim: 1.0 / (cfg.dim as f64).sqrt(),
        })
    }

    fn scores(&self, sigma: f64) -> ScoreSet {
        let scale: Vec<f64> = self
            .samples
            .iter()
            .map(|&(i, ..)| sigma * self.multipliers[i] * self.inv_sqrt_dim)
            .collect();
        let sq_norm: Vec<f64> = self
            .samples
            .iter()
            .zip(&scale)
            .map(|(&(_, vn, nn, vv), &s)| vv + 2.0 * s * vn + s * s * nn)
            .collect();
        let score = |&(a, b, t): &(usize, usize, [f64; 4])| {
            let (sa, sb) = (scale[a], scale[b]);
            let dot = t[0] + sb * t[1] + sa * t[2] + sa * sb * t[3];
            (dot / (sq_norm[a] * sq_norm[b]).sqrt()).clamp(-1.0, 1.0)
        };
        ScoreSet::new(
            self.genuine.iter().map(score).collect(),
            self.impostor.iter().map(score).collect(),
        )
    }

    fn d_prime(&self, sigma: f64) -> Result<f64, SimError> {
        Ok(d_prime(&self.scores(sigma))?.value)
    }
}

/// Finds the latent noise scale at which the same-instance d-prime of the
/// configured population is `target_dprime` (within [`CALIBRATION_TOLERANCE`]).
///
/// Bisection over [`SIGMA_SEARCH_RANGE`]; d-prime falls as noise grows. The
/// config's own `sigma` is ignored; its seed, dimension, population and group
/// multipliers define the evaluation corpus.
pub fn calibrate_sigma(
    config: &SimWorldConfig,
    target_dprime: f64,
) -> Result<CalibrationOutcome, SimError> {
    if !(target_dprime.is_finite() && target_dprime > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "target d-prime must be positive, got {target_dprime}"
        )));
    }
    let mut probe = config.clone();
    probe.sigma = 1.0;
    probe.validate()?;
    if probe.images_per_identity < 2 {
        return Err(SimError::InvalidConfig(
            "calibration needs at least 2 images per identity".into(),
        ));
    }
    let geometry = LatentGeometry::build(&probe)?;

    let (mut lo, mut hi) = SIGMA_SEARCH_RANGE;
    let d_max = geometry.d_prime(lo)?;
    let d_min = geometry.d_prime(hi)?;
    if target_dprime > d_max + CALIBRATION_TOLERANCE
        || target_dprime < d_min - CALIBRATION_TOLERANCE
    {
        return Err(SimError::Unreachable {
            target: target_dprime,
            min: d_min,
            max: d_max,
        });
    }

    let mut best = (f64::INFINITY, lo, d_max);
    for iteration in 1..=MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let d = geometry.d_prime(mid)?;
        let gap = (d - target_dprime).abs();
        if gap < best.0 {
            best = (gap, mid, d);
        }
        if gap <= 1e-4 || hi - lo < 1e-10 {
            return finish(best, iteration, target_dprime, d_min, d_max);
        }
        if d > target_dprime {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    finish(best, MAX_ITERATIONS, target_dprime, d_min, d_max)
}

fn finish(
    (gap, sigma, d): (f64, f64, f64),
    iterations: usize,
    target: f64,
    min: f64,
    max: f64,
) -> Result<CalibrationOutcome, SimError> {
    if gap > CALIBRATION_TOLERANCE {
        return Err(SimError::Unreachable { target, min, max });
    }
    Ok(CalibrationOutcome {
        sigma,
        d_prime: d,
        iterations,
    })
}
