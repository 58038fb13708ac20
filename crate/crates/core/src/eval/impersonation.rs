use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{corpus_protocol, same_instance_scores, EvalError};
use crate::ids::ModelInstanceId;
use crate::lifecycle::{System, VerificationDecision};
use crate::metrics::{fmr_threshold, ThresholdSpec};
use crate::pairs::DEFAULT_IMPOSTOR_CAP;
use crate::registry::{Registry, ThresholdMode};
use crate::sim::seed::derive_seed;
use crate::sim::{
    calibrate_sigma, identity_key, CaptureDescriptor, Corpus, SimWorld, SimWorldConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioPreset {
    StealRevokeReplay,
    StealNoRevoke,
    RevokeNoSteal,
}

impl std::str::FromStr for ScenarioPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "steal-revoke-replay" => Ok(Self::StealRevokeReplay),
            "steal-no-revoke" => Ok(Self::StealNoRevoke),
            "revoke-no-steal" => Ok(Self::RevokeNoSteal),
            other => Err(format!(
                "unknown preset {other:?} (steal-revoke-replay|steal-no-revoke|revoke-no-steal)"
            )),
        }
    }
}

impl std::fmt::Display for ScenarioPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::StealRevokeReplay => "steal-revoke-replay",
            Self::StealNoRevoke => "steal-no-revoke",
            Self::RevokeNoSteal => "revoke-no-steal",
        })
    }
}

/// What happens to one identity, and when. Times are abstract steps; at equal
/// times steals run before revocations, revocations before replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEvent {
    pub identity: String,
    #[serde(default)]
    pub steal_at: Option<u32>,
    #[serde(default)]
    pub revoke_at: Option<u32>,
    #[serde(default)]
    pub replay_at: Option<u32>,
    /// Capture presented at revocation; defaults to the identity's `img1`.
    #[serde(default)]
    pub fresh_capture: Option<CaptureDescriptor>,
    /// Capture the legitimate user verifies with; defaults to `img2`.
    #[serde(default)]
    pub probe_capture: Option<CaptureDescriptor>,
}

impl ScenarioEvent {
    fn fresh(&self) -> CaptureDescriptor {
        self.fresh_capture
            .clone()
            .unwrap_or_else(|| CaptureDescriptor::keyed(self.identity.clone(), "img1"))
    }

    fn probe(&self) -> CaptureDescriptor {
        self.probe_capture
            .clone()
            .unwrap_or_else(|| CaptureDescriptor::keyed(self.identity.clone(), "img2"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub events: Vec<ScenarioEvent>,
}

impl Scenario {
    pub fn preset(preset: ScenarioPreset, identities: &[String]) -> Self {
        let (steal, revoke, replay) = match preset {
            ScenarioPreset::StealRevokeReplay => (Some(0), Some(1), Some(2)),
            ScenarioPreset::StealNoRevoke => (Some(0), None, Some(2)),
            ScenarioPreset::RevokeNoSteal => (None, Some(1), None),
        };
        Self {
            events: identities
                .iter()
                .map(|id| ScenarioEvent {
                    identity: id.clone(),
                    steal_at: steal,
                    revoke_at: revoke,
                    replay_at: replay,
                    fresh_capture: None,
                    probe_capture: None,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::InvalidScenario(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpersonationReport {
    pub preset: Option<ScenarioPreset>,
    pub identities: usize,
    pub revocations: usize,
    pub attacker_attempts: usize,
    pub attacker_accepts: usize,
    pub legitimate_before_accepts: usize,
    pub legitimate_after_accepts: usize,
    pub legitimate_before_rate: f64,
    pub legitimate_after_rate: f64,
    /// Decisions of other identities compared after each revocation.
    pub non_interference_checks: usize,
    pub non_interference_violations: usize,
    pub thresholds: Vec<(ModelInstanceId, ThresholdSpec)>,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Steal,
    Revoke,
    Replay,
}

fn bitwise_equal(a: &VerificationDecision, b: &VerificationDecision) -> bool {
    a.accepted == b.accepted
        && a.score.to_bits() == b.score.to_bits()
        && a.instance_used == b.instance_used
        && a.threshold_used.to_bits() == b.threshold_used.to_bits()
}

/// Runs a theft/revocation scenario against an enrolled system.
///
/// Every scenario identity verifies its probe capture before and after the
/// scenario. Stolen templates are replayed through
/// [`System::verify_raw_template`]. After each revocation, every other
/// scenario identity's decision on a fixed raw probe is recomputed and must be
/// bitwise unchanged.
pub fn impersonation_experiment(
    system: &System,
    scenario: &Scenario,
) -> Result<ImpersonationReport, EvalError> {
    let events = &scenario.events;
    let mut seen = HashSet::new();
    for e in events {
        if !seen.insert(e.identity.as_str()) {
            return Err(EvalError::InvalidScenario(format!(
                "identity {:?} listed twice",
                e.identity
            )));
        }
        if system.lookup(&e.identity).is_err() {
            return Err(EvalError::ScenarioReferencesUnknownIdentity(
                e.identity.clone(),
            ));
        }
        if let Some(replay) = e.replay_at {
            if e.steal_at.is_none_or(|s| s >= replay) {
                return Err(EvalError::InvalidScenario(format!(
                    "identity {:?} replays a template that was not stolen earlier",
                    e.identity
                )));
            }
        }
    }

    let legit = |system: &System| -> Result<usize, EvalError> {
        let mut accepted = 0;
        for e in events {
            if system.verify(&e.identity, &e.probe())?.accepted {
                accepted += 1;
            }
        }
        Ok(accepted)
    };
    let legitimate_before_accepts = legit(system)?;

    // Fixed probe vectors for the non-interference check.
    let mut probes = Vec::with_capacity(events.len());
    for e in events {
        let active = system.lookup(&e.identity)?.active_instance;
        probes.push(
            system
                .extractor()
                .extract(&e.probe(), &active)?
                .into_components(),
        );
    }
    let decide = |i: usize| system.verify_raw_template(&events[i].identity, &probes[i]);
    let mut decisions = (0..events.len())
        .map(decide)
        .collect::<Result<Vec<_>, _>>()?;

    let mut actions: Vec<(u32, Action, usize)> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        actions.extend(e.steal_at.map(|t| (t, Action::Steal, i)));
        actions.extend(e.revoke_at.map(|t| (t, Action::Revoke, i)));
        actions.extend(e.replay_at.map(|t| (t, Action::Replay, i)));
    }
    actions.sort();

    let mut stolen: HashMap<usize, Vec<f32>> = HashMap::new();
    let (mut revocations, mut attempts, mut accepts) = (0, 0, 0);
    let (mut checks, mut violations) = (0, 0);
    for (_, action, i) in actions {
        let e = &events[i];
        match action {
            Action::Steal => {
                let template = system.lookup(&e.identity)?.template.into_components();
                stolen.insert(i, template);
            }
            Action::Revoke => {
                system.revoke(&e.identity, &e.fresh())?;
                revocations += 1;
                for (b, previous) in decisions.iter_mut().enumerate() {
                    let now = decide(b)?;
                    if b != i {
                        checks += 1;
                        if !bitwise_equal(previous, &now) {
                            violations += 1;
                        }
                    }
                    *previous = now;
                }
            }
            Action::Replay => {
                attempts += 1;
                if system
                    .verify_raw_template(&e.identity, &stolen[&i])?
                    .accepted
                {
                    accepts += 1;
                }
            }
        }
    }

    let legitimate_after_accepts = legit(system)?;
    let n = events.len();
    let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let thresholds = system.with_registry(|r| {
        r.instances()
            .iter()
            .filter_map(|i| r.threshold_for(&i.id).ok().map(|t| (i.id.clone(), t)))
            .collect()
    });
    Ok(ImpersonationReport {
        preset: None,
        identities: n,
        revocations,
        attacker_attempts: attempts,
        attacker_accepts: accepts,
        legitimate_before_accepts,
        legitimate_after_accepts,
        legitimate_before_rate: rate(legitimate_before_accepts),
        legitimate_after_rate: rate(legitimate_after_accepts),
        non_interference_checks: checks,
        non_interference_violations: violations,
        thresholds,
        seed: None,
        config_digest: None,
    })
}

/// A synthetic world for scenarios: the first `scenario_identities`
/// identities are enrolled users, the next `calibration_identities` are held
/// out to calibrate each instance's threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSetup {
    pub world: SimWorldConfig,
    pub scenario_identities: usize,
    pub calibration_identities: usize,
    pub fmr_target: f64,
}

impl ScenarioSetup {
    pub const DEFAULT_CALIBRATION_IDENTITIES: usize = 300;
    pub const IMAGES_PER_IDENTITY: usize = 4;

    /// Default-shaped world (4 images per identity) with the noise scale
    /// calibrated to `target_dprime`.
    pub fn calibrated(
        instances: usize,
        scenario_identities: usize,
        dim: usize,
        seed: u64,
        target_dprime: f64,
        fmr_target: f64,
    ) -> Result<Self, EvalError> {
        let calibration_identities = Self::DEFAULT_CALIBRATION_IDENTITIES;
        let mut world = SimWorldConfig::new(
            instances,
            scenario_identities + calibration_identities,
            Self::IMAGES_PER_IDENTITY,
            1.0,
            seed,
        )
        .with_dim(dim);
        world.sigma = calibrate_sigma(&world, target_dprime)?.sigma;
        Ok(Self {
            world,
            scenario_identities,
            calibration_identities,
            fmr_target,
        })
    }

    pub fn scenario_identity_names(&self) -> Vec<String> {
        (0..self.scenario_identities as u32)
            .map(identity_key)
            .collect()
    }
}

/// Builds an in-memory system over the setup's world with every instance
/// registered and calibrated on the held-out identities.
pub fn prepare_scenario_system(setup: &ScenarioSetup) -> Result<System, EvalError> {
    if setup.world.num_identities < setup.scenario_identities + setup.calibration_identities {
        return Err(EvalError::InvalidScenario(
            "world has fewer identities than scenario plus calibration".into(),
        ));
    }
    if setup.world.images_per_identity < 3 {
        return Err(EvalError::InvalidScenario(
            "scenarios need at least 3 images per identity".into(),
        ));
    }
    let world = Arc::new(SimWorld::new(setup.world.clone())?);
    let start = setup.scenario_identities;
    let thresholds = calibrate_instance_thresholds(
        &world,
        start..start + setup.calibration_identities,
        setup.fmr_target,
    )?;
    let system = System::in_memory(
        world,
        Registry::new(setup.world.dim, ThresholdMode::PerInstance),
    )?;
    for (id, spec) in thresholds {
        system.register_instance(id, Some(spec))?;
    }
    Ok(system)
}

/// Per-instance FMR thresholds from the same-instance impostor scores of the
/// identities in `identities`.
pub fn calibrate_instance_thresholds(
    world: &SimWorld,
    identities: Range<usize>,
    fmr_target: f64,
) -> Result<Vec<(ModelInstanceId, ThresholdSpec)>, EvalError> {
    let calibration = Corpus::synthesize_range(world, identities)?;
    let protocol = corpus_protocol(
        &calibration,
        DEFAULT_IMPOSTOR_CAP,
        derive_seed(world.config().master_seed, "threshold-calibration", &[]),
    );
    let needed = (1.0 / fmr_target).ceil() as usize;
    let mut out = Vec::with_capacity(calibration.instances().len());
    for (k, id) in calibration.instances().iter().enumerate() {
        let scores = same_instance_scores(&calibration, k, &protocol);
        if scores.impostor.len() < needed {
            return Err(EvalError::InsufficientImpostors {
                instance: id.clone(),
                count: scores.impostor.len(),
                needed,
                fmr_target,
            });
        }
        out.push((id.clone(), fmr_threshold(&scores.impostor, fmr_target)?));
    }
    Ok(out)
}

/// Thresholds for a world's instances calibrated on `count` synthetic
/// identities that lie beyond the world's own identity range, so no capture a
/// client can name takes part in calibration.
pub fn calibrate_held_out(
    config: &SimWorldConfig,
    count: usize,
    fmr_target: f64,
) -> Result<Vec<(ModelInstanceId, ThresholdSpec)>, EvalError> {
    let mut extended = config.clone();
    extended.num_identities += count;
    let world = SimWorld::new(extended)?;
    calibrate_instance_thresholds(
        &world,
        config.num_identities..config.num_identities + count,
        fmr_target,
    )
}

/// Enrolls each identity from its `img0` capture.
pub fn enroll_population(system: &System, identities: &[String]) -> Result<(), EvalError> {
    for id in identities {
        system.enroll(id, &CaptureDescriptor::keyed(id.clone(), "img0"))?;
    }
    Ok(())
}

/// Prepare, enroll and run one preset end to end.
pub fn run_preset(
    setup: &ScenarioSetup,
    preset: ScenarioPreset,
) -> Result<ImpersonationReport, EvalError> {
    let system = prepare_scenario_system(setup)?;
    let ids = setup.scenario_identity_names();
    enroll_population(&system, &ids)?;
    let mut report = impersonation_experiment(&system, &Scenario::preset(preset, &ids))?;
    report.preset = Some(preset);
    report.seed = Some(setup.world.master_seed);
    report.config_digest = Some(setup.world.digest());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> ScenarioSetup {
        ScenarioSetup {
            world: SimWorldConfig::new(4, 60, 4, 0.5, 3).with_dim(64),
            scenario_identities: 20,
            calibration_identities: 40,
            fmr_target: 1e-3,
        }
    }

    #[test]
    fn presets_behave() {
        let s = small_setup();
        let replay = run_preset(&s, ScenarioPreset::StealRevokeReplay).unwrap();
        assert_eq!(replay.attacker_attempts, 20);
        assert!(replay.attacker_accepts <= 1);
        assert_eq!(replay.revocations, 20);
        assert_eq!(replay.non_interference_checks, 20 * 19);
        assert_eq!(replay.non_interference_violations, 0);

        let baseline = run_preset(&s, ScenarioPreset::StealNoRevoke).unwrap();
        assert_eq!(baseline.attacker_accepts, 20);

        let live = run_preset(&s, ScenarioPreset::RevokeNoSteal).unwrap();
        assert_eq!(live.attacker_attempts, 0);
        assert!(live.legitimate_after_accepts + 1 >= live.legitimate_before_accepts);
    }

    #[test]
    fn held_out_calibration_matches_extended_world() {
        let cfg = SimWorldConfig::new(2, 10, 3, 0.5, 8).with_dim(32);
        let a = calibrate_held_out(&cfg, 30, 1e-2).unwrap();
        let mut ext = cfg.clone();
        ext.num_identities = 40;
        let b = calibrate_instance_thresholds(&SimWorld::new(ext).unwrap(), 10..40, 1e-2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn scenario_validation() {
        let s = small_setup();
        let system = prepare_scenario_system(&s).unwrap();
        enroll_population(&system, &["id0".to_owned()]).unwrap();
        let ghost = Scenario::preset(ScenarioPreset::RevokeNoSteal, &["id7".to_owned()]);
        assert!(matches!(
            impersonation_experiment(&system, &ghost),
            Err(EvalError::ScenarioReferencesUnknownIdentity(_))
        ));
        let bad = Scenario::from_json(r#"{"events":[{"identity":"id0","replay_at":3}]}"#).unwrap();
        assert!(matches!(
            impersonation_experiment(&system, &bad),
            Err(EvalError::InvalidScenario(_))
        ));
        assert!(Scenario::from_json(r#"{"events":[{"identity":"id0","when":3}]}"#).is_err());
        assert_eq!(
            "steal-no-revoke"
                .parse::<ScenarioPreset>()
                .unwrap()
                .to_string(),
            "steal-no-revoke"
        );
    }
}
