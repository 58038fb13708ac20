//! Registry invariants under random mutation sequences, plus persistence
//! round trips.

use std::fs::OpenOptions;
use std::io::Write;

use proptest::prelude::*;
use revbio_core::registry::{snapshot_load, snapshot_save, Mutation, Store};
use revbio_core::{ModelInstanceId, Registry, RegistryError, ThresholdMode};

const DIM: usize = 6;

#[derive(Debug, Clone)]
enum Op {
    Register(u8),
    Enroll(u8, Vec<f32>),
    Revoke(u8, Vec<f32>),
    /// Revocation naming an instance directly, possibly one already used.
    RevokeTo(u8, u8),
    BadDim(u8),
}

fn template() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, DIM)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (0u8..8).prop_map(Op::Register),
        3 => (0u8..6, template()).prop_map(|(i, t)| Op::Enroll(i, t)),
        4 => (0u8..6, template()).prop_map(|(i, t)| Op::Revoke(i, t)),
        1 => (0u8..6, 0u8..8).prop_map(|(i, k)| Op::RevokeTo(i, k)),
        1 => (0u8..6).prop_map(Op::BadDim),
    ]
}

fn identity(i: u8) -> String {
    format!("id-{i}")
}

fn instance(k: u8) -> ModelInstanceId {
    ModelInstanceId::new(format!("m{k}"))
}

fn to_mutation(reg: &Registry, op: &Op) -> Option<Mutation> {
    let at = reg.next_timestamp(1);
    Some(match op {
        Op::Register(k) => Mutation::RegisterInstance {
            id: instance(*k),
            threshold: None,
            at,
        },
        Op::Enroll(i, t) => Mutation::Enroll {
            identity: identity(*i),
            instance: reg.assign_next_instance(&identity(*i)).ok()?,
            template: t.clone(),
            at,
        },
        Op::Revoke(i, t) => {
            let id = identity(*i);
            Mutation::Revoke {
                old_instance: reg.lookup(&id).ok()?.active_instance.clone(),
                new_instance: reg.assign_next_instance(&id).ok()?,
                identity: id,
                template: t.clone(),
                at,
            }
        }
        Op::RevokeTo(i, k) => {
            let id = identity(*i);
            Mutation::Revoke {
                old_instance: reg.lookup(&id).ok()?.active_instance.clone(),
                new_instance: instance(*k),
                identity: id,
                template: vec![1.0; DIM],
                at,
            }
        }
        Op::BadDim(i) => Mutation::Enroll {
            identity: identity(*i),
            instance: instance(0),
            template: vec![1.0; DIM + 1],
            at,
        },
    })
}

fn check_invariants(reg: &Registry) -> Result<(), TestCaseError> {
    for rec in reg.identities() {
        let mut used: Vec<&ModelInstanceId> =
            rec.revocation_history.iter().map(|e| &e.instance).collect();
        prop_assert!(
            !used.contains(&&rec.active_instance),
            "{} reuses its active instance",
            rec.identity_id
        );
        used.push(&rec.active_instance);
        let n = used.len();
        used.sort();
        used.dedup();
        prop_assert_eq!(
            used.len(),
            n,
            "{} bound twice to one instance",
            &rec.identity_id
        );
        prop_assert!(rec
            .revocation_history
            .windows(2)
            .all(|w| w[0].revoked_at < w[1].revoked_at));
        let norm: f64 = rec
            .template
            .components()
            .iter()
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_sequences_keep_invariants(ops in prop::collection::vec(op(), 1..120)) {
        let dir = tempfile::tempdir().unwrap();
        let (mut store, mut reg) = Store::open(dir.path(), DIM, ThresholdMode::PerInstance).unwrap();

        for op in &ops {
            let Some(m) = to_mutation(&reg, op) else { continue };
            let before = reg.clone();
            match reg.validate(&m) {
                Ok(()) => {
                    store.append(reg.seq() + 1, &m).unwrap();
                    reg.apply(&m).unwrap();
                    prop_assert_eq!(reg.seq(), before.seq() + 1);
                    if let Mutation::Revoke { identity, .. } = &m {
                        for other in before.identities().filter(|r| &r.identity_id != identity) {
                            prop_assert_eq!(reg.lookup(&other.identity_id).unwrap(), other);
                        }
                        prop_assert_eq!(
                            reg.lookup(identity).unwrap().revocation_history.len(),
                            before.lookup(identity).unwrap().revocation_history.len() + 1
                        );
                    }
                }
                Err(e) => {
                    prop_assert!(reg.apply(&m).is_err());
                    prop_assert_eq!(&reg, &before);
                    if let Op::RevokeTo(i, k) = op {
                        if reg.lookup(&identity(*i)).unwrap().has_used(&instance(*k)) {
                            prop_assert!(matches!(e, RegistryError::InstanceReuse { .. }), "{e:?}");
                        }
                    }
                }
            }
            check_invariants(&reg)?;
        }

        // Journal replay reproduces the in-memory state.
        drop(store);
        let (mut store, replayed) = Store::open(dir.path(), DIM, ThresholdMode::PerInstance).unwrap();
        prop_assert_eq!(&replayed, &reg);

        // Snapshot round trip is lossless and byte-stable.
        let snap = dir.path().join("copy.snap");
        snapshot_save(&reg, &snap).unwrap();
        let loaded = snapshot_load(&snap).unwrap();
        prop_assert_eq!(&loaded, &reg);
        let first = std::fs::read(&snap).unwrap();
        snapshot_save(&loaded, &snap).unwrap();
        prop_assert_eq!(first, std::fs::read(&snap).unwrap());

        // A torn trailing journal line is dropped on reopen.
        store.checkpoint(&reg).unwrap();
        drop(store);
        let mut journal = OpenOptions::new().append(true).open(dir.path().join("journal.jsonl")).unwrap();
        journal.write_all(br#"{"seq":999999,"mutation":{"kind":"enr"#).unwrap();
        drop(journal);
        let (_, reopened) = Store::open(dir.path(), DIM, ThresholdMode::PerInstance).unwrap();
        prop_assert_eq!(&reopened, &reg);
    }

    #[test]
    fn pool_exhausts_after_every_instance_is_used(n in 1u8..6) {
        let mut reg = Registry::new(DIM, ThresholdMode::PerInstance);
        for k in 0..n {
            reg.register_instance(instance(k), None, 1).unwrap();
        }
        let id = identity(0);
        let first = reg.assign_next_instance(&id).unwrap();
        let at = reg.next_timestamp(1);
        reg.apply(&Mutation::Enroll { identity: id.clone(), instance: first, template: vec![1.0; DIM], at }).unwrap();
        for _ in 1..n {
            let old = reg.lookup(&id).unwrap().active_instance.clone();
            let new = reg.assign_next_instance(&id).unwrap();
            let at = reg.next_timestamp(1);
            reg.apply(&Mutation::Revoke { identity: id.clone(), old_instance: old, new_instance: new, template: vec![1.0; DIM], at }).unwrap();
        }
        prop_assert_eq!(reg.lookup(&id).unwrap().revocation_history.len(), n as usize - 1);
        prop_assert!(matches!(reg.assign_next_instance(&id), Err(RegistryError::InstancePoolExhausted(_))));
    }
}

#[test]
fn interior_journal_corruption_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut store, mut reg) = Store::open(dir.path(), DIM, ThresholdMode::PerInstance).unwrap();
    for k in 0..3 {
        let m = Mutation::RegisterInstance {
            id: instance(k),
            threshold: None,
            at: reg.next_timestamp(1),
        };
        store.append(reg.seq() + 1, &m).unwrap();
        reg.apply(&m).unwrap();
    }
    drop(store);
    let path = dir.path().join("journal.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1] = "{not json";
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        Store::open(dir.path(), DIM, ThresholdMode::PerInstance),
        Err(RegistryError::CorruptJournal(_))
    ));
}
