//! Randomized propose/verify/merge/rollback sequences against the merge gate.

use flywheel_core::constraints::ConstraintSet;
use flywheel_core::mapping::SculptDirective;
use flywheel_core::refine::{Action, Mode};
use flywheel_core::session::{Session, SessionConfig};
use flywheel_core::toyworld::{StateVec, WorldSpec};
use flywheel_core::triage::{Author, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn armed_session() -> Session {
    let cfg = SessionConfig {
        verify_budget: 400,
        ..SessionConfig::default()
    };
    let mut s = Session::create(
        "gate",
        WorldSpec::preset("two-ridges").unwrap(),
        ConstraintSet::default(),
        cfg,
    )
    .unwrap();
    s.audit(4000, 5, None).unwrap();
    let clusters = s.triage().unwrap();
    assert!(!clusters.is_empty());
    for c in clusters {
        if s.inherit_label(c.id).unwrap().is_none() {
            s.label(c.id, Verdict::Confirmed, Author::Human, "")
                .unwrap();
        }
    }
    s
}

fn random_action(rng: &mut ChaCha8Rng) -> (Mode, Action) {
    let pt = |rng: &mut ChaCha8Rng| StateVec::new(vec![rng.random::<f64>(), rng.random::<f64>()]);
    match rng.random_range(0..3) {
        0 => (
            Mode::PatchNegative,
            Action::PatchNegative {
                anchors: (0..rng.random_range(1..4)).map(|_| pt(rng)).collect(),
                weight: rng.random_range(-1.0..1.0),
                scale: rng.random_range(0.25..2.0),
            },
        ),
        1 => (
            Mode::SeedPositive,
            Action::SeedPositive {
                states: (0..rng.random_range(1..3)).map(|_| pt(rng)).collect(),
            },
        ),
        _ => (
            Mode::Sculpt,
            Action::Sculpt {
                directive: SculptDirective::SuppressBelow {
                    a: rng.random_range(0.0..1.0),
                },
            },
        ),
    }
}

fn check_store(s: &Session) {
    s.store.check().unwrap();
    for e in s.store.lineage.entries.iter().skip(1) {
        let r = e
            .verification
            .as_ref()
            .expect("merged version without verification");
        assert!(r.pass);
        assert_eq!(r.candidate_hash, e.hash);
        assert!(r.regression.min_good_reward >= 0.5);
        assert!(r.regression.max_bad_reward <= 0.3);
    }
}

#[test]
fn merge_gate_fuzz() {
    let mut s = armed_session();
    let clusters: Vec<u64> = s.work.clusters.iter().map(|c| c.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut proposals: Vec<u64> = vec![];
    let (mut merges, mut refusals, mut failed_refused) = (0, 0, 0);
    for step in 0..1000 {
        match rng.random_range(0..10) {
            0..=2 => {
                let c = clusters[rng.random_range(0..clusters.len())];
                let p = if rng.random_bool(0.5) {
                    let mode = if rng.random_bool(0.7) {
                        Mode::PatchNegative
                    } else {
                        Mode::Sculpt
                    };
                    s.propose(c, mode, Author::Agent, None)
                } else {
                    let (mode, action) = random_action(&mut rng);
                    s.propose(c, mode, Author::Human, Some(action))
                };
                if let Ok(p) = p {
                    proposals.push(p.id);
                }
            }
            3..=5 if !proposals.is_empty() => {
                let id = proposals[rng.random_range(0..proposals.len())];
                let _ = s.verify(id, rng.random());
            }
            6..=8 if !proposals.is_empty() => {
                let id = proposals[rng.random_range(0..proposals.len())];
                if rng.random_bool(0.1) {
                    if let Some(c) = s.work.candidates.get_mut(&id) {
                        c.beta.beta0 *= 0.5;
                    }
                }
                let verified = s.work.verifications.get(&id).cloned();
                let cand = s.work.candidates[&id].clone();
                let before = s.store.clone();
                match s.merge(id) {
                    Ok(_) => {
                        let r = verified.as_ref().expect("merged without a verification");
                        assert!(r.pass && r.candidate_hash == cand.content_hash());
                        merges += 1;
                    }
                    Err(_) => {
                        assert_eq!(s.store, before, "refused merge changed the store");
                        if verified.as_ref().is_some_and(|r| !r.pass) {
                            failed_refused += 1;
                        }
                        refusals += 1;
                    }
                }
            }
            9 => {
                let versions: Vec<u64> = s.store.versions.keys().copied().collect();
                let v = versions[rng.random_range(0..versions.len())];
                s.rollback(v).unwrap();
            }
            _ => {}
        }
        check_store(&s);
        if step % 250 == 0 {
            println!("step {step}: merges {merges} refusals {refusals}");
        }
    }
    println!("merges {merges} refusals {refusals} of which failed verifications {failed_refused}");
    assert!(merges >= 1 && refusals >= 1);
}

#[test]
fn failed_verification_is_refused() {
    let mut s = armed_session();
    let c = s.work.clusters[0].id;
    let harmful = Action::SeedPositive {
        states: vec![StateVec::new(vec![0.5, 0.5])],
    };
    let p = s
        .propose(c, Mode::SeedPositive, Author::Human, Some(harmful))
        .unwrap();
    let r = s.verify(p.id, 1).unwrap();
    assert!(!r.pass);
    let before = s.store.clone();
    assert!(s.merge(p.id).is_err());
    assert_eq!(s.store, before);
}

#[test]
fn rollback_then_merge_branches() {
    let mut s = armed_session();
    let c = s.work.clusters[0].id;
    let p = s
        .propose(c, Mode::PatchNegative, Author::Agent, None)
        .unwrap();
    assert!(s.verify(p.id, 1).unwrap().pass);
    let v1 = s.merge(p.id).unwrap();
    let root = s.rollback(0).unwrap();
    assert_eq!(
        root.to_canonical_json(),
        s.store.versions[&0].to_canonical_json()
    );
    let p2 = s
        .propose(c, Mode::PatchNegative, Author::Agent, None)
        .unwrap();
    assert!(s.verify(p2.id, 2).unwrap().pass);
    let v2 = s.merge(p2.id).unwrap();
    assert_eq!(s.store.children(0), vec![v1, v2]);
    assert!(s.rollback(99).is_err());
    // stale: candidate built on v2's parent after head moved
    let p3 = s
        .propose(c, Mode::PatchNegative, Author::Agent, None)
        .unwrap();
    s.verify(p3.id, 3).unwrap();
    s.rollback(v1).unwrap();
    assert!(s.merge(p3.id).is_err());
}
