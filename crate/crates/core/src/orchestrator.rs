//! Full flywheel cycles: audit, triage, label, propose, verify, merge.

use serde::{Deserialize, Serialize};

use crate::audit::{AuditReport, FlawStatus, Violation};
use crate::error::{invalid, Result};
use crate::refine::Mode;
use crate::rng::mix;
use crate::session::Session;
use crate::toyworld::{is_safe, unsafe_reward_mass, MassEstimate};
use crate::triage::{Author, FlawCluster, Verdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub unsafe_mass: MassEstimate,
    pub expert_fidelity: f64,
    pub open_flaws: usize,
    pub head: u64,
}

pub fn metrics(session: &Session) -> Result<Metrics> {
    let head = session.head();
    Ok(Metrics {
        unsafe_mass: unsafe_reward_mass(
            &session.world,
            head,
            session.config.mc_samples,
            session.config.seed,
        )?,
        expert_fidelity: session.reglib.fidelity(head),
        open_flaws: session
            .sfkb
            .flaws
            .iter()
            .filter(|f| matches!(f.status, FlawStatus::Open | FlawStatus::Triaged))
            .count(),
        head: session.store.lineage.head,
    })
}

/// Source of cluster verdicts. `None` means no answer (cycle left incomplete).
pub trait Labeler {
    fn label(&mut self, session: &Session, cluster: &FlawCluster) -> Option<Verdict>;
}

/// Stand-in expert: confirmed iff the representative breaks a constraint or the oracle calls it unsafe.
pub struct OracleLabeler;

impl Labeler for OracleLabeler {
    fn label(&mut self, session: &Session, cluster: &FlawCluster) -> Option<Verdict> {
        let rep = session.sfkb.get(cluster.representative).ok()?;
        let bad = match rep.violation {
            Violation::Constraint { .. } => true,
            _ => !is_safe(&session.world, &rep.state).unwrap_or(true),
        };
        Some(if bad {
            Verdict::Confirmed
        } else {
            Verdict::Benign
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleStatus {
    Complete,
    Incomplete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub cycle: u64,
    pub audit: u64,
    pub verify: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedVersion {
    pub version: u64,
    pub proposal: u64,
    pub expert_fidelity: f64,
    pub min_good_reward: f64,
    pub max_bad_reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalOutcome {
    pub proposal: u64,
    pub cluster: u64,
    pub mode: Mode,
    pub pass: bool,
    pub local_flaws: usize,
    pub max_good_drift: f64,
    pub merged: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u32,
    pub status: CycleStatus,
    pub flaws_found: usize,
    pub new_flaws: usize,
    pub carryover: usize,
    pub flaws_resolved: usize,
    pub flaws_benign: usize,
    pub human_labels: usize,
    pub clusters: usize,
    pub proposals_made: usize,
    pub proposals_merged: usize,
    pub proposals: Vec<ProposalOutcome>,
    pub merged_versions: Vec<MergedVersion>,
    pub unsafe_mass_before: MassEstimate,
    pub unsafe_mass_after: MassEstimate,
    pub expert_fidelity_before: f64,
    pub expert_fidelity_after: f64,
    pub head_before: u64,
    pub head_after: u64,
    pub audit: AuditReport,
    pub seeds: Seeds,
    pub alerts: Vec<String>,
}

/// A report plus the wall-clock it took; kept apart so reports stay byte-identical across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub report: CycleReport,
    pub wall_clock_ms: u64,
}

fn mass_regressed(before: &MassEstimate, after: &MassEstimate) -> bool {
    let se = (before.stderr.powi(2) + after.stderr.powi(2)).sqrt();
    after.mean > before.mean + 3.0 * se
}

pub fn run_cycle(
    session: &mut Session,
    labeler: &mut dyn Labeler,
    seed: u64,
) -> Result<CycleReport> {
    if session.busy {
        return Err(crate::Error::Conflict("a cycle is already running".into()));
    }
    session.busy = true;
    let started = std::time::Instant::now();
    let out = cycle_inner(session, labeler, seed);
    session.busy = false;
    let report = out?;
    session.reports.push(CycleRecord {
        report: report.clone(),
        wall_clock_ms: started.elapsed().as_millis() as u64,
    });
    session.work.cycles += 1;
    Ok(report)
}

fn cycle_inner(session: &mut Session, labeler: &mut dyn Labeler, seed: u64) -> Result<CycleReport> {
    let cycle = session.work.cycles;
    let cycle_seed = mix(seed, cycle as u64);
    let audit_seed = mix(cycle_seed, 1);
    let before = metrics(session)?;
    let carryover = before.open_flaws;
    let audit = session.audit(session.config.audit_budget, audit_seed, None)?;
    let clusters = session.triage()?;
    let mut status = CycleStatus::Complete;
    let mut resolved = 0;
    let mut benign = 0;
    let mut human = 0;
    let mut confirmed = Vec::new();
    for c in &clusters {
        let verdict = match session.inherit_label(c.id)? {
            Some(v) => Some(v),
            None => match labeler.label(session, c) {
                Some(v) => {
                    let n = session.label(c.id, v, Author::Human, "")?;
                    human += 1;
                    match v {
                        Verdict::Confirmed => resolved += n,
                        Verdict::Benign => benign += n,
                    }
                    Some(v)
                }
                None => {
                    status = CycleStatus::Incomplete;
                    None
                }
            },
        };
        if verdict == Some(Verdict::Confirmed) {
            confirmed.push(c.id);
        }
    }
    let mut proposals = Vec::new();
    let mut merged_versions = Vec::new();
    let mut verify_seeds = Vec::new();
    for cid in confirmed {
        for mode in [Mode::PatchNegative, Mode::Sculpt] {
            let p = session.propose(cid, mode, Author::Agent, None)?;
            let vseed = mix(cycle_seed, 100 + p.id);
            verify_seeds.push(vseed);
            let r = session.verify(p.id, vseed)?;
            let merged = if r.pass {
                Some(session.merge(p.id)?)
            } else {
                None
            };
            proposals.push(ProposalOutcome {
                proposal: p.id,
                cluster: cid,
                mode,
                pass: r.pass,
                local_flaws: r.local_redteam.flaws_found,
                max_good_drift: r.regression.max_good_drift,
                merged,
            });
            if let Some(v) = merged {
                merged_versions.push(MergedVersion {
                    version: v,
                    proposal: p.id,
                    expert_fidelity: session.reglib.fidelity(session.head()),
                    min_good_reward: r.regression.min_good_reward,
                    max_bad_reward: r.regression.max_bad_reward,
                });
                break;
            }
        }
    }
    let after = metrics(session)?;
    let mut alerts = Vec::new();
    if mass_regressed(&before.unsafe_mass, &after.unsafe_mass) {
        alerts.push(format!(
            "hardening regression: unsafe mass rose from {:.6} to {:.6}",
            before.unsafe_mass.mean, after.unsafe_mass.mean
        ));
    }
    for m in &merged_versions {
        if m.expert_fidelity < session.reglib.tolerances.theta_good {
            alerts.push(format!(
                "fidelity {:.4} below threshold at v{}",
                m.expert_fidelity, m.version
            ));
        }
    }
    Ok(CycleReport {
        cycle,
        status,
        flaws_found: audit.flaws_found,
        new_flaws: audit.new_flaws.len(),
        carryover,
        flaws_resolved: resolved,
        flaws_benign: benign,
        human_labels: human,
        clusters: clusters.len(),
        proposals_made: proposals.len(),
        proposals_merged: merged_versions.len(),
        proposals,
        merged_versions,
        unsafe_mass_before: before.unsafe_mass,
        unsafe_mass_after: after.unsafe_mass,
        expert_fidelity_before: before.expert_fidelity,
        expert_fidelity_after: after.expert_fidelity,
        head_before: before.head,
        head_after: after.head,
        audit,
        seeds: Seeds {
            cycle: cycle_seed,
            audit: audit_seed,
            verify: verify_seeds,
        },
        alerts,
    })
}

/// Runs cycles until an audit comes back clean or `max_cycles` is reached.
pub fn run_until_clean(
    session: &mut Session,
    labeler: &mut dyn Labeler,
    max_cycles: u32,
    seed: u64,
) -> Result<Vec<CycleReport>> {
    if max_cycles == 0 {
        return Err(invalid("max_cycles must be at least 1"));
    }
    let mut out = Vec::new();
    for _ in 0..max_cycles {
        let r = run_cycle(session, labeler, seed)?;
        let clean = r.flaws_found == 0;
        out.push(r);
        if clean {
            break;
        }
    }
    Ok(out)
}
