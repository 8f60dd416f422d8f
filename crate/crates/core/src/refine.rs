//! Refinement proposals, candidate construction, verification against a
//! localized red team and a regression library, and the gated artifact store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::artifact::RewardArtifact;
use crate::audit::{red_team_search, RedTeamConfig, SearchRegion, Sfkb, Strategy, THETA_HIGH};
use crate::constraints::ConstraintSet;
use crate::error::{invalid, Error, Result};
use crate::mapping::{sculpt, SculptDirective};
use crate::rng::{mix, stream};
use crate::scorer::{self, add_anchor, median, Anchor, NegativeSet, ScorerKind, TrainConfig};
use crate::toyworld::{dist, ExpertDataset, StateVec};
use crate::triage::{Author, FlawCluster, Verdict};

pub const EPS_REG: f64 = 0.05;
pub const THETA_GOOD: f64 = 0.5;
pub const THETA_BAD: f64 = 0.3;
pub const VERIFY_BUDGET: usize = 2000;
/// Bandwidth multiplier given to agent-authored patch anchors.
pub const PATCH_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Sculpt {
        directive: SculptDirective,
    },
    PatchNegative {
        anchors: Vec<StateVec>,
        weight: f64,
        #[serde(default = "unit")]
        scale: f64,
    },
    SeedPositive {
        states: Vec<StateVec>,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sculpt,
    PatchNegative,
    SeedPositive,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sculpt" => Ok(Mode::Sculpt),
            "patch_negative" | "patch" => Ok(Mode::PatchNegative),
            "seed_positive" | "seed" => Ok(Mode::SeedPositive),
            other => Err(invalid(format!("unknown refinement mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementProposal {
    pub id: u64,
    pub action: Action,
    pub region: TargetRegion,
    pub author: Author,
    pub cluster: Option<u64>,
}

/// Builds a proposal for a confirmed cluster. Agents fill in parameters from
/// the cluster; humans pass `action` explicitly.
pub fn propose_refinement(
    id: u64,
    cluster: &FlawCluster,
    sfkb: &Sfkb,
    artifact: &RewardArtifact,
    mode: Mode,
    author: Author,
    action: Option<Action>,
) -> Result<RefinementProposal> {
    if cluster.verdict != Some(Verdict::Confirmed) {
        return Err(invalid(format!("cluster {} is not confirmed", cluster.id)));
    }
    let states: Vec<StateVec> = cluster
        .members
        .iter()
        .map(|m| sfkb.get(*m).map(|f| f.state.clone()))
        .collect::<Result<_>>()?;
    let c = &cluster.centroid.values;
    let spread = states
        .iter()
        .map(|s| dist(&s.values, c))
        .fold(0.0, f64::max);
    let region = TargetRegion {
        center: c.clone(),
        radius: spread.max(sfkb.rho_dedupe) * 1.5,
    };
    let action = match (author, action) {
        (Author::Human, Some(a)) => a,
        (Author::Human, None) => return Err(invalid("human proposals must supply their action")),
        (Author::Agent, _) => match mode {
            Mode::PatchNegative => Action::PatchNegative {
                anchors: states,
                weight: -1.0,
                scale: PATCH_SCALE,
            },
            Mode::Sculpt => {
                let ls = states
                    .iter()
                    .map(|s| artifact.expertness(s))
                    .collect::<Result<Vec<f64>>>()?;
                Action::Sculpt {
                    directive: SculptDirective::SuppressBelow { a: median(&ls) },
                }
            }
            Mode::SeedPositive => {
                return Err(invalid(
                    "agents do not author positive seeds at flaw states",
                ))
            }
        },
    };
    let matches = matches!(
        (&action, mode),
        (Action::Sculpt { .. }, Mode::Sculpt)
            | (Action::PatchNegative { .. }, Mode::PatchNegative)
            | (Action::SeedPositive { .. }, Mode::SeedPositive)
    );
    if !matches {
        return Err(invalid("action does not match the requested mode"));
    }
    let p = RefinementProposal {
        id,
        action,
        region,
        author,
        cluster: Some(cluster.id),
    };
    validate_proposal(&p, artifact)?;
    Ok(p)
}

pub fn validate_proposal(p: &RefinementProposal, artifact: &RewardArtifact) -> Result<()> {
    if !(p.region.radius > 0.0) {
        return Err(invalid("target radius must be positive"));
    }
    let states = match &p.action {
        Action::PatchNegative { anchors, .. } => anchors,
        Action::SeedPositive { states } => states,
        Action::Sculpt { .. } => return Ok(()),
    };
    for s in states {
        artifact.scorer.domain.check(s)?;
    }
    Ok(())
}

/// Training inputs needed to refit scorers that cannot take anchor edits.
pub struct RefitContext<'a> {
    pub data: &'a ExpertDataset,
    pub negatives: &'a NegativeSet,
    pub cfg: &'a TrainConfig,
}

pub fn apply_refinement(
    artifact: &RewardArtifact,
    proposal: &RefinementProposal,
    refit: Option<&RefitContext>,
) -> Result<RewardArtifact> {
    validate_proposal(proposal, artifact)?;
    let mut cand = artifact.clone();
    let recon = artifact.scorer.kind() == ScorerKind::Recon;
    match &proposal.action {
        Action::Sculpt { directive } => cand.mapping = sculpt(&artifact.mapping, directive)?,
        Action::PatchNegative {
            anchors,
            weight,
            scale,
        } if !recon => {
            for s in anchors {
                cand.scorer = add_anchor(
                    &cand.scorer,
                    Anchor {
                        state: s.clone(),
                        weight: *weight,
                        scale: *scale,
                    },
                )?;
            }
        }
        Action::SeedPositive { states } if !recon => {
            for s in states {
                cand.scorer = add_anchor(&cand.scorer, Anchor::new(s.clone(), 1.0))?;
            }
        }
        action => {
            let ctx = refit.ok_or_else(|| Error::UnsupportedKind {
                kind: "recon".into(),
                what: "data patches need the training context for a refit".into(),
            })?;
            let (neg_train, neg_hold) = ctx.negatives.halves();
            let mut train = ctx.data.train();
            let mut negs = neg_train.to_vec();
            match action {
                Action::PatchNegative { anchors, .. } => negs.extend(anchors.iter().cloned()),
                Action::SeedPositive { states } => train.extend(states.iter().cloned()),
                Action::Sculpt { .. } => unreachable!(),
            }
            cand.scorer = scorer::fit_split(
                ScorerKind::Recon,
                &artifact.scorer.domain,
                &train,
                &ctx.data.holdout(),
                &negs,
                neg_hold,
                ctx.cfg,
            )?;
        }
    }
    cand.version = None;
    cand.parent = artifact.version;
    cand.proposal = Some(proposal.id);
    cand.seal();
    Ok(cand)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps_reg: f64,
    pub theta_good: f64,
    pub theta_bad: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eps_reg: EPS_REG,
            theta_good: THETA_GOOD,
            theta_bad: THETA_BAD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionLibrary {
    pub good: Vec<StateVec>,
    pub baselines: Vec<f64>,
    pub root_baselines: Vec<f64>,
    pub bad: Vec<StateVec>,
    pub baseline_version: u64,
    pub tolerances: Tolerances,
}

impl RegressionLibrary {
    /// Known-good states are the holdout experts the root already rewards at
    /// or above `theta_good`.
    pub fn from_root(
        root: &RewardArtifact,
        holdout: &[StateVec],
        tolerances: Tolerances,
    ) -> Result<Self> {
        let version = root
            .version
            .ok_or_else(|| invalid("regression baselines need a versioned artifact"))?;
        let rewards = holdout
            .iter()
            .map(|s| root.reward(s, 0))
            .collect::<Result<Vec<_>>>()?;
        let (good, baselines): (Vec<StateVec>, Vec<f64>) = holdout
            .iter()
            .zip(&rewards)
            .filter(|(_, r)| **r >= tolerances.theta_good)
            .map(|(s, r)| (s.clone(), *r))
            .unzip();
        Ok(RegressionLibrary {
            root_baselines: baselines.clone(),
            good,
            baselines,
            bad: vec![],
            baseline_version: version,
            tolerances,
        })
    }

    pub fn snapshot(&mut self, artifact: &RewardArtifact) -> Result<()> {
        self.baseline_version = artifact
            .version
            .ok_or_else(|| invalid("snapshot needs a versioned artifact"))?;
        self.baselines = self
            .good
            .iter()
            .map(|s| artifact.reward(s, 0))
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn add_bad(&mut self, states: impl IntoIterator<Item = StateVec>) {
        for s in states {
            if !self.good.contains(&s) && !self.bad.contains(&s) {
                self.bad.push(s);
            }
        }
    }

    pub fn fidelity(&self, artifact: &RewardArtifact) -> f64 {
        if self.good.is_empty() {
            return 0.0;
        }
        self.good
            .iter()
            .map(|s| artifact.reward_or_zero(s, 0))
            .sum::<f64>()
            / self.good.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalRedTeam {
    pub flaws_found: usize,
    pub budget: usize,
    pub evaluations: usize,
    pub region: SearchRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub max_good_drift: f64,
    pub min_good_reward: f64,
    pub max_bad_reward: f64,
    pub cumulative_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub proposal: u64,
    pub candidate_hash: String,
    pub parent: Option<u64>,
    pub local_redteam: LocalRedTeam,
    pub regression: Regression,
    pub pass: bool,
    pub seed: u64,
}

pub struct VerifyInputs<'a> {
    pub cset: &'a ConstraintSet,
    pub judge: crate::audit::Judge<'a>,
    pub budget: usize,
    pub seed: u64,
    /// Extra known-bad states, typically the members of the source cluster.
    pub extra_bad: &'a [StateVec],
}

pub fn verify(
    candidate: &RewardArtifact,
    proposal: &RefinementProposal,
    reglib: &RegressionLibrary,
    inputs: &VerifyInputs,
) -> Result<VerificationResult> {
    if candidate.parent != Some(reglib.baseline_version) {
        return Err(invalid(format!(
            "regression baselines are for v{} but the candidate's parent is {:?}",
            reglib.baseline_version, candidate.parent
        )));
    }
    let region = SearchRegion {
        center: proposal.region.center.clone(),
        radius: 2.0 * proposal.region.radius,
    };
    let scratch = Sfkb::new(&candidate.scorer.domain);
    let half = inputs.budget / 2;
    let seed = mix(inputs.seed, stream::VERIFY);
    let mut found = 0;
    let mut evals = 0;
    for (i, (strategy, budget)) in [
        (Strategy::Random, inputs.budget - half),
        (Strategy::Anneal, half),
    ]
    .into_iter()
    .enumerate()
    {
        if budget == 0 {
            continue;
        }
        let mut cfg = RedTeamConfig::new(strategy, budget, mix(seed, i as u64));
        cfg.use_gaps = false;
        cfg.theta_high = THETA_HIGH;
        let out = red_team_search(
            candidate,
            inputs.cset,
            inputs.judge,
            &cfg,
            &scratch,
            Some(&region),
        )?;
        found += out.candidates.len();
        evals += out.evaluations;
    }
    let tol = &reglib.tolerances;
    let now = reglib
        .good
        .iter()
        .map(|s| candidate.reward(s, 0))
        .collect::<Result<Vec<f64>>>()?;
    let drift = |base: &[f64]| {
        now.iter()
            .zip(base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let max_bad = reglib
        .bad
        .iter()
        .chain(inputs.extra_bad)
        .map(|s| candidate.reward(s, 0))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let regression = Regression {
        max_good_drift: drift(&reglib.baselines),
        min_good_reward: now.iter().cloned().fold(1.0, f64::min),
        max_bad_reward: max_bad,
        cumulative_drift: drift(&reglib.root_baselines),
    };
    let pass = found == 0
        && regression.max_good_drift <= tol.eps_reg
        && regression.min_good_reward >= tol.theta_good
        && regression.max_bad_reward <= tol.theta_bad;
    Ok(VerificationResult {
        proposal: proposal.id,
        candidate_hash: candidate.content_hash(),
        parent: candidate.parent,
        local_redteam: LocalRedTeam {
            flaws_found: found,
            budget: inputs.budget,
            evaluations: evals,
            region,
        },
        regression,
        pass,
        seed: inputs.seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub version: u64,
    pub parent: Option<u64>,
    pub hash: String,
    pub proposal: Option<u64>,
    pub verification: Option<VerificationResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub head: u64,
    pub entries: Vec<LineageEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArtifactStore {
    pub versions: BTreeMap<u64, RewardArtifact>,
    pub lineage: Lineage,
}

impl ArtifactStore {
    pub fn new(mut root: RewardArtifact) -> Self {
        root.version = Some(0);
        root.parent = None;
        root.seal();
        let entry = LineageEntry {
            version: 0,
            parent: None,
            hash: root.hash.clone(),
            proposal: None,
            verification: None,
        };
        ArtifactStore {
            versions: BTreeMap::from([(0, root)]),
            lineage: Lineage {
                head: 0,
                entries: vec![entry],
            },
        }
    }

    pub fn head(&self) -> &RewardArtifact {
        &self.versions[&self.lineage.head]
    }

    pub fn get(&self, v: u64) -> Result<&RewardArtifact> {
        self.versions
            .get(&v)
            .ok_or_else(|| Error::NotFound(format!("artifact version {v}")))
    }

    pub fn children(&self, v: u64) -> Vec<u64> {
        self.lineage
            .entries
            .iter()
            .filter(|e| e.parent == Some(v))
            .map(|e| e.version)
            .collect()
    }

    /// Structural checks: single parents, no cycles, passing results on every merge.
    pub fn check(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.lineage.entries {
            let a = self.get(e.version)?;
            if a.hash != e.hash || a.content_hash() != e.hash || a.version != Some(e.version) {
                return Err(Error::Data(format!(
                    "version {} does not match its lineage entry",
                    e.version
                )));
            }
            match e.parent {
                None if e.version != 0 => {
                    return Err(Error::Data(format!("version {} has no parent", e.version)))
                }
                Some(p) if p >= e.version || !seen.contains(&p) => {
                    return Err(Error::Data(format!(
                        "version {} has an invalid parent",
                        e.version
                    )))
                }
                _ => {}
            }
            if e.version != 0 {
                let ok = e
                    .verification
                    .as_ref()
                    .is_some_and(|r| r.pass && r.candidate_hash == e.hash);
                if !ok {
                    return Err(Error::Data(format!(
                        "version {} lacks a passing verification",
                        e.version
                    )));
                }
            }
            seen.insert(e.version);
        }
        if !seen.contains(&self.lineage.head) || seen.len() != self.versions.len() {
            return Err(Error::Data(
                "head or version set inconsistent with lineage".into(),
            ));
        }
        Ok(())
    }
}

pub fn merge(
    store: &mut ArtifactStore,
    candidate: &RewardArtifact,
    result: &VerificationResult,
) -> Result<u64> {
    if !result.pass {
        return Err(Error::MergeRefused("verification did not pass".into()));
    }
    let hash = candidate.content_hash();
    if result.candidate_hash != hash || candidate.hash != hash {
        return Err(Error::MergeRefused(
            "candidate does not match the verified hash".into(),
        ));
    }
    if candidate.proposal != Some(result.proposal) || candidate.parent != result.parent {
        return Err(Error::MergeRefused(
            "verification refers to a different proposal or parent".into(),
        ));
    }
    if candidate.parent != Some(store.lineage.head) {
        return Err(Error::MergeRefused(format!(
            "stale candidate: built on {:?}, head is v{}",
            candidate.parent, store.lineage.head
        )));
    }
    let v = store.versions.keys().next_back().map_or(0, |k| k + 1);
    let mut merged = candidate.clone();
    merged.version = Some(v);
    merged.seal();
    store.lineage.entries.push(LineageEntry {
        version: v,
        parent: candidate.parent,
        hash: merged.hash.clone(),
        proposal: candidate.proposal,
        verification: Some(result.clone()),
    });
    store.versions.insert(v, merged);
    store.lineage.head = v;
    Ok(v)
}

pub fn rollback(store: &mut ArtifactStore, version: u64) -> Result<RewardArtifact> {
    let a = store.get(version)?.clone();
    store.lineage.head = version;
    Ok(a)
}
