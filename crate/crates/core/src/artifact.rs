//! The reward artifact: scorer, mapping, beta schedule and constraint
//! reference, serialized canonically with an embedded content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::{Constraint, ConstraintSet};
use crate::error::{invalid, Error, Result};
use crate::mapping::{select_mapping, BetaSchedule, MappingParams};
use crate::scorer::{self, NegativeSet, ScorerKind, ScorerModel, TrainConfig};
use crate::toyworld::{DomainBox, ExpertDataset, StateVec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardArtifact {
    /// Assigned on merge; candidates carry `None`.
    pub version: Option<u64>,
    pub parent: Option<u64>,
    pub scorer: ScorerModel,
    pub mapping: MappingParams,
    pub beta: BetaSchedule,
    pub constraints_hash: String,
    /// Context-conditioned rules that force the reward to zero when they fire.
    #[serde(default)]
    pub gate: Vec<Constraint>,
    #[serde(default)]
    pub proposal: Option<u64>,
    #[serde(default)]
    pub hash: String,
}

#[derive(Serialize)]
struct HashView<'a> {
    scorer: &'a ScorerModel,
    mapping: &'a MappingParams,
    beta: &'a BetaSchedule,
    constraints_hash: &'a str,
    gate: &'a [Constraint],
    proposal: Option<u64>,
}

impl RewardArtifact {
    pub fn new(
        scorer: ScorerModel,
        mapping: MappingParams,
        beta: BetaSchedule,
        cset: &ConstraintSet,
    ) -> Self {
        let mut a = RewardArtifact {
            version: None,
            parent: None,
            scorer,
            mapping,
            beta,
            constraints_hash: cset.hash(),
            gate: cset.context_gate(),
            proposal: None,
            hash: String::new(),
        };
        a.seal();
        a
    }

    /// Hash of the behaviour-defining content. Version bookkeeping is excluded
    /// so a candidate and its merged copy share a hash.
    pub fn content_hash(&self) -> String {
        let view = HashView {
            scorer: &self.scorer,
            mapping: &self.mapping,
            beta: &self.beta,
            constraints_hash: &self.constraints_hash,
            gate: &self.gate,
            proposal: self.proposal,
        };
        hex::encode(Sha256::digest(
            serde_json::to_vec(&view).expect("artifact serializes"),
        ))
    }

    pub fn seal(&mut self) {
        self.hash = self.content_hash();
    }

    pub fn gate_fires(&self, s: &StateVec) -> bool {
        self.gate.iter().any(|c| c.fires(s))
    }

    pub fn expertness(&self, s: &StateVec) -> Result<f64> {
        self.scorer.domain.check(s)?;
        self.scorer.score(&s.values)
    }

    pub fn reward(&self, s: &StateVec, t: u64) -> Result<f64> {
        let l = self.expertness(s)?;
        if self.gate_fires(s) {
            return Ok(0.0);
        }
        Ok(self.beta.at(t) * self.mapping.eval(l))
    }

    /// Reward for states already known to lie in the domain.
    pub fn reward_or_zero(&self, s: &StateVec, t: u64) -> f64 {
        self.reward(s, t).unwrap_or(0.0)
    }

    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: RewardArtifact = serde_json::from_str(text)?;
        a.scorer.validate()?;
        if a.hash != a.content_hash() {
            return Err(Error::Data(format!(
                "artifact hash mismatch: stored {} computed {}",
                a.hash,
                a.content_hash()
            )));
        }
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub kind: ScorerKind,
    pub sigma: Option<Vec<f64>>,
    pub contrast: f64,
    pub mapped_contrast: f64,
}

/// Fit the scorer, then choose the mapping that maximizes holdout contrast.
pub fn fit_artifact(
    kind: ScorerKind,
    domain: &DomainBox,
    data: &ExpertDataset,
    neg: &NegativeSet,
    cfg: &TrainConfig,
    cset: &ConstraintSet,
) -> Result<(RewardArtifact, FitSummary)> {
    let model = scorer::fit(kind, domain, data, neg, cfg)?;
    let (_, neg_hold) = neg.halves();
    let le = model.score_many(&data.holdout())?;
    let ln = model.score_many(neg_hold)?;
    let contrast = scorer::mean(&le) - scorer::mean(&ln);
    let (psi, mapped) = select_mapping(&le, &ln)?;
    let summary = FitSummary {
        kind,
        sigma: model.bandwidth().map(|s| s.to_vec()),
        contrast,
        mapped_contrast: mapped,
    };
    Ok((
        RewardArtifact::new(model, psi, BetaSchedule::default(), cset),
        summary,
    ))
}

/// Copy of `artifact` with one extra unit-scale anchor at `state`, resealed.
/// Used to plant known reward bumps for audit tests.
pub fn plant_anchor(
    artifact: &RewardArtifact,
    state: StateVec,
    weight: f64,
) -> Result<RewardArtifact> {
    let mut out = artifact.clone();
    out.scorer = scorer::add_anchor(&artifact.scorer, scorer::Anchor::new(state, weight))?;
    out.seal();
    Ok(out)
}

/// Constant-reward artifact: an rbf model with no effective anchors whose
/// calibration pins L to `c`. Handy as a reference in tests and tools.
pub fn constant(domain: &DomainBox, c: f64) -> Result<RewardArtifact> {
    if !(0.0..=1.0).contains(&c) {
        return Err(invalid("constant reward must lie in [0,1]"));
    }
    let far = scorer::Anchor {
        state: StateVec::new(domain.lo.clone()),
        weight: 0.0,
        scale: 1.0,
    };
    let model = ScorerModel::rbf(
        domain.clone(),
        vec![far],
        vec![domain.mean_extent(); domain.dims],
        scorer::Calibration {
            lo: -c,
            hi: 1.0 - c,
        },
    )?;
    Ok(RewardArtifact::new(
        model,
        MappingParams::identity(),
        BetaSchedule::default(),
        &ConstraintSet::default(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::Decay;

    #[test]
    fn constant_artifact() {
        let a = constant(&DomainBox::unit(2), 0.7).unwrap();
        let r = a.reward(&StateVec::new(vec![0.1, 0.9]), 0).unwrap();
        assert!((r - 0.7).abs() < 1e-15);
    }

    #[test]
    fn beta_scales_reward() {
        let mut a = constant(&DomainBox::unit(2), 0.5).unwrap();
        a.beta = BetaSchedule::new(2.0, Decay::None).unwrap();
        assert_eq!(a.reward(&StateVec::new(vec![0.5, 0.5]), 0).unwrap(), 1.0);
        a.beta = BetaSchedule::new(
            1.0,
            Decay::Exponential {
                lambda: std::f64::consts::LN_2,
            },
        )
        .unwrap();
        let s = StateVec::new(vec![0.5, 0.5]);
        assert_eq!(a.reward(&s, 1).unwrap() * 2.0, a.reward(&s, 0).unwrap());
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let a = constant(&DomainBox::unit(2), 0.3).unwrap();
        let text = a.to_canonical_json();
        let b = RewardArtifact::from_json(&text).unwrap();
        assert_eq!(b.to_canonical_json(), text);
        let tampered = text.replace("\"beta0\": 1.0", "\"beta0\": 2.0");
        assert!(RewardArtifact::from_json(&tampered).is_err());
    }
}
