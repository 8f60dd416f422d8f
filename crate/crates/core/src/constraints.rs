//! Authored constraints, expert-data filtering, coverage audit and
//! counterfactual attribute checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::RewardArtifact;
use crate::error::{invalid, Error, Result};
use crate::toyworld::{ExpertDataset, StateVec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConstraintKind {
    ForbiddenBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Compliance requires <normal, s> <= offset.
    Halfspace {
        normal: Vec<f64>,
        offset: f64,
    },
    Counterfactual {
        attribute: String,
        max_delta: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    #[serde(default)]
    pub description: String,
    /// Context attributes that must all match for the rule to apply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<BTreeMap<String, String>>,
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ConstraintKind::ForbiddenBox { lo, hi } => {
                if lo.is_empty()
                    || lo.len() != hi.len()
                    || lo.iter().zip(hi).any(|(l, h)| !(l <= h))
                {
                    return Err(invalid(format!(
                        "{}: forbidden_box bounds must be ordered",
                        self.id
                    )));
                }
            }
            ConstraintKind::Halfspace { normal, offset } => {
                if normal.iter().all(|v| *v == 0.0) || !offset.is_finite() {
                    return Err(invalid(format!(
                        "{}: halfspace normal must be non-zero",
                        self.id
                    )));
                }
            }
            ConstraintKind::Counterfactual {
                max_delta,
                attribute,
            } => {
                if !(0.0..=1.0).contains(max_delta) || attribute.is_empty() {
                    return Err(invalid(format!("{}: max_delta must lie in [0,1]", self.id)));
                }
            }
        }
        Ok(())
    }

    fn context_matches(&self, s: &StateVec) -> bool {
        match &self.when {
            None => true,
            Some(req) => req.iter().all(|(k, v)| s.ctx(k) == Some(v.as_str())),
        }
    }

    pub fn fires(&self, s: &StateVec) -> bool {
        if !self.context_matches(s) {
            return false;
        }
        match &self.kind {
            ConstraintKind::ForbiddenBox { lo, hi } => {
                s.values.len() == lo.len()
                    && s.values
                        .iter()
                        .enumerate()
                        .all(|(i, v)| *v >= lo[i] && *v <= hi[i])
            }
            ConstraintKind::Halfspace { normal, offset } => {
                normal
                    .iter()
                    .zip(&s.values)
                    .map(|(n, v)| n * v)
                    .sum::<f64>()
                    > *offset
            }
            ConstraintKind::Counterfactual { .. } => false,
        }
    }

    pub fn is_context_gated(&self) -> bool {
        self.when.is_some() && !matches!(self.kind, ConstraintKind::Counterfactual { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Result<Self> {
        let s = ConstraintSet { constraints };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.constraints {
            if !seen.insert(&c.id) {
                return Err(invalid(format!("duplicate constraint id `{}`", c.id)));
            }
            c.validate()?;
        }
        Ok(())
    }

    /// Every problem found, instead of stopping at the first.
    pub fn lint(&self, dims: Option<usize>) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for c in &self.constraints {
            if !seen.insert(&c.id) {
                out.push(format!("duplicate constraint id `{}`", c.id));
            }
            if let Err(e) = c.validate() {
                out.push(e.to_string());
            }
            let len = match &c.kind {
                ConstraintKind::ForbiddenBox { lo, .. } => Some(lo.len()),
                ConstraintKind::Halfspace { normal, .. } => Some(normal.len()),
                ConstraintKind::Counterfactual { .. } => None,
            };
            if let (Some(d), Some(l)) = (dims, len) {
                if d != l {
                    out.push(format!("{}: has {l} coordinates, domain has {d}", c.id));
                }
            }
        }
        out
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("constraint sets serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn context_gate(&self) -> Vec<Constraint> {
        self.constraints
            .iter()
            .filter(|c| c.is_context_gated())
            .cloned()
            .collect()
    }
}

pub fn violates(cset: &ConstraintSet, s: &StateVec) -> Vec<String> {
    cset.constraints
        .iter()
        .filter(|c| c.fires(s))
        .map(|c| c.id.clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub state: StateVec,
    pub violated: Vec<String>,
}

pub fn filter_dataset(
    data: &ExpertDataset,
    cset: &ConstraintSet,
) -> Result<(ExpertDataset, Vec<Rejection>)> {
    let mut kept = ExpertDataset {
        states: vec![],
        split: vec![],
        provenance: data.provenance.clone(),
    };
    let mut rejected = Vec::new();
    for (i, (s, sp)) in data.states.iter().zip(&data.split).enumerate() {
        let v = violates(cset, s);
        if v.is_empty() {
            kept.states.push(s.clone());
            kept.split.push(*sp);
        } else {
            rejected.push(Rejection {
                index: i,
                state: s.clone(),
                violated: v,
            });
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyKept);
    }
    Ok((kept, rejected))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub fraction_covered: f64,
    pub threshold: f64,
    pub uncovered: Vec<StateVec>,
}

pub fn coverage_audit(
    artifact: &RewardArtifact,
    holdout: &[StateVec],
    l_threshold: f64,
) -> Result<CoverageReport> {
    if holdout.is_empty() {
        return Err(invalid("coverage audit needs holdout states"));
    }
    if !(l_threshold > 0.0 && l_threshold < 1.0) {
        return Err(invalid("coverage threshold must lie in (0,1)"));
    }
    let ls = artifact.scorer.score_many(holdout)?;
    let uncovered: Vec<StateVec> = holdout
        .iter()
        .zip(&ls)
        .filter(|(_, l)| **l < l_threshold)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(CoverageReport {
        fraction_covered: 1.0 - uncovered.len() as f64 / holdout.len() as f64,
        threshold: l_threshold,
        uncovered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedProbe {
    pub index: usize,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub attribute: String,
    pub max_delta: f64,
    pub deltas: Vec<f64>,
    pub flagged: Vec<FlaggedProbe>,
    pub pass: bool,
}

pub fn counterfactual_check(
    artifact: &RewardArtifact,
    probes: &[StateVec],
    attribute: &str,
    max_delta: f64,
) -> Result<CheckReport> {
    let mut values = BTreeSet::new();
    for p in probes {
        let v = p
            .ctx(attribute)
            .ok_or_else(|| invalid(format!("probe lacks attribute `{attribute}`")))?;
        values.insert(v.to_string());
    }
    if values.len() < 2 {
        return Err(invalid(format!(
            "attribute `{attribute}` needs at least two known values"
        )));
    }
    let mut deltas = Vec::with_capacity(probes.len());
    let mut flagged = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        let rewards = values
            .iter()
            .map(|v| artifact.reward(&p.clone().with_context(attribute, v), 0))
            .collect::<Result<Vec<_>>>()?;
        let hi = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        let d = hi - lo;
        if d > max_delta {
            flagged.push(FlaggedProbe { index: i, delta: d });
        }
        deltas.push(d);
    }
    Ok(CheckReport {
        attribute: attribute.into(),
        max_delta,
        pass: flagged.is_empty(),
        deltas,
        flagged,
    })
}
