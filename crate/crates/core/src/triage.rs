//! Leader clustering of open flaws, priority ordering, and label propagation.

use serde::{Deserialize, Serialize};

use crate::artifact::RewardArtifact;
use crate::audit::{FlawRecord, FlawStatus, Sfkb};
use crate::error::{invalid, Error, Result};
use crate::scorer::{uncertainty, ScorerModel};
use crate::toyworld::{dist, StateVec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirmed,
    Benign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Author {
    Human,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub verdict: Verdict,
    pub author: Author,
    #[serde(default)]
    pub note: String,
    /// Logical clock value supplied by the caller.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlawCluster {
    pub id: u64,
    pub members: Vec<u64>,
    pub leader: u64,
    pub centroid: StateVec,
    pub priority: f64,
    pub representative: u64,
    pub verdict: Option<Verdict>,
}

/// Greedy leader clustering in discovery (id) order.
pub fn cluster_flaws(
    open: &[&FlawRecord],
    rho_cluster: f64,
    first_id: u64,
) -> Result<Vec<FlawCluster>> {
    if !(rho_cluster > 0.0) {
        return Err(invalid("rho_cluster must be positive"));
    }
    let mut order: Vec<&FlawRecord> = open.to_vec();
    order.sort_by_key(|f| f.id);
    let mut groups: Vec<(&FlawRecord, Vec<&FlawRecord>)> = Vec::new();
    for f in order {
        match groups
            .iter_mut()
            .find(|(l, _)| dist(&l.state.values, &f.state.values) <= rho_cluster)
        {
            Some((_, m)) => m.push(f),
            None => groups.push((f, vec![f])),
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, (leader, members))| {
            let d = leader.state.dim();
            let centroid: Vec<f64> = (0..d)
                .map(|k| {
                    members.iter().map(|m| m.state.values[k]).sum::<f64>() / members.len() as f64
                })
                .collect();
            let representative = members
                .iter()
                .min_by(|a, b| {
                    dist(&a.state.values, &centroid)
                        .partial_cmp(&dist(&b.state.values, &centroid))
                        .expect("finite")
                        .then(a.id.cmp(&b.id))
                })
                .expect("non-empty")
                .id;
            FlawCluster {
                id: first_id + i as u64,
                members: members.iter().map(|m| m.id).collect(),
                leader: leader.id,
                centroid: StateVec::new(centroid),
                priority: 0.0,
                representative,
                verdict: None,
            }
        })
        .collect())
}

/// Sets priorities (mean reward x size x (1 + centroid uncertainty)) and sorts descending.
pub fn prioritize(
    mut clusters: Vec<FlawCluster>,
    sfkb: &Sfkb,
    artifact: &RewardArtifact,
    ensemble: &[ScorerModel],
) -> Result<Vec<FlawCluster>> {
    for c in clusters.iter_mut() {
        let rewards = c
            .members
            .iter()
            .map(|id| Ok(artifact.reward_or_zero(&sfkb.get(*id)?.state, 0)))
            .collect::<Result<Vec<f64>>>()?;
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let u = if ensemble.len() >= 2 {
            uncertainty(ensemble, &c.centroid.values)?
        } else {
            0.0
        };
        c.priority = mean * c.members.len() as f64 * (1.0 + u);
    }
    clusters.sort_by(|a, b| {
        b.priority
            .partial_cmp(&a.priority)
            .expect("finite")
            .then(a.id.cmp(&b.id))
    });
    Ok(clusters)
}

/// Labels every member plus same-kind unlabeled flaws within `rho_prop` of a
/// member. Returns the number of flaws labeled.
pub fn propagate_label(
    label: &Label,
    cluster: &mut FlawCluster,
    sfkb: &mut Sfkb,
    rho_prop: f64,
) -> Result<usize> {
    let rep = sfkb.get(cluster.representative)?;
    if rep.label.is_some() || cluster.verdict.is_some() {
        return Err(Error::Conflict(format!(
            "cluster {} is already labeled",
            cluster.id
        )));
    }
    let status = match label.verdict {
        Verdict::Confirmed => FlawStatus::Resolved,
        Verdict::Benign => FlawStatus::Benign,
    };
    let members: Vec<(u64, Vec<f64>, &'static str)> = cluster
        .members
        .iter()
        .map(|id| {
            sfkb.get(*id)
                .map(|f| (f.id, f.state.values.clone(), f.violation.key()))
        })
        .collect::<Result<_>>()?;
    let neighbours: Vec<u64> = sfkb
        .flaws
        .iter()
        .filter(|f| {
            f.label.is_none()
                && matches!(f.status, FlawStatus::Open | FlawStatus::Triaged)
                && !cluster.members.contains(&f.id)
                && members.iter().any(|(_, p, k)| {
                    *k == f.violation.key() && dist(p, &f.state.values) <= rho_prop
                })
        })
        .map(|f| f.id)
        .collect();
    let mut n = 0;
    for (id, _, _) in &members {
        if sfkb.get(*id)?.label.is_none() {
            sfkb.set_status(*id, status, Some(cluster.id), Some(label.clone()))?;
            n += 1;
        }
    }
    for id in neighbours {
        sfkb.set_status(id, status, Some(cluster.id), Some(label.clone()))?;
        n += 1;
    }
    cluster.verdict = Some(label.verdict);
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{record_flaw, Discovery, Violation};
    use crate::toyworld::DomainBox;

    fn add(s: &mut Sfkb, p: Vec<f64>) -> u64 {
        let f = FlawRecord {
            id: 0,
            state: StateVec::new(p),
            reward_at_discovery: 0.9,
            violation: Violation::OracleUnsafe,
            discovery: Discovery {
                strategy: "random".into(),
                seed: 0,
            },
            cycle: 0,
            status: FlawStatus::Open,
            cluster: None,
            label: None,
        };
        record_flaw(s, f).unwrap().id()
    }

    fn label() -> Label {
        Label {
            verdict: Verdict::Confirmed,
            author: Author::Human,
            note: String::new(),
            timestamp: 1,
        }
    }

    #[test]
    fn singleton_and_split() {
        let mut s = Sfkb::new(&DomainBox::unit(2));
        add(&mut s, vec![0.1, 0.1]);
        let c = cluster_flaws(&s.open_flaws(), 0.1, 1).unwrap();
        assert_eq!(c.len(), 1);
        add(&mut s, vec![0.5, 0.5]);
        assert_eq!(cluster_flaws(&s.open_flaws(), 0.1, 1).unwrap().len(), 2);
        assert!(cluster_flaws(&s.open_flaws(), 0.0, 1).is_err());
    }

    #[test]
    fn relabel_is_a_conflict() {
        let mut s = Sfkb::new(&DomainBox::unit(2));
        add(&mut s, vec![0.1, 0.1]);
        let mut c = cluster_flaws(&s.open_flaws(), 0.1, 1).unwrap().remove(0);
        assert_eq!(propagate_label(&label(), &mut c, &mut s, 0.2).unwrap(), 1);
        let before = s.clone();
        assert!(matches!(
            propagate_label(&label(), &mut c, &mut s, 0.2),
            Err(Error::Conflict(_))
        ));
        assert_eq!(s, before);
    }
}
