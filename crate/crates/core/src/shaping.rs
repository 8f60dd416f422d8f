//! Potential-based shaping with artifact versions as potentials, a
//! value-iteration harness for deterministic grid MDPs, and hard penalties.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::artifact::RewardArtifact;
use crate::error::{invalid, Error, Result};
use crate::toyworld::StateVec;

/// A time-indexed potential over states of type `S`.
pub trait Potential<S: ?Sized> {
    fn phi(&self, t: usize, s: &S) -> f64;
}

/// Artifact versions indexed by step; the last version repeats past the end.
pub struct PotentialSeq<'a> {
    versions: Vec<&'a RewardArtifact>,
}

impl<'a> PotentialSeq<'a> {
    pub fn new(versions: Vec<&'a RewardArtifact>) -> Result<Self> {
        if versions.is_empty() {
            return Err(invalid("potential sequence is empty"));
        }
        Ok(PotentialSeq { versions })
    }

    pub fn len(&self) -> usize {
        self.versions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.versions.is_empty()
    }
}

impl Potential<StateVec> for PotentialSeq<'_> {
    fn phi(&self, t: usize, s: &StateVec) -> f64 {
        self.versions[t.min(self.versions.len() - 1)].reward_or_zero(s, 0)
    }
}

/// Table-driven potential: `table[t][state]`, last row repeating.
pub struct TablePotential(pub Vec<Vec<f64>>);

impl Potential<usize> for TablePotential {
    fn phi(&self, t: usize, s: &usize) -> f64 {
        self.0[t.min(self.0.len() - 1)][*s]
    }
}

pub fn shaping_bonus<S: ?Sized, P: Potential<S>>(
    seq: &P,
    t: usize,
    s: &S,
    s_next: &S,
    gamma: f64,
) -> f64 {
    gamma * seq.phi(t + 1, s_next) - seq.phi(t, s)
}

/// Discounted sum of shaping bonuses along a trajectory s_0..s_T.
pub fn shaped_return_delta<S, P: Potential<S>>(traj: &[S], seq: &P, gamma: f64) -> Result<f64> {
    if traj.len() < 2 {
        return Err(invalid("trajectory needs at least two states"));
    }
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..traj.len() - 1 {
        total += disc * shaping_bonus(seq, t, &traj[t], &traj[t + 1], gamma);
        disc *= gamma;
    }
    Ok(total)
}

pub fn write_trace_csv<W: Write>(
    traj: &[StateVec],
    seq: &PotentialSeq,
    gamma: f64,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = traj.first().map(StateVec::dim).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    header.extend(["phi".to_string(), "bonus".to_string()]);
    w.write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for (t, s) in traj.iter().enumerate() {
        let bonus = traj.get(t + 1).map(|n| shaping_bonus(seq, t, s, n, gamma));
        let mut row = vec![t.to_string()];
        row.extend(s.values.iter().map(|v| v.to_string()));
        row.push(seq.phi(t, s).to_string());
        row.push(bonus.map(|b| b.to_string()).unwrap_or_default());
        w.write_record(&row)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMDP {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a]` is the successor state.
    pub transition: Vec<Vec<usize>>,
    pub base_reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub terminal: Vec<bool>,
    /// Optional coordinates per state, used to evaluate artifact potentials.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coords: Vec<Vec<f64>>,
}

pub const VI_TOLERANCE: f64 = 1e-10;
pub const VI_MAX_SWEEPS: usize = 100_000;
/// Actions whose value is within this of the best count as tied.
pub const TIE_TOLERANCE: f64 = 1e-7;

impl GridMDP {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(invalid("MDP needs states and actions"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma must lie in (0,1]"));
        }
        if self.transition.len() != self.n_states
            || self.base_reward.len() != self.n_states
            || self.terminal.len() != self.n_states
        {
            return Err(invalid("per-state tables must have n_states rows"));
        }
        for s in 0..self.n_states {
            if self.transition[s].len() != self.n_actions
                || self.base_reward[s].len() != self.n_actions
            {
                return Err(invalid("per-action tables must have n_actions columns"));
            }
            if self.transition[s].iter().any(|n| *n >= self.n_states) {
                return Err(invalid("transition leaves the state set"));
            }
        }
        Ok(())
    }

    /// w x h grid, actions up/down/left/right, bumping into walls stays put.
    /// Every step pays `step_reward`; the goal cell is terminal.
    pub fn gridworld(
        w: usize,
        h: usize,
        goal: (usize, usize),
        gamma: f64,
        step_reward: f64,
    ) -> Self {
        let n = w * h;
        let idx = |x: usize, y: usize| y * w + x;
        let mut transition = vec![vec![0; 4]; n];
        let mut coords = Vec::with_capacity(n);
        for y in 0..h {
            for x in 0..w {
                let s = idx(x, y);
                transition[s] = vec![
                    idx(x, (y + 1).min(h - 1)),
                    idx(x, y.saturating_sub(1)),
                    idx(x.saturating_sub(1), y),
                    idx((x + 1).min(w - 1), y),
                ];
                coords.push(vec![
                    (x as f64 + 0.5) / w as f64,
                    (y as f64 + 0.5) / h as f64,
                ]);
            }
        }
        let mut terminal = vec![false; n];
        terminal[idx(goal.0, goal.1)] = true;
        GridMDP {
            n_states: n,
            n_actions: 4,
            transition,
            base_reward: vec![vec![step_reward; 4]; n],
            gamma,
            terminal,
            coords,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub values: Vec<f64>,
    /// Greedy action per state; `None` on terminal states.
    pub policy: Vec<Option<usize>>,
    pub sweeps: usize,
}

/// Value iteration with optional static shaping potential (zero on terminals).
pub fn optimal_policy(mdp: &GridMDP, shaping: Option<&[f64]>) -> Result<Solution> {
    mdp.validate()?;
    if let Some(phi) = shaping {
        if phi.len() != mdp.n_states {
            return Err(invalid("potential must have one value per state"));
        }
    }
    if mdp.gamma >= 1.0 && !mdp.terminal.iter().any(|t| *t) {
        return Err(Error::NoConvergence(
            "gamma = 1 without terminal states".into(),
        ));
    }
    let phi = |s: usize| match shaping {
        Some(p) if !mdp.terminal[s] => p[s],
        _ => 0.0,
    };
    let q = |v: &[f64], s: usize, a: usize| {
        let n = mdp.transition[s][a];
        let f = mdp.gamma * phi(n) - phi(s);
        mdp.base_reward[s][a] + f + mdp.gamma * v[n]
    };
    let mut v = vec![0.0; mdp.n_states];
    let mut sweeps = 0;
    loop {
        if sweeps >= VI_MAX_SWEEPS {
            return Err(Error::NoConvergence(format!(
                "residual above {VI_TOLERANCE} after {sweeps} sweeps"
            )));
        }
        sweeps += 1;
        let mut residual: f64 = 0.0;
        for s in 0..mdp.n_states {
            if mdp.terminal[s] {
                continue;
            }
            let best = (0..mdp.n_actions)
                .map(|a| q(&v, s, a))
                .fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if !residual.is_finite() {
            return Err(Error::NoConvergence("values diverged".into()));
        }
        if residual < VI_TOLERANCE {
            break;
        }
    }
    let policy = (0..mdp.n_states)
        .map(|s| {
            if mdp.terminal[s] {
                return None;
            }
            let qs: Vec<f64> = (0..mdp.n_actions).map(|a| q(&v, s, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            qs.iter().position(|x| *x >= best - TIE_TOLERANCE)
        })
        .collect();
    Ok(Solution {
        values: v,
        policy,
        sweeps,
    })
}

/// Potential over grid states taken from an artifact evaluated at their coordinates.
pub fn potential_from_artifact(mdp: &GridMDP, artifact: &RewardArtifact) -> Result<Vec<f64>> {
    if mdp.coords.len() != mdp.n_states {
        return Err(invalid("MDP has no state coordinates"));
    }
    mdp.coords
        .iter()
        .map(|c| artifact.reward(&StateVec::new(c.clone()), 0))
        .collect()
}

pub fn hard_penalty(
    artifact: &RewardArtifact,
    s: &StateVec,
    theta_safe: f64,
    kappa: f64,
) -> Result<f64> {
    if !(kappa > 0.0) || !(0.0..=1.0).contains(&theta_safe) {
        return Err(invalid(
            "hard penalty needs kappa > 0 and theta_safe in [0,1]",
        ));
    }
    Ok(if artifact.reward(s, 0)? < theta_safe {
        -kappa
    } else {
        0.0
    })
}
