//! Red-team search for high-reward unsafe states, blue-team coverage and
//! uncertainty monitoring, and the shared flaw knowledge base (SFKB).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::RewardArtifact;
use crate::constraints::{violates, ConstraintSet};
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::{mix, seeded, stream, Rng};
use crate::scorer::{uncertainty, ScorerModel};
use crate::toyworld::{dist, DomainBox, StateVec};
use crate::triage::Label;

pub const GRID_RES: usize = 32;
pub const THETA_HIGH: f64 = 0.5;
pub const U_GAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Constraint { ids: Vec<String> },
    OracleUnsafe,
    CoverageGap,
}

impl Violation {
    pub fn key(&self) -> &'static str {
        match self {
            Violation::Constraint { .. } => "constraint",
            Violation::OracleUnsafe => "oracle_unsafe",
            Violation::CoverageGap => "coverage_gap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlawStatus {
    Open,
    Triaged,
    Resolved,
    Benign,
}

impl FlawStatus {
    fn rank(self) -> u8 {
        match self {
            FlawStatus::Open => 0,
            FlawStatus::Triaged => 1,
            FlawStatus::Resolved | FlawStatus::Benign => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(FlawStatus::Open),
            "triaged" => Ok(FlawStatus::Triaged),
            "resolved" => Ok(FlawStatus::Resolved),
            "benign" => Ok(FlawStatus::Benign),
            other => Err(invalid(format!("unknown status `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discovery {
    pub strategy: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlawRecord {
    pub id: u64,
    pub state: StateVec,
    pub reward_at_discovery: f64,
    pub violation: Violation,
    pub discovery: Discovery,
    pub cycle: u32,
    pub status: FlawStatus,
    pub cluster: Option<u64>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub cell: usize,
    pub center: Vec<f64>,
    pub predicted_reward: f64,
    pub uncertainty: f64,
    pub cycle: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageMap {
    pub res: usize,
    pub domain: DomainBox,
    pub visits: Vec<u64>,
}

impl CoverageMap {
    pub fn new(domain: &DomainBox, res: usize) -> Self {
        CoverageMap {
            res,
            domain: domain.clone(),
            visits: vec![0; res.pow(domain.dims as u32)],
        }
    }

    pub fn cell_of(&self, p: &[f64]) -> usize {
        let mut idx = 0;
        for i in (0..self.domain.dims).rev() {
            let f = (p[i] - self.domain.lo[i]) / self.domain.extent(i);
            let c =
                ((f * self.res as f64).floor() as isize).clamp(0, self.res as isize - 1) as usize;
            idx = idx * self.res + c;
        }
        idx
    }

    fn cell_coords(&self, cell: usize) -> Vec<usize> {
        let mut c = cell;
        (0..self.domain.dims)
            .map(|_| {
                let v = c % self.res;
                c /= self.res;
                v
            })
            .collect()
    }

    pub fn cell_box(&self, cell: usize) -> DomainBox {
        let cc = self.cell_coords(cell);
        let lo: Vec<f64> = (0..self.domain.dims)
            .map(|i| self.domain.lo[i] + self.domain.extent(i) * cc[i] as f64 / self.res as f64)
            .collect();
        let hi: Vec<f64> = (0..self.domain.dims)
            .map(|i| {
                self.domain.lo[i] + self.domain.extent(i) * (cc[i] + 1) as f64 / self.res as f64
            })
            .collect();
        DomainBox {
            dims: self.domain.dims,
            lo,
            hi,
        }
    }

    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        self.cell_box(cell).center()
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.domain.diagonal() / self.res as f64
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().sum()
    }

    pub fn fraction_visited(&self) -> f64 {
        self.visits.iter().filter(|v| **v > 0).count() as f64 / self.visits.len() as f64
    }
}

/// One line of the append-only SFKB log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SfkbEvent {
    Flaw(FlawRecord),
    Gap(GapEntry),
    Status {
        id: u64,
        status: FlawStatus,
        cluster: Option<u64>,
        label: Option<Label>,
    },
    Visits {
        cells: Vec<(usize, u64)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sfkb {
    pub flaws: Vec<FlawRecord>,
    pub gaps: Vec<GapEntry>,
    pub coverage: CoverageMap,
    pub rho_dedupe: f64,
    log: Vec<SfkbEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "id", rename_all = "snake_case")]
pub enum RecordOutcome {
    New(u64),
    Deduped(u64),
}

impl RecordOutcome {
    pub fn id(self) -> u64 {
        match self {
            RecordOutcome::New(i) | RecordOutcome::Deduped(i) => i,
        }
    }
}

impl Sfkb {
    pub fn new(domain: &DomainBox) -> Self {
        let coverage = CoverageMap::new(domain, GRID_RES);
        let rho_dedupe = coverage.cell_diagonal();
        Sfkb {
            flaws: vec![],
            gaps: vec![],
            coverage,
            rho_dedupe,
            log: vec![],
        }
    }

    pub fn log(&self) -> &[SfkbEvent] {
        &self.log
    }

    pub fn version(&self) -> usize {
        self.log.len()
    }

    fn apply(&mut self, ev: SfkbEvent) -> Result<()> {
        match &ev {
            SfkbEvent::Flaw(f) => {
                if self.flaws.iter().any(|g| g.id == f.id) {
                    return Err(invalid(format!("duplicate flaw id {}", f.id)));
                }
                self.flaws.push(f.clone());
            }
            SfkbEvent::Gap(g) => self.gaps.push(g.clone()),
            SfkbEvent::Status {
                id,
                status,
                cluster,
                label,
            } => {
                let f = self.get_mut(*id)?;
                if status.rank() < f.status.rank() || (f.status.rank() == 2 && *status != f.status)
                {
                    return Err(invalid(format!(
                        "flaw {id}: status cannot move from {:?} to {status:?}",
                        f.status
                    )));
                }
                f.status = *status;
                if cluster.is_some() {
                    f.cluster = *cluster;
                }
                if label.is_some() {
                    f.label = label.clone();
                }
            }
            SfkbEvent::Visits { cells } => {
                for (c, n) in cells {
                    *self
                        .coverage
                        .visits
                        .get_mut(*c)
                        .ok_or_else(|| invalid(format!("coverage cell {c} out of range")))? += n;
                }
            }
        }
        self.log.push(ev);
        Ok(())
    }

    pub fn replay(domain: &DomainBox, events: impl IntoIterator<Item = SfkbEvent>) -> Result<Self> {
        let mut s = Sfkb::new(domain);
        for ev in events {
            s.apply(ev)?;
        }
        Ok(s)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ev in &self.log {
            out.push_str(&serde_json::to_string(ev).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(domain: &DomainBox, text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<SfkbEvent>(l).map_err(Into::into))
            .collect::<Result<Vec<_>>>()?;
        Sfkb::replay(domain, events)
    }

    pub fn get(&self, id: u64) -> Result<&FlawRecord> {
        self.flaws
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| crate::Error::NotFound(format!("flaw {id}")))
    }

    fn get_mut(&mut self, id: u64) -> Result<&mut FlawRecord> {
        self.flaws
            .iter_mut()
            .find(|f| f.id == id)
            .ok_or_else(|| crate::Error::NotFound(format!("flaw {id}")))
    }

    pub fn set_status(
        &mut self,
        id: u64,
        status: FlawStatus,
        cluster: Option<u64>,
        label: Option<Label>,
    ) -> Result<()> {
        self.apply(SfkbEvent::Status {
            id,
            status,
            cluster,
            label,
        })
    }

    pub fn add_gap(&mut self, g: GapEntry) -> Result<()> {
        self.apply(SfkbEvent::Gap(g))
    }

    pub fn add_visits(&mut self, cells: &[usize]) -> Result<()> {
        let mut counts = std::collections::BTreeMap::new();
        for c in cells {
            *counts.entry(*c).or_insert(0u64) += 1;
        }
        if counts.is_empty() {
            return Ok(());
        }
        self.apply(SfkbEvent::Visits {
            cells: counts.into_iter().collect(),
        })
    }

    pub fn open_flaws(&self) -> Vec<&FlawRecord> {
        self.flaws
            .iter()
            .filter(|f| f.status == FlawStatus::Open)
            .collect()
    }

    pub fn next_id(&self) -> u64 {
        self.flaws.iter().map(|f| f.id).max().unwrap_or(0) + 1
    }

    /// Gap entries on cells that are still unvisited, most promising first.
    pub fn pending_gaps(&self) -> Vec<GapEntry> {
        let mut latest: std::collections::BTreeMap<usize, &GapEntry> =
            std::collections::BTreeMap::new();
        for g in &self.gaps {
            if self.coverage.visits[g.cell] == 0 {
                latest.insert(g.cell, g);
            }
        }
        let mut v: Vec<GapEntry> = latest.into_values().cloned().collect();
        v.sort_by(|a, b| {
            (b.predicted_reward + b.uncertainty)
                .partial_cmp(&(a.predicted_reward + a.uncertainty))
                .expect("finite")
                .then(a.cell.cmp(&b.cell))
        });
        v
    }
}

pub fn record_flaw(sfkb: &mut Sfkb, candidate: FlawRecord) -> Result<RecordOutcome> {
    if candidate.state.dim() != sfkb.coverage.domain.dims
        || candidate.state.values.iter().any(|v| !v.is_finite())
        || !candidate.reward_at_discovery.is_finite()
    {
        return Err(invalid("malformed flaw record"));
    }
    let key = candidate.violation.key();
    if let Some(f) = sfkb.flaws.iter().find(|f| {
        f.status == FlawStatus::Open
            && f.violation.key() == key
            && dist(&f.state.values, &candidate.state.values) <= sfkb.rho_dedupe
    }) {
        return Ok(RecordOutcome::Deduped(f.id));
    }
    let id = sfkb.next_id();
    sfkb.apply(SfkbEvent::Flaw(FlawRecord {
        id,
        status: FlawStatus::Open,
        cluster: None,
        label: None,
        ..candidate
    }))?;
    Ok(RecordOutcome::New(id))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Hillclimb,
    Anneal,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Hillclimb => "hillclimb",
            Strategy::Anneal => "anneal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedTeamConfig {
    pub strategy: Strategy,
    pub budget: usize,
    /// Step size as a fraction of each domain extent.
    pub step: f64,
    pub restarts: usize,
    pub seed: u64,
    pub theta_high: f64,
    /// Draw starting points from SFKB gap entries before uniform ones.
    #[serde(default = "yes")]
    pub use_gaps: bool,
}

fn yes() -> bool {
    true
}

impl RedTeamConfig {
    pub fn new(strategy: Strategy, budget: usize, seed: u64) -> Self {
        RedTeamConfig {
            strategy,
            budget,
            step: 0.05,
            restarts: 8,
            seed,
            theta_high: THETA_HIGH,
            use_gaps: true,
        }
    }

    /// The default mix: the budget split evenly over random, hillclimb and anneal.
    pub fn mix(budget: usize, seed: u64) -> Vec<Self> {
        let per = budget / 3;
        [Strategy::Random, Strategy::Hillclimb, Strategy::Anneal]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let b = if i == 0 { budget - 2 * per } else { per };
                RedTeamConfig::new(*s, b.max(1), mix(seed, i as u64))
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(invalid("red-team budget must be at least 1"));
        }
        if !(self.theta_high > 0.0 && self.theta_high < 1.0) || !(self.step > 0.0) {
            return Err(invalid(
                "theta_high must lie in (0,1) and step must be positive",
            ));
        }
        Ok(())
    }
}

/// Ball restricting where a search may evaluate, intersected with the domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

struct Space<'a> {
    domain: &'a DomainBox,
    region: Option<&'a SearchRegion>,
}

impl Space<'_> {
    fn inside(&self, p: &[f64]) -> bool {
        self.domain.contains(p) && self.region.is_none_or(|r| dist(p, &r.center) <= r.radius)
    }

    fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        match self.region {
            None => self.domain.sample(rng),
            Some(r) => {
                let lo: Vec<f64> = (0..self.domain.dims)
                    .map(|i| (r.center[i] - r.radius).max(self.domain.lo[i]))
                    .collect();
                let hi: Vec<f64> = (0..self.domain.dims)
                    .map(|i| (r.center[i] + r.radius).min(self.domain.hi[i]))
                    .collect();
                for _ in 0..10_000 {
                    let p: Vec<f64> = (0..self.domain.dims)
                        .map(|i| rng.random_range(lo[i]..=hi[i]))
                        .collect();
                    if self.inside(&p) {
                        return p;
                    }
                }
                let mut c = r.center.clone();
                self.domain.clamp(&mut c);
                c
            }
        }
    }

    /// Pull a proposal back inside: clamp to the box, then shrink toward the ball centre.
    fn project(&self, p: &mut Vec<f64>) {
        self.domain.clamp(p);
        if let Some(r) = self.region {
            let d = dist(p, &r.center);
            if d > r.radius {
                let f = r.radius / d;
                for (x, c) in p.iter_mut().zip(&r.center) {
                    *x = c + (*x - c) * f;
                }
                self.domain.clamp(p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub state: StateVec,
    pub reward: f64,
    pub violation: Violation,
    pub eval_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    pub candidates: Vec<Candidate>,
    pub evaluations: usize,
    pub cells: Vec<usize>,
    pub max_unsafe_reward: f64,
    pub first_flaw_eval: Option<usize>,
}

pub type Judge<'a> = &'a (dyn Fn(&StateVec) -> bool + Sync);

struct Evaluator<'a> {
    artifact: &'a RewardArtifact,
    cset: &'a ConstraintSet,
    judge: Judge<'a>,
    theta: f64,
    coverage: &'a CoverageMap,
    out: SearchOutcome,
}

impl Evaluator<'_> {
    fn budget_left(&self, budget: usize) -> bool {
        self.out.evaluations < budget
    }

    /// Evaluates one state and returns (reward, violating).
    fn eval(&mut self, p: &[f64]) -> (f64, bool) {
        let s = StateVec::new(p.to_vec());
        let r = self.artifact.reward_or_zero(&s, 0);
        self.out.evaluations += 1;
        self.out.cells.push(self.coverage.cell_of(p));
        let ids = violates(self.cset, &s);
        let bad = !ids.is_empty() || (self.judge)(&s);
        if bad {
            self.out.max_unsafe_reward = self.out.max_unsafe_reward.max(r);
            if r >= self.theta {
                let violation = if ids.is_empty() {
                    Violation::OracleUnsafe
                } else {
                    Violation::Constraint { ids }
                };
                if self.out.first_flaw_eval.is_none() {
                    self.out.first_flaw_eval = Some(self.out.evaluations);
                }
                self.out.candidates.push(Candidate {
                    state: s,
                    reward: r,
                    violation,
                    eval_index: self.out.evaluations,
                });
            }
        }
        (r, bad)
    }
}

fn jitter_in_cell(cov: &CoverageMap, cell: usize, rng: &mut Rng) -> Vec<f64> {
    cov.cell_box(cell).sample(rng)
}

pub fn red_team_search(
    artifact: &RewardArtifact,
    cset: &ConstraintSet,
    judge: Judge,
    cfg: &RedTeamConfig,
    sfkb: &Sfkb,
    region: Option<&SearchRegion>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let domain = &artifact.scorer.domain;
    let space = Space { domain, region };
    let mut rng = seeded(cfg.seed, stream::REDTEAM);
    let gaps: Vec<GapEntry> = if cfg.use_gaps {
        sfkb.pending_gaps()
            .into_iter()
            .filter(|g| region.is_none_or(|r| dist(&g.center, &r.center) <= r.radius))
            .collect()
    } else {
        vec![]
    };
    let mut gap_iter = gaps.into_iter();
    let mut ev = Evaluator {
        artifact,
        cset,
        judge,
        theta: cfg.theta_high,
        coverage: &sfkb.coverage,
        out: SearchOutcome {
            strategy: cfg.strategy,
            seed: cfg.seed,
            candidates: vec![],
            evaluations: 0,
            cells: vec![],
            max_unsafe_reward: 0.0,
            first_flaw_eval: None,
        },
    };
    let mut start = |rng: &mut Rng| -> Vec<f64> {
        match gap_iter.next() {
            Some(g) => {
                let mut p = jitter_in_cell(&sfkb.coverage, g.cell, rng);
                space.project(&mut p);
                p
            }
            None => space.sample(rng),
        }
    };
    let step: Vec<f64> = (0..domain.dims)
        .map(|i| cfg.step * domain.extent(i))
        .collect();
    match cfg.strategy {
        Strategy::Random => {
            while ev.budget_left(cfg.budget) {
                let p = start(&mut rng);
                ev.eval(&p);
            }
        }
        Strategy::Hillclimb => {
            let restarts = cfg.restarts.max(1);
            for r in 0..restarts {
                let stop = cfg.budget * (r + 1) / restarts;
                if !ev.budget_left(stop) {
                    continue;
                }
                let mut x = start(&mut rng);
                let (mut fx, _) = ev.eval(&x);
                let mut scale = 1.0;
                while ev.budget_left(stop) && scale > 1e-3 {
                    let mut improved = false;
                    'dims: for i in 0..domain.dims {
                        for sign in [1.0, -1.0] {
                            if !ev.budget_left(stop) {
                                break 'dims;
                            }
                            let mut y = x.clone();
                            y[i] += sign * scale * step[i];
                            space.project(&mut y);
                            let (fy, _) = ev.eval(&y);
                            if fy > fx {
                                x = y;
                                fx = fy;
                                improved = true;
                                break 'dims;
                            }
                        }
                    }
                    if !improved {
                        scale *= 0.5;
                    }
                }
            }
        }
        Strategy::Anneal => {
            let restarts = cfg.restarts.max(1);
            let (t0, t1) = (0.1f64, 1e-3f64);
            for r in 0..restarts {
                let stop = cfg.budget * (r + 1) / restarts;
                if !ev.budget_left(stop) {
                    continue;
                }
                let len = (stop - ev.out.evaluations).max(1) as f64;
                let begin = ev.out.evaluations;
                let mut x = start(&mut rng);
                let (rx, bx) = ev.eval(&x);
                let mut fx = if bx { rx } else { rx - 1.0 };
                while ev.budget_left(stop) {
                    let frac = (ev.out.evaluations - begin) as f64 / len;
                    let temp = t0 * (t1 / t0).powf(frac);
                    let mut y: Vec<f64> = x
                        .iter()
                        .zip(&step)
                        .map(|(v, s)| {
                            v + Normal::new(0.0, *s)
                                .expect("positive step")
                                .sample(&mut rng)
                        })
                        .collect();
                    space.project(&mut y);
                    let (ry, by) = ev.eval(&y);
                    let fy = if by { ry } else { ry - 1.0 };
                    if fy >= fx || rng.random::<f64>() < ((fy - fx) / temp).exp() {
                        x = y;
                        fx = fy;
                    }
                }
            }
        }
    }
    Ok(ev.out)
}

pub fn blue_team_scan(
    sfkb: &mut Sfkb,
    artifact: &RewardArtifact,
    ensemble: &[ScorerModel],
    theta_high: f64,
    u_gap: f64,
    cycle: u32,
) -> Result<Vec<GapEntry>> {
    let cells: Vec<usize> = (0..sfkb.coverage.visits.len())
        .filter(|c| sfkb.coverage.visits[*c] == 0)
        .collect();
    let cov = &sfkb.coverage;
    // the head joins the bootstrap members so post-fit edits register as disagreement
    let members: Vec<ScorerModel> = if ensemble.is_empty() {
        vec![]
    } else {
        ensemble.iter().chain([&artifact.scorer]).cloned().collect()
    };
    let scored = par::map(&cells, |c| {
        let center = cov.cell_center(*c);
        let r = artifact.reward_or_zero(&StateVec::new(center.clone()), 0);
        let u = if members.len() >= 2 {
            uncertainty(&members, &center).unwrap_or(0.0)
        } else {
            0.0
        };
        (*c, center, r, u)
    });
    let mut out = Vec::new();
    for (cell, center, r, u) in scored {
        if r >= theta_high / 2.0 || u >= u_gap {
            let g = GapEntry {
                cell,
                center,
                predicted_reward: r,
                uncertainty: u,
                cycle,
            };
            sfkb.add_gap(g.clone())?;
            out.push(g);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub cycle: u32,
    pub flaws_found: usize,
    pub new_flaws: Vec<u64>,
    pub deduped: usize,
    pub evaluations: usize,
    pub coverage_fraction: f64,
    pub max_unsafe_reward: f64,
    pub gaps_added: usize,
    pub first_flaw_eval: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct AuditOptions<'a> {
    pub cycle: u32,
    pub theta_high: f64,
    pub u_gap: f64,
    pub region: Option<&'a SearchRegion>,
}

impl Default for AuditOptions<'_> {
    fn default() -> Self {
        AuditOptions {
            cycle: 0,
            theta_high: THETA_HIGH,
            u_gap: U_GAP,
            region: None,
        }
    }
}

pub fn run_audit_phase(
    artifact: &RewardArtifact,
    cset: &ConstraintSet,
    judge: Judge,
    configs: &[RedTeamConfig],
    sfkb: &mut Sfkb,
    ensemble: &[ScorerModel],
    opts: &AuditOptions,
) -> Result<AuditReport> {
    if configs.is_empty() {
        return Err(invalid("audit needs at least one red-team config"));
    }
    let gaps = blue_team_scan(
        sfkb,
        artifact,
        ensemble,
        opts.theta_high,
        opts.u_gap,
        opts.cycle,
    )?;
    let snapshot: &Sfkb = sfkb;
    let outcomes = par::map(configs, |c| {
        red_team_search(artifact, cset, judge, c, snapshot, opts.region)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut report = AuditReport {
        cycle: opts.cycle,
        flaws_found: 0,
        new_flaws: vec![],
        deduped: 0,
        evaluations: 0,
        coverage_fraction: 0.0,
        max_unsafe_reward: 0.0,
        gaps_added: gaps.len(),
        first_flaw_eval: None,
    };
    let mut offset = 0;
    for o in outcomes {
        for c in o.candidates {
            let s = &c.state;
            let r = artifact.reward(s, 0)?;
            let still = r >= opts.theta_high && (!violates(cset, s).is_empty() || judge(s));
            if !still {
                return Err(invalid("red-team candidate failed re-verification"));
            }
            report.flaws_found += 1;
            let rec = FlawRecord {
                id: 0,
                state: c.state,
                reward_at_discovery: r,
                violation: c.violation,
                discovery: Discovery {
                    strategy: o.strategy.tag().into(),
                    seed: o.seed,
                },
                cycle: opts.cycle,
                status: FlawStatus::Open,
                cluster: None,
                label: None,
            };
            match record_flaw(sfkb, rec)? {
                RecordOutcome::New(id) => report.new_flaws.push(id),
                RecordOutcome::Deduped(_) => report.deduped += 1,
            }
        }
        if report.first_flaw_eval.is_none() {
            report.first_flaw_eval = o.first_flaw_eval.map(|e| e + offset);
        }
        offset += o.evaluations;
        report.evaluations += o.evaluations;
        report.max_unsafe_reward = report.max_unsafe_reward.max(o.max_unsafe_reward);
        sfkb.add_visits(&o.cells)?;
    }
    report.coverage_fraction = sfkb.coverage.fraction_visited();
    Ok(report)
}
