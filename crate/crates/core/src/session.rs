//! A flywheel session: world, constraints, data, artifact store, SFKB and
//! working triage/refinement state, with directory persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{fit_artifact, FitSummary, RewardArtifact};
use crate::audit::FlawStatus;
use crate::audit::{
    run_audit_phase, AuditOptions, AuditReport, RedTeamConfig, SearchRegion, Sfkb, THETA_HIGH,
    U_GAP,
};
use crate::constraints::{
    coverage_audit, filter_dataset, ConstraintSet, CoverageReport, Rejection,
};
use crate::error::{invalid, Error, Result};
use crate::orchestrator::CycleRecord;
use crate::refine::{
    apply_refinement, merge, propose_refinement, rollback, verify, Action, ArtifactStore, Lineage,
    Mode, RefinementProposal, RefitContext, RegressionLibrary, Tolerances, VerificationResult,
    VerifyInputs, VERIFY_BUDGET,
};
use crate::rng::mix;
use crate::scorer::{
    fit_ensemble, sample_negatives, NegativeConfig, NegativeSet, ScorerKind, ScorerModel,
    TrainConfig,
};
use crate::toyworld::{
    is_safe, make_world, read_dataset_csv, sample_expert, write_dataset_csv, ExpertDataset,
    StateVec, ToyWorld, WorldSpec,
};
use crate::triage::{
    cluster_flaws, prioritize, propagate_label, Author, FlawCluster, Label, Verdict,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub n_expert: usize,
    pub holdout_frac: f64,
    pub seed: u64,
    pub scorer: ScorerKind,
    pub negatives: NegativeConfig,
    pub train: Option<TrainConfig>,
    pub audit_budget: usize,
    pub verify_budget: usize,
    pub mc_samples: usize,
    pub rho_cluster: f64,
    pub theta_high: f64,
    pub u_gap: f64,
    pub tolerances: Tolerances,
    pub coverage_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            n_expert: 200,
            holdout_frac: 0.2,
            seed: 7,
            scorer: ScorerKind::Rbf,
            negatives: NegativeConfig::default(),
            train: None,
            audit_budget: 6000,
            verify_budget: VERIFY_BUDGET,
            mc_samples: 10_000,
            rho_cluster: 0.3,
            theta_high: THETA_HIGH,
            u_gap: U_GAP,
            tolerances: Tolerances::default(),
            coverage_threshold: 0.5,
        }
    }
}

impl SessionConfig {
    pub fn train_config(&self, world: &ToyWorld) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| TrainConfig {
            seed: self.seed,
            bandwidth: world.bandwidth(),
            ..TrainConfig::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase0Report {
    pub rejected: Vec<Rejection>,
    pub coverage: CoverageReport,
    pub fit: FitSummary,
}

/// Working state persisted in `state.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkState {
    pub clusters: Vec<FlawCluster>,
    pub proposals: BTreeMap<u64, RefinementProposal>,
    pub candidates: BTreeMap<u64, RewardArtifact>,
    pub verifications: BTreeMap<u64, VerificationResult>,
    pub next_cluster: u64,
    pub next_proposal: u64,
    pub clock: u64,
    pub cycles: u32,
    pub expert_actions: u64,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub config: SessionConfig,
    pub world: ToyWorld,
    pub cset: ConstraintSet,
    pub data: ExpertDataset,
    pub negatives: NegativeSet,
    pub ensemble: Vec<ScorerModel>,
    pub store: ArtifactStore,
    pub sfkb: Sfkb,
    pub reglib: RegressionLibrary,
    pub phase0: Phase0Report,
    pub work: WorkState,
    pub reports: Vec<CycleRecord>,
    pub busy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub head: u64,
    pub sfkb_version: usize,
}

impl Session {
    /// Phase 0: sample and filter expert data, fit the root artifact and its
    /// ensemble, run the coverage audit and build the regression library.
    pub fn create(
        id: &str,
        world: WorldSpec,
        cset: ConstraintSet,
        config: SessionConfig,
    ) -> Result<Self> {
        let world = make_world(world)?;
        cset.validate()?;
        let raw = sample_expert(&world, config.n_expert, config.holdout_frac, config.seed)?;
        Self::from_data(id, world, cset, config, raw)
    }

    pub fn from_data(
        id: &str,
        world: ToyWorld,
        cset: ConstraintSet,
        config: SessionConfig,
        raw: ExpertDataset,
    ) -> Result<Self> {
        let (data, rejected) = filter_dataset(&raw, &cset)?;
        let negatives = sample_negatives(&world.domain, &data, &config.negatives, config.seed)?;
        let cfg = config.train_config(&world);
        let (root, fit) =
            fit_artifact(config.scorer, &world.domain, &data, &negatives, &cfg, &cset)?;
        let ensemble = if cfg.ensemble >= 2 {
            fit_ensemble(config.scorer, &world.domain, &data, &negatives, &cfg)?
        } else {
            vec![]
        };
        let store = ArtifactStore::new(root);
        let coverage = coverage_audit(store.head(), &data.holdout(), config.coverage_threshold)?;
        let reglib =
            RegressionLibrary::from_root(store.head(), &data.holdout(), config.tolerances.clone())?;
        let sfkb = Sfkb::new(&world.domain);
        Ok(Session {
            id: id.to_string(),
            config,
            world,
            cset,
            data,
            negatives,
            ensemble,
            store,
            sfkb,
            reglib,
            phase0: Phase0Report {
                rejected,
                coverage,
                fit,
            },
            work: WorkState {
                next_cluster: 1,
                next_proposal: 1,
                ..WorkState::default()
            },
            reports: vec![],
            busy: false,
        })
    }

    pub fn head(&self) -> &RewardArtifact {
        self.store.head()
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            head: self.store.lineage.head,
            sfkb_version: self.sfkb.version(),
        }
    }

    pub fn judge(&self) -> impl Fn(&StateVec) -> bool + Sync + '_ {
        move |s: &StateVec| !is_safe(&self.world, s).unwrap_or(true)
    }

    fn tick(&mut self) -> u64 {
        self.work.clock += 1;
        self.work.clock
    }

    pub fn audit(
        &mut self,
        budget: usize,
        seed: u64,
        steer: Option<&SearchRegion>,
    ) -> Result<AuditReport> {
        let configs = RedTeamConfig::mix(budget, seed);
        self.audit_with(&configs, steer)
    }

    pub fn audit_with(
        &mut self,
        configs: &[RedTeamConfig],
        steer: Option<&SearchRegion>,
    ) -> Result<AuditReport> {
        self.audit_version(self.store.lineage.head, configs, steer)
    }

    /// Audits a stored version, which need not be the head.
    pub fn audit_version(
        &mut self,
        version: u64,
        configs: &[RedTeamConfig],
        steer: Option<&SearchRegion>,
    ) -> Result<AuditReport> {
        let opts = AuditOptions {
            cycle: self.work.cycles,
            theta_high: self.config.theta_high,
            u_gap: self.config.u_gap,
            region: steer,
        };
        let head = self.store.get(version)?.clone();
        let world = self.world.clone();
        let judge = move |s: &StateVec| !is_safe(&world, s).unwrap_or(true);
        run_audit_phase(
            &head,
            &self.cset,
            &judge,
            configs,
            &mut self.sfkb,
            &self.ensemble,
            &opts,
        )
    }

    /// Clusters every open flaw, marks members triaged and returns the queue.
    pub fn triage(&mut self) -> Result<Vec<FlawCluster>> {
        let open: Vec<crate::audit::FlawRecord> =
            self.sfkb.open_flaws().into_iter().cloned().collect();
        if open.is_empty() {
            return Ok(vec![]);
        }
        let refs: Vec<&crate::audit::FlawRecord> = open.iter().collect();
        let clusters = cluster_flaws(&refs, self.config.rho_cluster, self.work.next_cluster)?;
        self.work.next_cluster += clusters.len() as u64;
        let head = self.store.head().clone();
        let clusters = prioritize(clusters, &self.sfkb, &head, &self.ensemble)?;
        for c in &clusters {
            for m in &c.members {
                self.sfkb
                    .set_status(*m, FlawStatus::Triaged, Some(c.id), None)?;
            }
        }
        self.work.clusters.extend(clusters.iter().cloned());
        Ok(clusters)
    }

    pub fn cluster(&self, id: u64) -> Result<&FlawCluster> {
        self.work
            .clusters
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::NotFound(format!("cluster {id}")))
    }

    /// Clusters not yet labeled, in priority order.
    pub fn pending_clusters(&self) -> Vec<&FlawCluster> {
        self.work
            .clusters
            .iter()
            .filter(|c| c.verdict.is_none())
            .collect()
    }

    pub fn label(
        &mut self,
        cluster_id: u64,
        verdict: Verdict,
        author: Author,
        note: &str,
    ) -> Result<usize> {
        let idx = self
            .work
            .clusters
            .iter()
            .position(|c| c.id == cluster_id)
            .ok_or_else(|| Error::NotFound(format!("cluster {cluster_id}")))?;
        let label = Label {
            verdict,
            author,
            note: note.to_string(),
            timestamp: self.tick(),
        };
        let mut c = self.work.clusters[idx].clone();
        let n = propagate_label(
            &label,
            &mut c,
            &mut self.sfkb,
            2.0 * self.config.rho_cluster,
        )?;
        self.work.clusters[idx] = c;
        if author == Author::Human {
            self.work.expert_actions += 1;
        }
        Ok(n)
    }

    /// Marks a cluster whose flaws were all labeled by propagation from another cluster.
    pub fn inherit_label(&mut self, cluster_id: u64) -> Result<Option<Verdict>> {
        let c = self.cluster(cluster_id)?.clone();
        let rep = self.sfkb.get(c.representative)?;
        let v = rep.label.as_ref().map(|l| l.verdict);
        if let Some(v) = v {
            if let Some(cc) = self.work.clusters.iter_mut().find(|x| x.id == cluster_id) {
                cc.verdict = Some(v);
            }
        }
        Ok(v)
    }

    pub fn propose(
        &mut self,
        cluster_id: u64,
        mode: Mode,
        author: Author,
        action: Option<Action>,
    ) -> Result<RefinementProposal> {
        let cluster = self.cluster(cluster_id)?.clone();
        let id = self.work.next_proposal;
        let head = self.store.head().clone();
        let p = propose_refinement(id, &cluster, &self.sfkb, &head, mode, author, action)?;
        let cfg = self.config.train_config(&self.world);
        let ctx = RefitContext {
            data: &self.data,
            negatives: &self.negatives,
            cfg: &cfg,
        };
        let cand = apply_refinement(&head, &p, Some(&ctx))?;
        self.work.next_proposal += 1;
        self.work.proposals.insert(id, p.clone());
        self.work.candidates.insert(id, cand);
        Ok(p)
    }

    pub fn verify(&mut self, proposal_id: u64, seed: u64) -> Result<VerificationResult> {
        let p = self
            .work
            .proposals
            .get(&proposal_id)
            .ok_or_else(|| Error::NotFound(format!("refinement {proposal_id}")))?
            .clone();
        let cand = self.work.candidates[&proposal_id].clone();
        let extra: Vec<StateVec> = match p.cluster {
            Some(c) => self
                .cluster(c)?
                .members
                .iter()
                .map(|m| self.sfkb.get(*m).map(|f| f.state.clone()))
                .collect::<Result<_>>()?,
            None => vec![],
        };
        let world = self.world.clone();
        let judge = move |s: &StateVec| !is_safe(&world, s).unwrap_or(true);
        let inputs = VerifyInputs {
            cset: &self.cset,
            judge: &judge,
            budget: self.config.verify_budget,
            seed,
            extra_bad: &extra,
        };
        let r = verify(&cand, &p, &self.reglib, &inputs)?;
        self.work.verifications.insert(proposal_id, r.clone());
        Ok(r)
    }

    /// Merges a verified refinement and re-snapshots regression baselines.
    pub fn merge(&mut self, proposal_id: u64) -> Result<u64> {
        let cand = self
            .work
            .candidates
            .get(&proposal_id)
            .ok_or_else(|| Error::NotFound(format!("refinement {proposal_id}")))?
            .clone();
        let r = self
            .work
            .verifications
            .get(&proposal_id)
            .ok_or_else(|| {
                Error::MergeRefused(format!("refinement {proposal_id} has not been verified"))
            })?
            .clone();
        let v = merge(&mut self.store, &cand, &r)?;
        let head = self.store.head().clone();
        self.reglib.snapshot(&head)?;
        if let Some(c) = self.work.proposals[&proposal_id].cluster {
            let states: Vec<StateVec> = self
                .cluster(c)?
                .members
                .iter()
                .map(|m| self.sfkb.get(*m).map(|f| f.state.clone()))
                .collect::<Result<_>>()?;
            self.reglib.add_bad(states);
        }
        Ok(v)
    }

    pub fn rollback(&mut self, version: u64) -> Result<RewardArtifact> {
        let a = rollback(&mut self.store, version)?;
        self.reglib.snapshot(&a)?;
        Ok(a)
    }

    pub fn lineage(&self) -> &Lineage {
        &self.store.lineage
    }

    pub fn next_seed(&self, base: u64) -> u64 {
        mix(base, self.work.cycles as u64)
    }
}

const STATE_FILE: &str = "state.json";
const CONFIG_FILE: &str = "session.json";
const ARCHIVE_FORMAT: &str = "flywheel-archive-1";

#[derive(Serialize, Deserialize)]
struct Persisted {
    id: String,
    config: SessionConfig,
    phase0: Phase0Report,
    negatives: NegativeSet,
    reglib: RegressionLibrary,
    work: WorkState,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

impl Session {
    /// Every file of the session directory as (relative path, contents).
    pub fn files(&self) -> Result<Vec<(String, String)>> {
        let mut out = vec![
            ("world.json".to_string(), pretty(&self.world)),
            ("constraints.json".to_string(), pretty(&self.cset)),
        ];
        let mut csv = Vec::new();
        write_dataset_csv(&self.data, &mut csv)?;
        out.push((
            "data.csv".into(),
            String::from_utf8(csv).expect("utf-8 csv"),
        ));
        for (v, a) in &self.store.versions {
            out.push((
                format!("artifacts/artifact_v{v}.json"),
                a.to_canonical_json(),
            ));
        }
        out.push(("artifacts/lineage.json".into(), pretty(&self.store.lineage)));
        out.push(("sfkb.jsonl".into(), self.sfkb.to_jsonl()));
        for r in &self.reports {
            out.push((format!("reports/cycle_{}.json", r.report.cycle), pretty(r)));
        }
        let p = Persisted {
            id: self.id.clone(),
            config: self.config.clone(),
            phase0: self.phase0.clone(),
            negatives: self.negatives.clone(),
            reglib: self.reglib.clone(),
            work: self.work.clone(),
        };
        out.push((STATE_FILE.into(), pretty(&p)));
        out.push((CONFIG_FILE.into(), pretty(&self.config)));
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (rel, text) in self.files()? {
            write(&dir.join(rel), &text)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut files = BTreeMap::new();
        for rel in [
            "world.json",
            "constraints.json",
            "data.csv",
            "artifacts/lineage.json",
            "sfkb.jsonl",
            STATE_FILE,
        ] {
            let p = dir.join(rel);
            let text =
                fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            files.insert(rel.to_string(), text);
        }
        let lineage: Lineage = serde_json::from_str(&files["artifacts/lineage.json"])?;
        for e in &lineage.entries {
            let rel = format!("artifacts/artifact_v{}.json", e.version);
            let p = dir.join(&rel);
            files.insert(
                rel,
                fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
            );
        }
        if let Ok(rd) = fs::read_dir(dir.join("reports")) {
            for ent in rd {
                let ent = ent?;
                let name = ent.file_name().to_string_lossy().to_string();
                files.insert(format!("reports/{name}"), fs::read_to_string(ent.path())?);
            }
        }
        Self::from_files(&files)
    }

    pub fn from_files(files: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            files
                .get(k)
                .ok_or_else(|| Error::Data(format!("missing `{k}`")))
        };
        let world: WorldSpec = serde_json::from_str(get("world.json")?)?;
        let world = make_world(world)?;
        let cset: ConstraintSet = serde_json::from_str(get("constraints.json")?)?;
        cset.validate()?;
        let data = read_dataset_csv(get("data.csv")?.as_bytes())?;
        let lineage: Lineage = serde_json::from_str(get("artifacts/lineage.json")?)?;
        let mut versions = BTreeMap::new();
        for e in &lineage.entries {
            let a = RewardArtifact::from_json(get(&format!(
                "artifacts/artifact_v{}.json",
                e.version
            ))?)?;
            versions.insert(e.version, a);
        }
        let store = ArtifactStore { versions, lineage };
        store.check()?;
        let sfkb = Sfkb::from_jsonl(&world.domain, get("sfkb.jsonl")?)?;
        let p: Persisted = serde_json::from_str(get(STATE_FILE)?)?;
        let cfg = p.config.train_config(&world);
        let ensemble = if cfg.ensemble >= 2 {
            fit_ensemble(p.config.scorer, &world.domain, &data, &p.negatives, &cfg)?
        } else {
            vec![]
        };
        let mut reports: Vec<CycleRecord> = files
            .iter()
            .filter(|(k, _)| k.starts_with("reports/cycle_"))
            .map(|(_, v)| serde_json::from_str(v).map_err(Error::from))
            .collect::<Result<_>>()?;
        reports.sort_by_key(|r| r.report.cycle);
        Ok(Session {
            id: p.id,
            config: p.config,
            world,
            cset,
            data,
            negatives: p.negatives,
            ensemble,
            store,
            sfkb,
            reglib: p.reglib,
            phase0: p.phase0,
            work: p.work,
            reports,
            busy: false,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    files: BTreeMap<String, String>,
}

pub fn export_session(session: &Session) -> Result<String> {
    if session.busy {
        return Err(Error::Conflict("session has an active cycle".into()));
    }
    let files = session.files()?.into_iter().collect();
    Ok(serde_json::to_string(&Archive {
        format: ARCHIVE_FORMAT.into(),
        files,
    })?)
}

pub fn import_session(archive: &str) -> Result<Session> {
    let a: Archive = serde_json::from_str(archive)?;
    if a.format != ARCHIVE_FORMAT {
        return Err(Error::Data(format!(
            "unknown archive format `{}`",
            a.format
        )));
    }
    if !a.files.contains_key("artifacts/lineage.json") {
        return Err(Error::Data("archive has no artifacts/lineage.json".into()));
    }
    Session::from_files(&a.files)
}

pub fn session_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

pub fn parse_region(center: Vec<f64>, radius: f64) -> Result<SearchRegion> {
    if !(radius > 0.0) {
        return Err(invalid("steer radius must be positive"));
    }
    Ok(SearchRegion { center, radius })
}
