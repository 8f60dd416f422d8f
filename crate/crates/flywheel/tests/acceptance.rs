//! One line per acceptance criterion. Each check builds its own oracle.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use flywheel_core::artifact::{constant, fit_artifact, plant_anchor, RewardArtifact};
use flywheel_core::audit::{
    blue_team_scan, red_team_search, run_audit_phase, AuditOptions, RedTeamConfig, Sfkb,
    Strategy as Search, THETA_HIGH, U_GAP,
};
use flywheel_core::constraints::ConstraintSet;
use flywheel_core::mapping::{sculpt, validate_monotone, MappingParams, SculptDirective};
use flywheel_core::orchestrator::{run_cycle, CycleReport, Metrics, OracleLabeler};
use flywheel_core::recon::{loss, loss_and_grad, param_count, Mlp};
use flywheel_core::refine::{Action, Mode, THETA_GOOD};
use flywheel_core::scorer::{
    add_anchor, fit_ensemble, sample_negatives, Anchor, NegativeConfig, NegativeSet, Params,
    ScorerKind, ScorerModel, TrainConfig,
};
use flywheel_core::session::{Session, SessionConfig};
use flywheel_core::shaping::{
    optimal_policy, shaped_return_delta, GridMDP, Potential, PotentialSeq,
};
use flywheel_core::toyworld::{
    is_safe, sample_expert, ExpertDataset, StateVec, ToyWorld, WorldSpec, PLANTED_BUMP_CENTER,
};
use flywheel_core::triage::{Author, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Fitted {
    world: ToyWorld,
    data: ExpertDataset,
    neg: NegativeSet,
    cfg: TrainConfig,
    artifact: RewardArtifact,
}

fn fit_preset(name: &str, seed: u64) -> Fitted {
    let world = WorldSpec::preset(name).unwrap();
    let data = sample_expert(&world, 200, 0.2, seed).unwrap();
    let neg = sample_negatives(&world.domain, &data, &NegativeConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        seed,
        bandwidth: world.bandwidth(),
        ..TrainConfig::default()
    };
    let (artifact, _) = fit_artifact(
        ScorerKind::Rbf,
        &world.domain,
        &data,
        &neg,
        &cfg,
        &ConstraintSet::default(),
    )
    .unwrap();
    Fitted {
        world,
        data,
        neg,
        cfg,
        artifact,
    }
}

fn separation() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let f = pool.install(|| fit_preset("two-ridges", 7));
    let le = f.artifact.scorer.score_many(&f.data.holdout()).unwrap();
    let ln = f.artifact.scorer.score_many(f.neg.halves().1).unwrap();
    let elapsed = start.elapsed();
    let mut wins = 0.0;
    for p in &le {
        for n in &ln {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    let auc = wins / (le.len() * ln.len()) as f64;
    ensure(auc >= 0.95, format!("auc {auc:.4} < 0.95"))?;
    ensure(
        elapsed < Duration::from_secs(60),
        format!("fit took {elapsed:?}"),
    )?;
    Ok(format!(
        "auc {auc:.4}, {} x {} pairs, {:.3}s on one thread",
        le.len(),
        ln.len(),
        elapsed.as_secs_f64()
    ))
}

fn flywheel(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_flywheel"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
    )
}

fn gap_and_hardening() -> Outcome {
    let start = Instant::now();
    let f = fit_preset("two-ridges", 7);
    let focus = f.world.focus.clone().unwrap();
    let res = 64;
    let (mut sum, mut n) = (0.0, 0);
    for i in 0..res {
        for j in 0..res {
            let x = focus.lo[0] + focus.extent(0) * (i as f64 + 0.5) / res as f64;
            let y = focus.lo[1] + focus.extent(1) * (j as f64 + 0.5) / res as f64;
            let s = StateVec::new(vec![x, y]);
            if !is_safe(&f.world, &s).unwrap() {
                sum += f.artifact.reward(&s, 0).unwrap();
                n += 1;
            }
        }
    }
    let gap = sum / n as f64;
    ensure(
        gap >= THETA_HIGH * 0.5,
        format!("gap mass {gap:.4} below {}", THETA_HIGH * 0.5),
    )?;

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _) = flywheel(&[
        "--session",
        d,
        "init",
        "--world",
        "two-ridges",
        "--seed",
        "7",
    ]);
    ensure(code == 0, format!("init exited {code}"))?;
    let (_, m) = flywheel(&["--session", d, "metrics"]);
    let root: Metrics = serde_json::from_str(&m).map_err(|e| e.to_string())?;
    let (code, out) = flywheel(&[
        "--session",
        d,
        "cycle",
        "--auto",
        "--max",
        "5",
        "--seed",
        "7",
    ]);
    ensure(code == 0, format!("cycle exited {code}"))?;
    let reports: Vec<CycleReport> = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let last = reports.last().ok_or("no cycles ran")?;
    ensure(last.flaws_found == 0, "final audit not clean")?;
    ensure(reports.len() <= 3, format!("{} cycles", reports.len()))?;
    let fin = &last.unsafe_mass_after;
    let bound = 0.2 * root.unsafe_mass.mean + 3.0 * fin.stderr;
    ensure(
        fin.mean <= bound,
        format!("final mass {} > {bound}", fin.mean),
    )?;
    let mut merged = 0;
    for r in &reports {
        for v in &r.merged_versions {
            merged += 1;
            ensure(
                v.expert_fidelity >= THETA_GOOD,
                format!("fidelity {} at v{}", v.expert_fidelity, v.version),
            )?;
        }
    }
    ensure(merged >= 1, "nothing merged")?;
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(300),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "gap mass {gap:.3}, clean after {} cycles, mass {:.3e} -> {:.3e}, {merged} merges, {:.1}s",
        reports.len(),
        root.unsafe_mass.mean,
        fin.mean,
        elapsed.as_secs_f64()
    ))
}

fn shaping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let dom = flywheel_core::toyworld::DomainBox::unit(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let nv = rng.random_range(1..5);
        let mut versions = vec![constant(&dom, rng.random()).unwrap()];
        for _ in 1..nv {
            let p = StateVec::new(vec![rng.random(), rng.random()]);
            let prev = versions.last().unwrap().clone();
            versions.push(plant_anchor(&prev, p, rng.random_range(-1.0..1.0)).unwrap());
        }
        let seq = PotentialSeq::new(versions.iter().collect()).unwrap();
        let len = rng.random_range(2..30);
        let traj: Vec<StateVec> = (0..len)
            .map(|_| StateVec::new(vec![rng.random(), rng.random()]))
            .collect();
        let gamma: f64 = rng.random();
        let got = shaped_return_delta(&traj, &seq, gamma).unwrap();
        let t = len - 1;
        let want = gamma.powi(t as i32) * seq.phi(t, &traj[t]) - seq.phi(0, &traj[0]);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-12, format!("telescoping error {worst:e}"))?;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = (rng.random_range(0..5), rng.random_range(0..5));
        let mut mdp = GridMDP::gridworld(5, 5, goal, 0.9, -0.1);
        for row in mdp.base_reward.iter_mut() {
            for r in row.iter_mut() {
                *r = -rng.random::<f64>();
            }
        }
        let phi: Vec<f64> = (0..25).map(|_| rng.random_range(-2.0..2.0)).collect();
        let plain = optimal_policy(&mdp, None).map_err(|e| e.to_string())?;
        let shaped = optimal_policy(&mdp, Some(&phi)).map_err(|e| e.to_string())?;
        ensure(
            plain.policy == shaped.policy,
            format!("policy changed on gridworld {seed}"),
        )?;
    }
    Ok(format!(
        "max telescoping error {worst:.1e} over 1000 triples; 20/20 policies equal"
    ))
}

fn random_mapping(rng: &mut ChaCha8Rng) -> MappingParams {
    let mut m = match rng.random_range(0..3) {
        0 => MappingParams::identity(),
        1 => MappingParams::logistic(rng.random_range(0.01..0.99), rng.random_range(0.1..64.0))
            .unwrap(),
        _ => {
            let k = rng.random_range(0..6);
            let mut xs: Vec<f64> = (0..k).map(|_| rng.random_range(0.001..0.999)).collect();
            let mut ys: Vec<f64> = (0..k).map(|_| rng.random()).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            ys.sort_by(f64::total_cmp);
            let mut knots = vec![(0.0, 0.0)];
            knots.extend(xs.into_iter().zip(ys));
            knots.push((1.0, 1.0));
            MappingParams::piecewise(knots).unwrap()
        }
    };
    if rng.random_bool(0.3) {
        m.suppress_below = Some(rng.random_range(0.0..0.9));
    }
    m
}

fn monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut sculpts = 0;
    for _ in 0..100 {
        let psi = random_mapping(&mut rng);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let v = psi.eval(i as f64 / 1000.0);
            if v < prev || !(0.0..=1.0).contains(&v) {
                violations += 1;
            }
            prev = v;
        }
        let d = match rng.random_range(0..3) {
            0 => SculptDirective::SuppressBelow { a: rng.random() },
            1 => SculptDirective::Sharpen {
                mid: rng.random_range(0.01..0.99),
                steep: rng.random_range(0.1..64.0),
            },
            _ => SculptDirective::SetKnots {
                knots: vec![
                    (0.0, 0.0),
                    (rng.random_range(0.01..0.99), rng.random()),
                    (1.0, 1.0),
                ],
            },
        };
        let out = sculpt(&psi, &d).map_err(|e| e.to_string())?;
        ensure(
            validate_monotone(&out, 1001),
            format!("sculpt {d:?} broke monotonicity"),
        )?;
        sculpts += 1;
    }
    ensure(violations == 0, format!("{violations} violations"))?;
    Ok(format!(
        "0 violations on 100 x 1001 grid; {sculpts} sculpts validated"
    ))
}

/// L(s) of an rbf model by direct kernel sums.
fn brute_l(m: &ScorerModel, s: &[f64]) -> f64 {
    let Params::Rbf {
        sigma,
        anchors,
        edits,
    } = &m.params
    else {
        panic!("rbf only")
    };
    let k = |a: &Anchor| {
        let q: f64 = (0..s.len())
            .map(|i| ((s[i] - a.state.values[i]) / (sigma[i] * a.scale)).powi(2))
            .sum();
        if q > 25.0 {
            0.0
        } else {
            a.weight * (-0.5 * q).exp()
        }
    };
    let cal = m.calibration.unwrap();
    let raw: f64 = anchors.iter().map(k).sum();
    ((raw - cal.lo) / (cal.hi - cal.lo) + edits.iter().map(k).sum::<f64>()).clamp(0.0, 1.0)
}

fn locality() -> Outcome {
    let base = fit_preset("two-ridges", 7).artifact.scorer;
    let Params::Rbf { sigma, .. } = &base.params else {
        return Err("not rbf".into());
    };
    let sigma = sigma.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut probes_far, mut worst): (usize, f64) = (0, 0.0);
    for _ in 0..100 {
        let at = vec![rng.random::<f64>(), rng.random::<f64>()];
        let scale = rng.random_range(0.25..2.0);
        let a = Anchor {
            state: StateVec::new(at.clone()),
            weight: rng.random_range(-1.0..1.0),
            scale,
        };
        let after = add_anchor(&base, a).map_err(|e| e.to_string())?;
        for _ in 0..200 {
            let p = vec![rng.random::<f64>(), rng.random::<f64>()];
            let q: f64 = (0..2)
                .map(|i| ((p[i] - at[i]) / (sigma[i] * scale)).powi(2))
                .sum();
            if q <= 25.0 {
                continue;
            }
            probes_far += 1;
            let dl_impl = (after.score(&p).unwrap() - base.score(&p).unwrap()).abs();
            let dl_brute = (brute_l(&after, &p) - brute_l(&base, &p)).abs();
            worst = worst.max(dl_impl).max(dl_brute);
        }
    }
    ensure(worst < 1e-6, format!("|dL| {worst:e} beyond 5 sigma"))?;
    Ok(format!("max |dL| {worst:.1e} over {probes_far} far probes"))
}

fn merge_gate() -> Outcome {
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
    for c in s.triage().unwrap() {
        if s.inherit_label(c.id).unwrap().is_none() {
            s.label(c.id, Verdict::Confirmed, Author::Human, "")
                .unwrap();
        }
    }
    let clusters: Vec<u64> = s.work.clusters.iter().map(|c| c.id).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ids = vec![];
    let (mut merges, mut failed_refused) = (0, 0);
    let pt = |rng: &mut ChaCha8Rng| StateVec::new(vec![rng.random(), rng.random()]);
    for step in 0..1000 {
        match rng.random_range(0..10) {
            0..=2 => {
                let c = clusters[rng.random_range(0..clusters.len())];
                let p = match rng.random_range(0..3) {
                    0 => s.propose(c, Mode::PatchNegative, Author::Agent, None),
                    1 => s.propose(c, Mode::Sculpt, Author::Agent, None),
                    _ => {
                        let states = (0..rng.random_range(1..3)).map(|_| pt(&mut rng)).collect();
                        s.propose(
                            c,
                            Mode::SeedPositive,
                            Author::Human,
                            Some(Action::SeedPositive { states }),
                        )
                    }
                };
                if let Ok(p) = p {
                    ids.push(p.id);
                }
            }
            3..=5 if !ids.is_empty() => {
                let _ = s.verify(ids[rng.random_range(0..ids.len())], rng.random());
            }
            6..=8 if !ids.is_empty() => {
                let id = ids[rng.random_range(0..ids.len())];
                let stored = s.work.verifications.get(&id).cloned();
                let before = s.store.clone();
                match s.merge(id) {
                    Ok(_) => {
                        let r =
                            stored.ok_or(format!("step {step}: merged without verification"))?;
                        ensure(
                            r.pass,
                            format!("step {step}: merged a failing verification"),
                        )?;
                        merges += 1;
                    }
                    Err(_) => {
                        ensure(
                            s.store == before,
                            format!("step {step}: refusal changed the store"),
                        )?;
                        if stored.is_some_and(|r| !r.pass) {
                            failed_refused += 1;
                        }
                    }
                }
            }
            9 => {
                let vs: Vec<u64> = s.store.versions.keys().copied().collect();
                s.rollback(vs[rng.random_range(0..vs.len())]).unwrap();
            }
            _ => {}
        }
        for e in s.store.lineage.entries.iter().skip(1) {
            let r = e
                .verification
                .as_ref()
                .ok_or(format!("step {step}: v{} unverified", e.version))?;
            ensure(
                r.pass && r.candidate_hash == e.hash,
                format!("step {step}: v{} gate breach", e.version),
            )?;
        }
    }
    ensure(
        merges > 0 && failed_refused > 0,
        format!("merges {merges}, failed refused {failed_refused}"),
    )?;
    Ok(format!(
        "1000 steps, {merges} merges, {failed_refused} failed verifications refused"
    ))
}

fn gradient() -> Outcome {
    let widths = [2usize, 8, 2];
    let mlp = Mlp::init(&widths, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..16)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect()
    };
    let (experts, negatives) = (pts(&mut rng), pts(&mut rng));
    let margin = 10.0;
    let (_, grad) = loss_and_grad(&widths, &mlp.params, &experts, &negatives, margin);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let i = rng.random_range(0..param_count(&widths));
        let mut p = mlp.params.clone();
        p[i] += h;
        let up = loss(&widths, &p, &experts, &negatives, margin);
        p[i] -= 2.0 * h;
        let down = loss(&widths, &p, &experts, &negatives, margin);
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8));
    }
    ensure(worst < 1e-4, format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} at 10 coordinates"))
}

fn determinism() -> Outcome {
    let fit = || fit_preset("two-ridges", 7).artifact.to_canonical_json();
    ensure(fit() == fit(), "fit differs")?;
    let f = fit_preset("two-ridges", 7);
    let judge = |s: &StateVec| !is_safe(&f.world, s).unwrap();
    let audit = || {
        let mut sfkb = Sfkb::new(&f.world.domain);
        let r = run_audit_phase(
            &f.artifact,
            &ConstraintSet::default(),
            &judge,
            &RedTeamConfig::mix(3000, 11),
            &mut sfkb,
            &[],
            &AuditOptions::default(),
        )
        .unwrap();
        (serde_json::to_string(&r).unwrap(), sfkb.to_jsonl())
    };
    ensure(audit() == audit(), "audit differs")?;
    let cycle = || {
        let mut s = Session::create(
            "det",
            WorldSpec::preset("two-ridges").unwrap(),
            ConstraintSet::default(),
            SessionConfig::default(),
        )
        .unwrap();
        let r = run_cycle(&mut s, &mut OracleLabeler, 3).unwrap();
        let files: Vec<(String, String)> = s
            .files()
            .unwrap()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("reports/"))
            .collect();
        (serde_json::to_string(&r).unwrap(), files)
    };
    let (a, b) = (cycle(), cycle());
    ensure(a == b, "cycle differs")?;
    Ok(format!(
        "fit, audit and cycle byte-identical ({} bytes of report)",
        a.0.len()
    ))
}

fn focusing() -> Outcome {
    let f = fit_preset("planted-bump", 7);
    let art = plant_anchor(
        &f.artifact,
        StateVec::new(PLANTED_BUMP_CENTER.to_vec()),
        1.0,
    )
    .unwrap();
    let ens = fit_ensemble(ScorerKind::Rbf, &f.world.domain, &f.data, &f.neg, &f.cfg).unwrap();
    let mut sfkb = Sfkb::new(&f.world.domain);
    blue_team_scan(&mut sfkb, &art, &ens, THETA_HIGH, U_GAP, 0).unwrap();
    let judge = |s: &StateVec| !is_safe(&f.world, s).unwrap();
    let (mut with, mut without) = (vec![], vec![]);
    for seed in 0..20 {
        for (gaps, out) in [(true, &mut with), (false, &mut without)] {
            let mut cfg = RedTeamConfig::new(Search::Random, 2000, seed);
            cfg.use_gaps = gaps;
            let o = red_team_search(&art, &ConstraintSet::default(), &judge, &cfg, &sfkb, None)
                .unwrap();
            // a search that never hits counts as budget + 1
            out.push(o.first_flaw_eval.unwrap_or(cfg.budget + 1));
        }
    }
    let median = |v: &mut Vec<usize>| {
        v.sort();
        (v[9] + v[10]) as f64 / 2.0
    };
    let (mw, mo) = (median(&mut with), median(&mut without));
    ensure(mw <= mo, format!("median with gaps {mw} > without {mo}"))?;
    Ok(format!(
        "median evaluations to first flaw: {mw} with gaps, {mo} without"
    ))
}

#[test]
fn acceptance() {
    let checks: [Check; 9] = [
        ("separation", separation),
        ("gap reward and hardening", gap_and_hardening),
        ("shaping", shaping),
        ("monotone mapping", monotone),
        ("locality", locality),
        ("merge gate", merge_gate),
        ("gradient check", gradient),
        ("determinism", determinism),
        ("sfkb focusing", focusing),
    ];
    let mut stdout = std::io::stdout();
    let mut failed = vec![];
    for (name, check) in checks {
        let out = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let line = match &out {
            Ok(detail) => format!("PASS {name}: {detail}"),
            Err(why) => format!("FAIL {name}: {why}"),
        };
        writeln!(stdout, "{line}").unwrap();
        if out.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
