use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flywheel_core::audit::{RedTeamConfig, SearchRegion};
use flywheel_core::constraints::ConstraintSet;
use flywheel_core::heatmap::{heatmap, Slice};
use flywheel_core::orchestrator::{metrics, run_until_clean, Labeler, OracleLabeler};
use flywheel_core::refine::{Action, Mode};
use flywheel_core::session::{
    export_session, import_session, parse_region, Session, SessionConfig,
};
use flywheel_core::toyworld::WorldSpec;
use flywheel_core::triage::{Author, FlawCluster, Verdict};
use flywheel_core::Error;

use crate::{exit_code, EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFICATION};

#[derive(Parser, Debug)]
#[command(
    name = "flywheel",
    version,
    about = "Audit and refine reward artifacts learned from expert states"
)]
pub struct Cli {
    /// Session directory.
    #[arg(long, global = true, default_value = ".")]
    pub session: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Create a session: sample expert data, fit the root artifact.
    Init(InitArgs),
    /// Constraint file utilities.
    Constraints {
        #[command(subcommand)]
        command: ConstraintsCommand,
    },
    /// Run the red-team/blue-team audit against an artifact version.
    Audit(AuditArgs),
    /// Cluster open flaws; optionally label them from stdin.
    Triage {
        #[arg(long)]
        interactive: bool,
    },
    /// Label one flaw cluster.
    Label {
        #[arg(long)]
        cluster: u64,
        #[arg(long, value_parser = parse_verdict)]
        verdict: Verdict,
        #[arg(long, default_value = "")]
        note: String,
    },
    /// Propose a refinement for a confirmed cluster.
    Refine(RefineArgs),
    /// Verify a proposed refinement.
    Verify {
        #[arg(long)]
        proposal: u64,
        #[arg(long)]
        seed: u64,
    },
    /// Merge a verified refinement into the lineage.
    Merge {
        #[arg(long)]
        proposal: u64,
    },
    /// Point the head at an earlier version.
    Rollback {
        #[arg(long)]
        version: u64,
    },
    /// Run whole flywheel cycles.
    Cycle {
        /// Label clusters with the ground-truth oracle instead of stdin.
        #[arg(long)]
        auto: bool,
        #[arg(long, default_value_t = 3)]
        max: u32,
        #[arg(long)]
        seed: u64,
    },
    /// Unsafe reward mass, fidelity and open flaw count at the head.
    Metrics,
    /// Reward heatmap of a version.
    Heatmap {
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, default_value_t = 64)]
        res: usize,
        /// Fixed axis for 3-D domains.
        #[arg(long)]
        axis: Option<usize>,
        #[arg(long)]
        value: Option<f64>,
        /// Write CSV here instead of JSON to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Lineage,
    /// Write the session as a single archive file.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
    /// Unpack an archive into the session directory.
    Import {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Serve the HTTP API over every session below `root`.
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

#[derive(Subcommand, Debug)]
pub enum ConstraintsCommand {
    /// Report every problem in a constraint file.
    Lint {
        /// Defaults to the session's constraints.json.
        file: Option<PathBuf>,
        #[arg(long)]
        dims: Option<usize>,
    },
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Preset name or path to a world JSON file.
    #[arg(long, default_value = "two-ridges")]
    pub world: String,
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// Artifact version; defaults to the head.
    #[arg(long)]
    pub artifact: Option<u64>,
    #[arg(long)]
    pub budget: usize,
    #[arg(long)]
    pub seed: u64,
    /// Steer the search towards a point, e.g. `0.5,0.5`.
    #[arg(long, value_delimiter = ',')]
    pub steer: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.1)]
    pub radius: f64,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    pub cluster: u64,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Explicit action as JSON (inline or a file path); makes the proposal human-authored.
    #[arg(long)]
    pub action: Option<String>,
}

fn parse_verdict(s: &str) -> Result<Verdict, String> {
    match s {
        "confirmed" | "c" => Ok(Verdict::Confirmed),
        "benign" | "b" => Ok(Verdict::Benign),
        other => Err(format!("unknown verdict `{other}`")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Reads verdicts line by line: `c`, `b`, `s` to skip, `q` to stop asking.
pub struct StdinLabeler<'a> {
    input: &'a mut dyn BufRead,
    done: bool,
}

impl<'a> StdinLabeler<'a> {
    pub fn new(input: &'a mut dyn BufRead) -> Self {
        StdinLabeler { input, done: false }
    }
}

impl Labeler for StdinLabeler<'_> {
    fn label(&mut self, session: &Session, cluster: &FlawCluster) -> Option<Verdict> {
        if self.done {
            return None;
        }
        let rep = session.sfkb.get(cluster.representative).ok()?;
        eprintln!(
            "cluster {} ({} flaws, priority {:.3}) representative {:?} reward {:.3}",
            cluster.id,
            cluster.members.len(),
            cluster.priority,
            rep.state.values,
            rep.reward_at_discovery
        );
        loop {
            eprint!("[c]onfirmed / [b]enign / [s]kip / [q]uit > ");
            let mut line = String::new();
            match self.input.read_line(&mut line) {
                Ok(0) | Err(_) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => {}
            }
            match line.trim() {
                "q" | "quit" => {
                    self.done = true;
                    return None;
                }
                "s" | "skip" => return None,
                other => match parse_verdict(other) {
                    Ok(v) => return Some(v),
                    Err(e) => eprintln!("{e}"),
                },
            }
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<(), Error> {
    serde_json::to_writer_pretty(&mut *out, v)?;
    writeln!(out)?;
    Ok(())
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_world(arg: &str) -> Result<WorldSpec, Error> {
    match WorldSpec::preset(arg) {
        Ok(w) => Ok(w),
        Err(_) if Path::new(arg).exists() => Ok(serde_json::from_str(&read(Path::new(arg))?)?),
        Err(e) => Err(e),
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, input, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<i32, Error> {
    let dir = cli.session;
    match cli.command {
        Command::Init(a) => {
            let world = load_world(&a.world)?;
            let cset: ConstraintSet = match &a.constraints {
                Some(p) => serde_json::from_str(&read(p)?)?,
                None => ConstraintSet::default(),
            };
            let mut cfg: SessionConfig = match &a.config {
                Some(p) => serde_json::from_str(&read(p)?)?,
                None => SessionConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let id = a.id.unwrap_or_else(|| {
                dir.file_name()
                    .map(|n| n.to_string_lossy().to_string())
                    .unwrap_or_else(|| "session".into())
            });
            let s = Session::create(&id, world, cset, cfg)?;
            s.save(&dir)?;
            emit(out, &s.phase0)?;
        }
        Command::Constraints {
            command: ConstraintsCommand::Lint { file, dims },
        } => {
            let path = file.unwrap_or_else(|| dir.join("constraints.json"));
            let cset: ConstraintSet = serde_json::from_str(&read(&path)?)?;
            let dims = match dims {
                Some(d) => Some(d),
                None => fs::read_to_string(dir.join("world.json"))
                    .ok()
                    .and_then(|t| serde_json::from_str::<WorldSpec>(&t).ok())
                    .map(|w| w.dims()),
            };
            let problems = cset.lint(dims);
            for p in &problems {
                writeln!(out, "{p}")?;
            }
            if !problems.is_empty() {
                return Ok(EXIT_DATA);
            }
            writeln!(out, "{} constraints ok", cset.constraints.len())?;
        }
        Command::Audit(a) => {
            let mut s = Session::load(&dir)?;
            let region: Option<SearchRegion> =
                a.steer.map(|c| parse_region(c, a.radius)).transpose()?;
            let version = a.artifact.unwrap_or(s.store.lineage.head);
            let configs = RedTeamConfig::mix(a.budget, a.seed);
            let r = s.audit_version(version, &configs, region.as_ref())?;
            s.save(&dir)?;
            emit(out, &r)?;
        }
        Command::Triage { interactive } => {
            let mut s = Session::load(&dir)?;
            s.triage()?;
            if interactive {
                let pending: Vec<FlawCluster> = s.pending_clusters().into_iter().cloned().collect();
                let mut labeler = StdinLabeler::new(input);
                for c in pending {
                    if s.inherit_label(c.id)?.is_some() {
                        continue;
                    }
                    match labeler.label(&s, &c) {
                        Some(v) => {
                            s.label(c.id, v, Author::Human, "")?;
                        }
                        None if labeler.done => break,
                        None => {}
                    }
                }
            }
            s.save(&dir)?;
            emit(out, &s.work.clusters)?;
        }
        Command::Label {
            cluster,
            verdict,
            note,
        } => {
            let mut s = Session::load(&dir)?;
            let n = s.label(cluster, verdict, Author::Human, &note)?;
            s.save(&dir)?;
            emit(
                out,
                &serde_json::json!({ "cluster": cluster, "labeled": n }),
            )?;
        }
        Command::Refine(a) => {
            let mut s = Session::load(&dir)?;
            let action: Option<Action> = match &a.action {
                None => None,
                Some(text) if Path::new(text).exists() => {
                    Some(serde_json::from_str(&read(Path::new(text))?)?)
                }
                Some(text) => Some(serde_json::from_str(text)?),
            };
            let author = if action.is_some() {
                Author::Human
            } else {
                Author::Agent
            };
            let p = s.propose(a.cluster, a.mode, author, action)?;
            let hash = s.work.candidates[&p.id].content_hash();
            s.save(&dir)?;
            emit(
                out,
                &serde_json::json!({ "proposal": p, "candidate_hash": hash }),
            )?;
        }
        Command::Verify { proposal, seed } => {
            let mut s = Session::load(&dir)?;
            let r = s.verify(proposal, seed)?;
            s.save(&dir)?;
            emit(out, &r)?;
            if !r.pass {
                return Ok(EXIT_VERIFICATION);
            }
        }
        Command::Merge { proposal } => {
            let mut s = Session::load(&dir)?;
            let v = s.merge(proposal)?;
            s.save(&dir)?;
            emit(out, &serde_json::json!({ "version": v, "head": s.stamp() }))?;
        }
        Command::Rollback { version } => {
            let mut s = Session::load(&dir)?;
            s.rollback(version)?;
            s.save(&dir)?;
            emit(out, &s.stamp())?;
        }
        Command::Cycle { auto, max, seed } => {
            let mut s = Session::load(&dir)?;
            let reports = if auto {
                run_until_clean(&mut s, &mut OracleLabeler, max, seed)
            } else {
                run_until_clean(&mut s, &mut StdinLabeler::new(input), max, seed)
            };
            // partial progress is still worth keeping
            s.save(&dir)?;
            emit(out, &reports?)?;
        }
        Command::Metrics => {
            let s = Session::load(&dir)?;
            emit(out, &metrics(&s)?)?;
        }
        Command::Heatmap {
            version,
            res,
            axis,
            value,
            out: path,
        } => {
            let s = Session::load(&dir)?;
            let a = s.store.get(version.unwrap_or(s.store.lineage.head))?;
            let slice = match (axis, value) {
                (Some(axis), Some(value)) => Some(Slice { axis, value }),
                (None, None) => None,
                _ => {
                    return Err(Error::InvalidArgument(
                        "--axis and --value go together".into(),
                    ))
                }
            };
            let h = heatmap(a, res, slice)?;
            match path {
                Some(p) => h.write_csv(fs::File::create(p)?)?,
                None => emit(out, &h)?,
            }
        }
        Command::Lineage => {
            let s = Session::load(&dir)?;
            emit(out, s.lineage())?;
        }
        Command::Export { out: path } => {
            let s = Session::load(&dir)?;
            fs::write(path, export_session(&s)?)?;
        }
        Command::Import { archive } => {
            let s = import_session(&read(&archive)?)?;
            s.save(&dir)?;
            emit(out, &s.stamp())?;
        }
        Command::Serve { root, addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(root, &addr))?;
        }
    }
    Ok(EXIT_OK)
}
