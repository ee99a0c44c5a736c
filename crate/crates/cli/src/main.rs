use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hybridmesh::metrics::MetricsDoc;
use hybridmesh::provenance::Record;
use hybridmesh::replay::{self, ReplayError};
use hybridmesh::scenario::{ConfigError, Routing, ScenarioConfig};
use hybridmesh::server::{self, LiveService};
use hybridmesh::storage::manifest_json;
use hybridmesh::tes_layer::{RoutingDecision, RoutingPolicy};
use hybridmesh::types::SiteId;
use hybridmesh::workflow::{run_scenario, timeline, Mode, RunError, RunStatus};

const EXIT_RUN_FAILED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_REPLAY: u8 = 4;
const OUT_DIR_ENV: &str = "HYBRIDMESH_OUT_DIR";

#[derive(Parser)]
#[command(name = "hybridmesh", version, about = "Simulate hybrid and multi-cloud execution architectures")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the workflow mode.
    #[arg(long)]
    mode: Option<Mode>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.json, events.ndjson, manifest.json,
    /// timeline.csv and effective.toml.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Output directory; HYBRIDMESH_OUT_DIR takes precedence.
        #[arg(long, default_value = "hybridmesh-out")]
        out_dir: PathBuf,
    },
    /// Check every invariant of a recorded run from its event log.
    ReplayVerify {
        /// Path to events.ndjson.
        log: PathBuf,
    },
    /// Serve one component over HTTP until interrupted.
    Serve {
        #[arg(long, value_enum)]
        component: Component,
        /// Scenario supplying sites, retries, routing and heartbeat settings.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Site served by a node.
        #[arg(long)]
        site: Option<String>,
        /// Upstream TES services of a gateway (repeatable). Without any, the
        /// gateway fronts in-process nodes for the scenario's compute sites.
        #[arg(long = "upstream")]
        upstreams: Vec<String>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
    /// Run a scenario and print its routing decisions.
    Explain {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Component {
    Node,
    Gateway,
    Repo,
}

/// Failure carrying a specific exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn config_error(e: ConfigError) -> anyhow::Error {
    Exit(EXIT_CONFIG, e.to_string()).into()
}

fn load(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::parse(
        &fs::read_to_string(&args.scenario)
            .map_err(|e| Exit(EXIT_CONFIG, format!("cannot read {}: {e}", args.scenario.display())))?,
    )
    .map_err(config_error)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.workflow.mode = mode;
    }
    cfg.resolve().map_err(config_error)
}

fn run(args: &ScenarioArgs, out_dir: &Path) -> Result<ExitCode> {
    let cfg = load(args)?;
    let out_dir = std::env::var_os(OUT_DIR_ENV).map_or_else(|| out_dir.to_path_buf(), PathBuf::from);
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    fs::write(out_dir.join("effective.toml"), cfg.to_toml())?;

    let outcome = match run_scenario(&cfg) {
        Ok(o) => o,
        Err(RunError::Config(e)) => return Err(config_error(e)),
        Err(RunError::Sim(e)) => return Err(Exit(EXIT_RUN_FAILED, format!("simulation aborted: {e}")).into()),
        Err(RunError::Aborted { error, log }) => {
            let mut events = fs::File::create(out_dir.join("events.ndjson"))?;
            log.write_ndjson(&mut events)?;
            return Err(Exit(
                EXIT_RUN_FAILED,
                format!("simulation aborted: {error} (partial log of {} events written)", log.len()),
            )
            .into());
        }
    };
    let metrics = MetricsDoc::new(&cfg, &outcome);
    fs::write(out_dir.join("metrics.json"), metrics.to_json())?;
    let mut events = fs::File::create(out_dir.join("events.ndjson"))?;
    outcome.log.write_ndjson(&mut events)?;
    events.flush()?;
    fs::write(out_dir.join("manifest.json"), manifest_json(&outcome.report.final_manifest))?;
    let sites: Vec<SiteId> = cfg.sites.iter().filter(|s| s.compute).map(|s| s.id.clone()).collect();
    let (_, csv) = timeline(&outcome.log, &sites);
    fs::write(out_dir.join("timeline.csv"), csv)?;

    let r = &outcome.report;
    println!(
        "{} run {}: makespan {:.3} s, {} tasks, {} bytes moved, {} retries",
        r.mode,
        r.status.as_str(),
        r.makespan_s,
        r.tasks_completed(),
        r.bytes_transferred_total,
        r.retries
    );
    println!("metrics digest {}", r.metrics_digest);
    println!("outputs in {}", out_dir.display());
    if r.status == RunStatus::Succeeded {
        return Ok(ExitCode::SUCCESS);
    }
    for b in &r.failed_batches {
        eprintln!("failed batch: {b}");
    }
    for t in &r.starved {
        eprintln!("starved task: {t}");
    }
    Ok(ExitCode::from(EXIT_RUN_FAILED))
}

fn replay_verify(log: &Path) -> Result<ExitCode> {
    let file = fs::File::open(log).with_context(|| format!("opening {}", log.display()))?;
    let verdict = match replay::verify_reader(BufReader::new(file)) {
        Ok(v) => v,
        Err(e @ ReplayError::CorruptLog { .. }) => return Err(Exit(EXIT_REPLAY, e.to_string()).into()),
    };
    println!(
        "{} entries, {} tasks, {} claims checked",
        verdict.entries, verdict.tasks, verdict.claims
    );
    if verdict.is_clean() {
        println!("no violations");
        return Ok(ExitCode::SUCCESS);
    }
    for v in &verdict.violations {
        println!("{v}");
    }
    println!("{} violation(s)", verdict.violations.len());
    Ok(ExitCode::from(EXIT_REPLAY))
}

fn policy(cfg: Option<&ScenarioConfig>) -> RoutingPolicy {
    use rand::SeedableRng;
    match cfg {
        Some(c) if c.routing == Routing::UniformRandom => {
            RoutingPolicy::UniformRandom(rand_chacha::ChaCha8Rng::seed_from_u64(c.seed))
        }
        Some(c) => RoutingPolicy::Locality(c.cost_model),
        None => RoutingPolicy::Locality(Default::default()),
    }
}

fn serve(
    component: Component,
    scenario: Option<&Path>,
    site: Option<&str>,
    upstreams: &[String],
    listen: &str,
) -> Result<ExitCode> {
    let cfg = scenario
        .map(|p| ScenarioConfig::load_path(p).map_err(config_error))
        .transpose()?;
    let beat = Duration::from_secs_f64(cfg.as_ref().map_or(1.0, |c| c.heartbeat_interval_s));
    let sites: Vec<SiteId> = cfg
        .as_ref()
        .map(|c| c.sites.iter().map(|s| s.id.clone()).collect())
        .unwrap_or_default();
    let service = match component {
        Component::Repo => LiveService::repo(cfg.as_ref().map_or(2, |c| c.max_retries)),
        Component::Node => {
            let Some(site) = site else {
                bail!(Exit(EXIT_CONFIG, "serving a node needs --site".into()));
            };
            let site = SiteId::from(site);
            let known = if sites.is_empty() { vec![site.clone()] } else { sites };
            if !known.contains(&site) {
                bail!(Exit(EXIT_CONFIG, format!("site `{site}` is not in the scenario")));
            }
            LiveService::node(site, known)
        }
        Component::Gateway if upstreams.is_empty() => {
            let Some(c) = &cfg else {
                bail!(Exit(EXIT_CONFIG, "a gateway needs --upstream or --scenario".into()));
            };
            let compute: Vec<SiteId> = c.sites.iter().filter(|s| s.compute).map(|s| s.id.clone()).collect();
            LiveService::local_gateway("gateway", &compute, beat, policy(cfg.as_ref()))
        }
        Component::Gateway => LiveService::gateway("gateway", upstreams, beat, policy(cfg.as_ref()))?,
    };
    server::serve(service, listen, |addr| println!("listening on http://{addr}"))?;
    Ok(ExitCode::SUCCESS)
}

fn explain(args: &ScenarioArgs) -> Result<ExitCode> {
    let cfg = load(args)?;
    let outcome = run_scenario(&cfg).map_err(|e| match e {
        RunError::Config(c) => config_error(c),
        e => Exit(EXIT_RUN_FAILED, e.to_string()).into(),
    })?;
    if outcome.decisions.is_empty() {
        println!("no routing decisions (mode {})", cfg.mode().as_str());
    } else {
        print_decisions(&outcome.decisions);
    }
    let health: Vec<String> = outcome
        .log
        .entries()
        .iter()
        .filter_map(|e| match &e.record {
            Record::NodeHealth { node, up } => Some(format!("{:>10.3}  {node} {}", e.at, if *up { "up" } else { "down" })),
            _ => None,
        })
        .collect();
    if !health.is_empty() {
        println!("\nnode health changes:");
        for h in health {
            println!("{h}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_decisions(decisions: &[RoutingDecision]) {
    println!(
        "{:>10}  {:<12} {:<22} {:<10} {:>14}  alternatives",
        "time", "gateway", "task", "node", "remote bytes"
    );
    for d in decisions {
        let alts: Vec<String> = d
            .alternatives
            .iter()
            .map(|c| format!("{}={}", c.node, c.cost_bytes_remote))
            .collect();
        println!(
            "{:>10.3}  {:<12} {:<22} {:<10} {:>14}  {}",
            d.at,
            d.gateway,
            d.task_id,
            d.chosen_node,
            d.cost_bytes_remote,
            alts.join(" ")
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Run { scenario, out_dir } => run(scenario, out_dir),
        Cmd::ReplayVerify { log } => replay_verify(log),
        Cmd::Serve {
            component,
            scenario,
            site,
            upstreams,
            listen,
        } => serve(*component, scenario.as_deref(), site.as_deref(), upstreams, listen),
        Cmd::Explain { scenario } => explain(scenario),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Exit>() {
                Some(Exit(code, _)) => ExitCode::from(*code),
                None => ExitCode::FAILURE,
            }
        }
    }
}
