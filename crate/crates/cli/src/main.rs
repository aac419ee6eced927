use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use calfs::adversary::AdversaryKind;
use calfs::exhaustive::{exhaustive_check, ExhaustiveOptions, Family};
use calfs::harness::{
    self, ByzantineSpec, ExperimentConfig, GraphSource, HarnessError, InitialSpec, OutputPaths,
};
use calfs::scheduler::SchedulerKind;
use calfs::topology::{compute_zones, GraphSpec, Zone};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_VIOLATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "calfs", version, about = "Min+1 BFS tree simulator with Byzantine containment checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Run many seeds of one experiment and aggregate the metrics.
    Campaign {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed_stride: u64,
        /// Aggregate report path; printed to stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the containment zones of a graph.
    Zones {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explore every daemon choice on small graphs.
    Exhaustive {
        #[arg(long, default_value_t = 5)]
        n_max: usize,
        #[arg(long, value_delimiter = ',', default_value = "path,ring,star,complete")]
        families: Vec<Family>,
        #[arg(long, default_value_t = 40_000_000)]
        max_clusters: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-execute a trace file and recompute its metrics.
    Replay {
        trace: PathBuf,
        /// Metrics file to compare against.
        #[arg(long)]
        expect: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKind {
    Path,
    Ring,
    Grid,
    Star,
    Complete,
    Random,
}

#[derive(Args, Clone)]
struct GraphArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Edge-list file.
    #[arg(long, conflicts_with = "family")]
    graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    family: Option<GraphKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    /// Edge probability of the random family.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    root: Option<usize>,
    /// Comma-separated Byzantine ids.
    #[arg(long, value_delimiter = ',', conflicts_with = "byzantine_count")]
    byzantine: Option<Vec<usize>>,
    /// Number of Byzantines drawn at random from the non-root processes.
    #[arg(long)]
    byzantine_count: Option<usize>,
    /// Seed for every random choice not given its own seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    Legitimate,
    Random,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long, value_enum, conflicts_with = "init_file")]
    init: Option<InitKind>,
    #[arg(long)]
    init_file: Option<PathBuf>,
    #[arg(long)]
    height_bound: Option<u32>,
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    #[arg(long)]
    fairness_bound: Option<u32>,
    #[arg(long)]
    adversary: Option<AdversaryKind>,
    #[arg(long)]
    height_cap: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// `SB` or `SBstar`.
    #[arg(long)]
    zone: Option<Zone>,
    #[arg(long)]
    quiet_steps: Option<usize>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    zones_out: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

/// A failure classified by exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match e {
            HarnessError::Io { .. }
            | HarnessError::Parse { .. }
            | HarnessError::InvalidField { .. }
            | HarnessError::Topology(_) => EXIT_USAGE,
            HarnessError::Scheduler(_) | HarnessError::Checker(_) => EXIT_VIOLATION,
        };
        Failure { code, err: e.into() }
    }
}

fn usage(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, err }
}

fn graph_spec(args: &GraphArgs, kind: GraphKind) -> anyhow::Result<GraphSpec> {
    let need = |v: Option<usize>, name: &str| v.with_context(|| format!("--{name} is required for this family"));
    Ok(match kind {
        GraphKind::Path => GraphSpec::Path { n: need(args.n, "n")? },
        GraphKind::Ring => GraphSpec::Ring { n: need(args.n, "n")? },
        GraphKind::Star => GraphSpec::Star { n: need(args.n, "n")? },
        GraphKind::Complete => GraphSpec::Complete { n: need(args.n, "n")? },
        GraphKind::Grid => GraphSpec::Grid {
            rows: need(args.rows, "rows")?,
            cols: need(args.cols, "cols")?,
        },
        GraphKind::Random => GraphSpec::RandomConnected {
            n: need(args.n, "n")?,
            p: args.p.context("--p is required for the random family")?,
        },
    })
}

/// Starting point for flag overrides: the `--config` file or a bare config.
fn base_config(args: &GraphArgs) -> Result<Option<ExperimentConfig>, Failure> {
    match &args.config {
        Some(path) => Ok(Some(ExperimentConfig::from_json_file(path)?)),
        None => Ok(None),
    }
}

fn apply_graph_args(args: &GraphArgs, base: Option<ExperimentConfig>) -> Result<ExperimentConfig, Failure> {
    let graph = if let Some(path) = &args.graph {
        Some(GraphSource::File(path.clone()))
    } else if let Some(kind) = args.family {
        Some(GraphSource::Generator {
            spec: graph_spec(args, kind).map_err(usage)?,
            seed: args.seed.unwrap_or(0),
        })
    } else {
        None
    };
    let mut c = match (base, graph) {
        (Some(mut c), g) => {
            if let Some(g) = g {
                c.graph = g;
            }
            c
        }
        (None, Some(g)) => ExperimentConfig::new(g, SchedulerKind::RoundRobin, AdversaryKind::Silent),
        (None, None) => return Err(usage(anyhow::anyhow!("one of --config, --graph or --family is required"))),
    };
    if args.root.is_some() {
        c.root = args.root;
    }
    if let Some(ids) = &args.byzantine {
        c.byzantine = Some(ByzantineSpec::Ids(ids.clone()));
    }
    if let Some(count) = args.byzantine_count {
        c.byzantine = Some(ByzantineSpec::Random {
            count,
            seed: args.seed.unwrap_or(0),
        });
    }
    Ok(c)
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut c = apply_graph_args(&args.graph, base_config(&args.graph)?)?;
    let seed = args.graph.seed;
    match (args.init, &args.init_file) {
        (Some(InitKind::Legitimate), _) => c.initial = InitialSpec::Legitimate,
        (Some(InitKind::Random), _) => {
            c.initial = InitialSpec::Random {
                seed: seed.unwrap_or(0),
                height_bound: args.height_bound,
            }
        }
        (None, Some(path)) => c.initial = InitialSpec::File { path: path.clone() },
        (None, None) => {
            if let InitialSpec::Random { height_bound, .. } = &mut c.initial {
                if args.height_bound.is_some() {
                    *height_bound = args.height_bound;
                }
            }
        }
    }
    if let Some(s) = seed {
        if let InitialSpec::Random { seed, .. } = &mut c.initial {
            *seed = s;
        }
        c.scheduler.seed = s;
        c.adversary.seed = s;
    }
    if let Some(kind) = args.scheduler {
        c.scheduler.kind = kind;
    }
    if args.fairness_bound.is_some() {
        c.scheduler.fairness_bound = args.fairness_bound;
    }
    if let Some(kind) = args.adversary {
        c.adversary.kind = kind;
    }
    if args.height_cap.is_some() {
        c.adversary.height_cap = args.height_cap;
    }
    if args.max_steps.is_some() {
        c.max_steps = args.max_steps;
    }
    if let Some(zone) = args.zone {
        c.zone = zone;
    }
    if args.quiet_steps.is_some() {
        c.quiet_steps = args.quiet_steps;
    }
    let outputs = OutputPaths {
        trace: args.trace.clone(),
        zones: args.zones_out.clone(),
        metrics: args.metrics.clone(),
    };
    if outputs != OutputPaths::default() {
        c.outputs = outputs;
    }
    Ok(c)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
}

fn verdict(violation: bool) -> u8 {
    if violation {
        EXIT_VIOLATION
    } else {
        0
    }
}

fn execute(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Run(args) => {
            let config = build_config(&args)?;
            let result = harness::run_experiment(&config)?;
            print_json(&result.metrics);
            Ok(verdict(result.metrics.violation()))
        }
        Command::Campaign {
            run,
            runs,
            seed_stride,
            report,
        } => {
            let config = build_config(&run)?;
            let agg = harness::run_campaign(&config, runs, seed_stride).map_err(|e| usage(e.into()))?;
            match report {
                Some(path) => harness::write_json(&path, &agg)?,
                None => print_json(&agg),
            }
            eprintln!(
                "{} runs: {} FAIL verdicts, {} bound violations, {} outside-zone violations, {} errors",
                agg.num_runs, agg.fail_verdicts, agg.bound_violations, agg.outside_violations, agg.errors
            );
            Ok(verdict(agg.violation()))
        }
        Command::Zones { graph, out } => {
            let config = apply_graph_args(&graph, base_config(&graph)?)?;
            let topo = config.topology()?;
            let zones = compute_zones(&topo);
            match out {
                Some(path) => harness::write_json(&path, &zones)?,
                None => print_json(&zones),
            }
            Ok(0)
        }
        Command::Exhaustive {
            n_max,
            families,
            max_clusters,
            report,
        } => {
            if n_max > 5 {
                return Err(usage(anyhow::anyhow!("--n-max must be at most 5")));
            }
            let rep = exhaustive_check(&ExhaustiveOptions {
                n_max,
                families,
                max_clusters,
            });
            match report {
                Some(path) => harness::write_json(&path, &rep)?,
                None => print_json(&rep),
            }
            eprintln!(
                "{} instances: {} verified, {} violations, {} budget exhausted",
                rep.instances.len(),
                rep.verified,
                rep.violations,
                rep.budget_exhausted
            );
            Ok(verdict(rep.violations > 0))
        }
        Command::Replay { trace, expect } => {
            let metrics = harness::replay(&trace)?;
            print_json(&metrics);
            if let Some(path) = expect {
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(usage)?;
                let recorded: harness::RunMetrics = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))
                    .map_err(usage)?;
                if recorded != metrics {
                    eprintln!("recomputed metrics differ from {}", path.display());
                    return Ok(EXIT_VIOLATION);
                }
            }
            Ok(verdict(metrics.violation()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
