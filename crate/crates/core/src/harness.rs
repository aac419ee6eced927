//! Experiment configuration, run artifacts and campaigns.
//!
//! A trace file is JSON lines: a header line with the topology, the initial
//! configuration and the run parameters, then one line per step.

use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversaryKind, AdversaryStrategy};
use crate::checker::{self, CheckerError, StepRecord, StopReason, StrictVerdict, Trace};
use crate::protocol::{legitimate_configuration, Action, Configuration, ProcessState};
use crate::scheduler::{self, RunOptions, SchedulerError, SchedulerKind, SchedulerPolicy};
use crate::topology::{compute_zones, generate_graph, GraphSpec, ProcessId, Topology, TopologyError, Zone, ZoneReport};

pub use crate::exhaustive::{exhaustive_check, ExhaustiveOptions, ExhaustiveReport};

pub const TRACE_FORMAT: &str = "calfs-trace/1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Checker(#[from] CheckerError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> HarnessError {
    HarnessError::InvalidField {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphSource {
    /// Edge-list file.
    File(PathBuf),
    Generator {
        #[serde(flatten)]
        spec: GraphSpec,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ByzantineSpec {
    Ids(Vec<usize>),
    /// `count` distinct non-root ids drawn with `seed`.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    #[default]
    Legitimate,
    /// Parent uniform over `N_v ∪ {NIL}`, height uniform over `0..=height_bound`
    /// (default `2n`).
    Random {
        seed: u64,
        #[serde(default)]
        height_bound: Option<u32>,
    },
    /// JSON array of `{parent, height}` objects.
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `2n`.
    #[serde(default)]
    pub fairness_bound: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub kind: AdversaryKind,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `4n`.
    #[serde(default)]
    pub height_cap: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub zones: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphSource,
    /// Overrides the root from the graph source.
    #[serde(default)]
    pub root: Option<usize>,
    /// Overrides the Byzantine set from the graph source.
    #[serde(default)]
    pub byzantine: Option<ByzantineSpec>,
    #[serde(default)]
    pub initial: InitialSpec,
    pub scheduler: SchedulerConfig,
    pub adversary: AdversaryConfig,
    /// Defaults to `20·n² + k·quiet_steps` with `k` the fairness bound, so a
    /// contained run always gets to see its full quiet window.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_zone")]
    pub zone: Zone,
    /// Defaults to `10·n·Δ`.
    #[serde(default)]
    pub quiet_steps: Option<usize>,
    #[serde(default)]
    pub outputs: OutputPaths,
}

fn default_zone() -> Zone {
    Zone::SbStar
}

impl ExperimentConfig {
    pub fn new(graph: GraphSource, scheduler: SchedulerKind, adversary: AdversaryKind) -> Self {
        ExperimentConfig {
            graph,
            root: None,
            byzantine: None,
            initial: InitialSpec::Legitimate,
            scheduler: SchedulerConfig {
                kind: scheduler,
                seed: 0,
                fairness_bound: None,
            },
            adversary: AdversaryConfig {
                kind: adversary,
                seed: 0,
                height_cap: None,
            },
            max_steps: None,
            zone: Zone::SbStar,
            quiet_steps: None,
            outputs: OutputPaths::default(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Adds `offset` to every seed in the config.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        if let GraphSource::Generator { seed, .. } = &mut c.graph {
            *seed = seed.wrapping_add(offset);
        }
        if let Some(ByzantineSpec::Random { seed, .. }) = &mut c.byzantine {
            *seed = seed.wrapping_add(offset);
        }
        if let InitialSpec::Random { seed, .. } = &mut c.initial {
            *seed = seed.wrapping_add(offset);
        }
        c.scheduler.seed = c.scheduler.seed.wrapping_add(offset);
        c.adversary.seed = c.adversary.seed.wrapping_add(offset);
        c
    }

    pub fn topology(&self) -> Result<Topology, HarnessError> {
        let mut topo = match &self.graph {
            GraphSource::File(path) => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                Topology::parse_edge_list(&text).map_err(|e| match e {
                    TopologyError::Parse { line, msg } => HarnessError::Parse {
                        path: path.clone(),
                        line,
                        msg,
                    },
                    other => other.into(),
                })?
            }
            GraphSource::Generator { spec, seed } => generate_graph(spec, *seed)?,
        };
        if let Some(root) = self.root {
            if root >= topo.n() {
                return Err(invalid("root", format!("{root} is not a process of an {}-process graph", topo.n())));
            }
            // Clear Byzantines first so a new root never collides with the old set.
            let byz = topo.byzantine().clone();
            topo = topo.with_byzantine([])?.with_root(ProcessId(root))?;
            if self.byzantine.is_none() {
                topo = topo.with_byzantine(byz)?;
            }
        }
        match &self.byzantine {
            None => {}
            Some(ByzantineSpec::Ids(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&b| b >= topo.n()) {
                    return Err(invalid("byzantine", format!("{bad} is not a process")));
                }
                if ids.contains(&topo.root().0) {
                    return Err(invalid("byzantine", "the root cannot be Byzantine"));
                }
                topo = topo.with_byzantine(ids.iter().copied().map(ProcessId))?;
            }
            &Some(ByzantineSpec::Random { count, seed }) => {
                if count >= topo.n() {
                    return Err(invalid("byzantine", format!("{count} Byzantines need at least {} processes", count + 1)));
                }
                let root = topo.root().0;
                let pool: Vec<usize> = (0..topo.n()).filter(|&v| v != root).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let picked = sample(&mut rng, pool.len(), count).into_iter().map(|i| ProcessId(pool[i]));
                topo = topo.with_byzantine(picked)?;
            }
        }
        Ok(topo)
    }

    pub fn initial_configuration(&self, topo: &Topology) -> Result<Configuration, HarnessError> {
        let config = match &self.initial {
            InitialSpec::Legitimate => legitimate_configuration(topo),
            &InitialSpec::Random { seed, height_bound } => {
                random_configuration(topo, seed, height_bound.unwrap_or(2 * topo.n() as u32))
            }
            InitialSpec::File { path } => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let states: Vec<ProcessState> = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
                    path: path.clone(),
                    line: e.line(),
                    msg: e.to_string(),
                })?;
                Configuration::new(states)
            }
        };
        config
            .validate(topo)
            .map_err(|e| invalid("initial", e.to_string()))?;
        Ok(config)
    }

    pub fn policy(&self, topo: &Topology) -> SchedulerPolicy {
        let mut p = SchedulerPolicy::with_default_bound(self.scheduler.kind, self.scheduler.seed, topo.n());
        if let Some(k) = self.scheduler.fairness_bound {
            p.fairness_bound = k;
        }
        p
    }

    pub fn strategy(&self, topo: &Topology) -> AdversaryStrategy {
        let mut s = AdversaryStrategy::with_default_cap(self.adversary.kind, self.adversary.seed, topo.n());
        if let Some(cap) = self.adversary.height_cap {
            s.height_cap = cap;
        }
        s
    }

    pub fn run_options(&self, topo: &Topology) -> RunOptions {
        let mut opts = RunOptions::new(topo, 0, self.zone);
        if let Some(q) = self.quiet_steps {
            opts.quiet_steps = q;
        }
        let n = topo.n();
        let k = self.policy(topo).fairness_bound as usize;
        opts.max_steps = self.max_steps.unwrap_or(20 * n * n + k * opts.quiet_steps);
        opts
    }
}

pub fn random_configuration(topo: &Topology, seed: u64, height_bound: u32) -> Configuration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = topo
        .processes()
        .map(|v| {
            let nbrs = topo.neighbors(v);
            let slot = rng.gen_range(0..=nbrs.len());
            ProcessState {
                parent: nbrs.get(slot).copied(),
                height: rng.gen_range(0..=height_bound),
            }
        })
        .collect();
    Configuration::new(states)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub n: usize,
    #[serde(rename = "delta")]
    pub max_degree: usize,
    pub steps: usize,
    pub stop: StopReason,
    pub truncated: bool,
    pub zone: Zone,
    /// First zone-legitimate and zone-stable configuration.
    pub contained_at: Option<usize>,
    /// Perturbations relative to `zone` (t).
    pub perturbation_count: usize,
    /// Largest per-process S-variable change count outside `zone` (k).
    pub max_changes: usize,
    /// `n·Δ`.
    pub bound: usize,
    /// `t ≤ n·Δ`; only evaluated for `S_B*`, the strict mode has no count bound.
    pub bound_respected: Option<bool>,
    pub strict: StrictVerdict,
    /// Every zone-contained configuration from `contained_at` on gives exact
    /// BFS states to processes strictly closer to the root than to `B`.
    pub outside_exact: bool,
    pub fairness_bound: u32,
    pub max_starvation: usize,
}

impl RunMetrics {
    /// A claim is violated: strict containment failed, the perturbation
    /// bound was exceeded, or outside-zone states were wrong.
    pub fn violation(&self) -> bool {
        matches!(self.strict, StrictVerdict::Fail { .. }) || self.bound_respected == Some(false) || !self.outside_exact
    }
}

pub fn compute_metrics(trace: &Trace, zones: &ZoneReport, zone: Zone) -> Result<RunMetrics, CheckerError> {
    let topo = &trace.topo;
    let report = checker::analyze_trace(trace, zones, zone)?;
    let strict = checker::verify_td_strict(trace, zones);
    let bound = topo.n() * topo.max_degree();
    let outside_exact = match report.contained_at {
        None => true,
        Some(first) => trace.configs[first..]
            .iter()
            .filter(|c| checker::is_zone_contained(topo, zones, c, zone))
            .all(|c| checker::outside_zone_exact(topo, zones, c)),
    };
    Ok(RunMetrics {
        n: topo.n(),
        max_degree: topo.max_degree(),
        steps: trace.steps.len(),
        stop: trace.stop,
        truncated: trace.truncated,
        zone,
        contained_at: report.contained_at,
        perturbation_count: report.perturbation_count,
        max_changes: report.max_changes_outside_zone,
        bound,
        bound_respected: (zone == Zone::SbStar).then_some(report.perturbation_count <= bound),
        strict,
        outside_exact,
        fairness_bound: trace.fairness_bound,
        max_starvation: scheduler::max_starvation(trace).into_iter().max().unwrap_or(0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub trace: Trace,
    pub zones: ZoneReport,
    pub metrics: RunMetrics,
}

/// Runs one experiment and writes the artifacts named in `config.outputs`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    let topo = config.topology()?;
    let initial = config.initial_configuration(&topo)?;
    let trace = scheduler::run(
        &topo,
        &initial,
        config.policy(&topo),
        &config.strategy(&topo),
        config.run_options(&topo),
    )?;
    let zones = compute_zones(&topo);
    let metrics = compute_metrics(&trace, &zones, config.zone)?;
    if let Some(path) = &config.outputs.trace {
        write_trace(path, &trace, config.zone)?;
    }
    if let Some(path) = &config.outputs.zones {
        write_json(path, &zones)?;
    }
    if let Some(path) = &config.outputs.metrics {
        write_json(path, &metrics)?;
    }
    Ok(ExperimentResult { trace, zones, metrics })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TopologyRecord {
    n: usize,
    root: usize,
    byzantine: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    topology: TopologyRecord,
    initial: Configuration,
    zone: Zone,
    stop: StopReason,
    truncated: bool,
    quiet_target: usize,
    fairness_bound: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StepLine {
    step: usize,
    activated: Vec<ProcessId>,
    actions: Vec<Action>,
}

pub fn write_trace(path: &Path, trace: &Trace, zone: Zone) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_trace_to(&mut out, trace, zone).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn write_trace_to<W: Write>(out: &mut W, trace: &Trace, zone: Zone) -> io::Result<()> {
    let topo = &trace.topo;
    let header = TraceHeader {
        format: TRACE_FORMAT.to_string(),
        topology: TopologyRecord {
            n: topo.n(),
            root: topo.root().0,
            byzantine: topo.byzantine().iter().map(|b| b.0).collect(),
            edges: topo.edges(),
        },
        initial: trace.initial().clone(),
        zone,
        stop: trace.stop,
        truncated: trace.truncated,
        quiet_target: trace.quiet_target,
        fairness_bound: trace.fairness_bound,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for (step, rec) in trace.steps.iter().enumerate() {
        let line = StepLine {
            step,
            activated: rec.activated.clone(),
            actions: rec.actions.clone(),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a trace file, re-executing every step through the protocol.
/// Returns the trace and the zone it was recorded for.
pub fn read_trace(path: &Path) -> Result<(Trace, Zone), HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let parse_err = |line: usize, msg: String| HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = io::BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty trace".into()))?
        .map_err(io_err(path))?;
    let header: TraceHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != TRACE_FORMAT {
        return Err(parse_err(1, format!("unsupported format `{}`", header.format)));
    }
    let t = &header.topology;
    let topo = Topology::new(t.n, &t.edges, t.root, &t.byzantine).map_err(|e| parse_err(1, e.to_string()))?;
    header
        .initial
        .validate(&topo)
        .map_err(|e| parse_err(1, e.to_string()))?;

    let mut configs = vec![header.initial.clone()];
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StepLine = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.step != steps.len() {
            return Err(parse_err(lineno, format!("expected step {}, found {}", steps.len(), rec.step)));
        }
        let record = StepRecord {
            activated: rec.activated,
            actions: rec.actions,
        };
        let next = checker::replay_step(&topo, configs.last().unwrap(), &record, rec.step)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        configs.push(next);
        steps.push(record);
    }
    let trace = Trace {
        topo,
        configs,
        steps,
        truncated: header.truncated,
        stop: header.stop,
        quiet_target: header.quiet_target,
        fairness_bound: header.fairness_bound,
    };
    Ok((trace, header.zone))
}

/// Replays a trace file and recomputes its metrics.
pub fn replay(path: &Path) -> Result<RunMetrics, HarnessError> {
    let (trace, zone) = read_trace(path)?;
    let zones = compute_zones(&trace.topo);
    Ok(compute_metrics(&trace, &zones, zone)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRun {
    pub index: usize,
    pub seed_offset: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub num_runs: usize,
    pub seed_stride: u64,
    pub completed: usize,
    pub errors: usize,
    pub max_t: usize,
    pub mean_t: f64,
    pub max_k: usize,
    pub mean_k: f64,
    /// Strict-containment FAIL verdicts.
    pub fail_verdicts: usize,
    pub bound_violations: usize,
    pub outside_violations: usize,
    pub runs: Vec<CampaignRun>,
}

impl CampaignReport {
    /// Errored runs count as failures: they produced no verdict.
    pub fn violation(&self) -> bool {
        self.fail_verdicts + self.bound_violations + self.outside_violations + self.errors > 0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("a campaign needs at least one run")]
pub struct EmptyCampaign;

/// Runs `num_runs` copies of `base`, run `i` with every seed offset by
/// `i·seed_stride`. Runs execute in parallel; the report is ordered by index.
pub fn run_campaign(base: &ExperimentConfig, num_runs: usize, seed_stride: u64) -> Result<CampaignReport, EmptyCampaign> {
    if num_runs == 0 {
        return Err(EmptyCampaign);
    }
    let mut base = base.clone();
    base.outputs = OutputPaths::default();
    let runs: Vec<CampaignRun> = (0..num_runs)
        .into_par_iter()
        .map(|index| {
            let seed_offset = (index as u64).wrapping_mul(seed_stride);
            match run_experiment(&base.with_seed_offset(seed_offset)) {
                Ok(r) => CampaignRun {
                    index,
                    seed_offset,
                    metrics: Some(r.metrics),
                    error: None,
                },
                Err(e) => CampaignRun {
                    index,
                    seed_offset,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(aggregate(num_runs, seed_stride, runs))
}

fn aggregate(num_runs: usize, seed_stride: u64, mut runs: Vec<CampaignRun>) -> CampaignReport {
    runs.sort_by_key(|r| r.index);
    let done: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let mean = |f: fn(&RunMetrics) -> usize| {
        if done.is_empty() {
            0.0
        } else {
            done.iter().map(|m| f(m) as f64).sum::<f64>() / done.len() as f64
        }
    };
    CampaignReport {
        num_runs,
        seed_stride,
        completed: done.len(),
        errors: runs.len() - done.len(),
        max_t: done.iter().map(|m| m.perturbation_count).max().unwrap_or(0),
        mean_t: mean(|m| m.perturbation_count),
        max_k: done.iter().map(|m| m.max_changes).max().unwrap_or(0),
        mean_k: mean(|m| m.max_changes),
        fail_verdicts: done.iter().filter(|m| matches!(m.strict, StrictVerdict::Fail { .. })).count(),
        bound_violations: done.iter().filter(|m| m.bound_respected == Some(false)).count(),
        outside_violations: done.iter().filter(|m| !m.outside_exact).count(),
        runs,
    }
}
