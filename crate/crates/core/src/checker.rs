//! Legitimacy predicates and trace analysis for Byzantine containment.
//!
//! A non-root correct process is legitimate when its parent chain is a
//! *correct path*: every hop points at a neighbor whose height is one less
//! and minimal among the hop's neighbors, and the chain ends at the root or
//! at a Byzantine process publishing `(NIL, 0)`. The root is legitimate when
//! it holds `(NIL, 0)`.
//!
//! Zone checks exempt the processes of a containment zone. A configuration
//! is zone-stable when no correct process outside the zone is enabled. This
//! matches "does not modify its output while Byzantines are idle" because
//! every enabled rule of the protocol changes the parent or the height.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{self, Action, Configuration, ProcessState, Rule};
use crate::topology::{ProcessId, Topology, Zone, ZoneReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckerError {
    #[error("process {0} is Byzantine; legitimacy is only defined for correct processes")]
    Byzantine(ProcessId),
    #[error("corrupt trace at step {step}: {reason}")]
    CorruptTrace { step: usize, reason: String },
}

/// One executed step: who was activated and what changed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub activated: Vec<ProcessId>,
    pub actions: Vec<Action>,
}

impl StepRecord {
    pub fn byzantine_active(&self, topo: &Topology) -> bool {
        self.activated.iter().any(|v| topo.is_byzantine(*v))
    }
}

/// Why a run stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Nothing activatable: the execution is over.
    Terminal,
    /// Zone-legitimate and stable, followed by the required number of
    /// adversary-active steps with no change outside the zone.
    Quiescent,
    /// `max_steps` reached first.
    MaxSteps,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub topo: Topology,
    /// `configs[0]` is the initial configuration; `configs.len() == steps.len() + 1`.
    pub configs: Vec<Configuration>,
    pub steps: Vec<StepRecord>,
    pub truncated: bool,
    pub stop: StopReason,
    /// Adversary-active quiet steps the run demanded before stopping.
    pub quiet_target: usize,
    pub fairness_bound: u32,
}

impl Trace {
    pub fn initial(&self) -> &Configuration {
        &self.configs[0]
    }

    pub fn last(&self) -> &Configuration {
        self.configs.last().expect("a trace holds at least its initial configuration")
    }

    /// Re-executes every step and compares against the recorded actions and
    /// configurations.
    pub fn replay_check(&self) -> Result<(), CheckerError> {
        if self.configs.len() != self.steps.len() + 1 {
            return Err(CheckerError::CorruptTrace {
                step: self.steps.len(),
                reason: format!(
                    "{} configurations for {} steps",
                    self.configs.len(),
                    self.steps.len()
                ),
            });
        }
        for (i, rec) in self.steps.iter().enumerate() {
            let next = replay_step(&self.topo, &self.configs[i], rec, i)?;
            if next != self.configs[i + 1] {
                return Err(CheckerError::CorruptTrace {
                    step: i,
                    reason: "recorded configuration differs from replay".into(),
                });
            }
        }
        Ok(())
    }
}

/// Applies a recorded step to `config`, checking that the recorded actions are
/// exactly what the protocol produces.
pub fn replay_step(
    topo: &Topology,
    config: &Configuration,
    rec: &StepRecord,
    index: usize,
) -> Result<Configuration, CheckerError> {
    let corrupt = |reason: String| CheckerError::CorruptTrace { step: index, reason };
    let activated: BTreeSet<ProcessId> = rec.activated.iter().copied().collect();
    if activated.len() != rec.activated.len() {
        return Err(corrupt("duplicate activated id".into()));
    }
    let writes: BTreeMap<ProcessId, _> = rec
        .actions
        .iter()
        .filter(|a| a.rule == Rule::ByzantineWrite)
        .map(|a| (a.process, a.new_state))
        .collect();
    let (next, actions) =
        protocol::step(topo, config, &activated, &writes).map_err(|e| corrupt(e.to_string()))?;
    if actions != rec.actions {
        return Err(corrupt("recorded actions differ from protocol actions".into()));
    }
    Ok(next)
}

#[inline]
fn is_chain_origin(topo: &Topology, config: &Configuration, u: ProcessId) -> bool {
    let s = config[u];
    (u == topo.root() || topo.is_byzantine(u)) && s.parent.is_none() && s.height == 0
}

/// Local hop conditions for `u` and its parent: adjacency, height link and
/// minimality of the parent's height.
#[inline]
fn hop_ok(topo: &Topology, config: &Configuration, u: ProcessId) -> bool {
    let s = config[u];
    let Some(p) = s.parent else {
        return false;
    };
    if p.0 >= topo.n() || !topo.is_neighbor(u, p) {
        return false;
    }
    let hp = config[p].height;
    hp.checked_add(1) == Some(s.height) && protocol::min_neighbor_height(topo, config, u) == Some(hp)
}

/// Whether a correct path ends at `u`, by walking parent pointers. Heights
/// strictly decrease along an accepted hop, so the walk takes at most
/// `H_u` hops.
fn correct_path_ends_at(topo: &Topology, config: &Configuration, mut u: ProcessId) -> bool {
    loop {
        if is_chain_origin(topo, config, u) {
            return true;
        }
        if !hop_ok(topo, config, u) {
            return false;
        }
        u = config[u].parent.expect("hop_ok implies a parent");
    }
}

pub fn check_spec(topo: &Topology, config: &Configuration, v: ProcessId) -> Result<bool, CheckerError> {
    if topo.is_byzantine(v) {
        return Err(CheckerError::Byzantine(v));
    }
    if v == topo.root() {
        return Ok(config[v] == ProcessState::ROOT);
    }
    Ok(hop_ok(topo, config, v) && correct_path_ends_at(topo, config, config[v].parent.unwrap()))
}

/// Legitimacy of every process in one pass (memoized walks). Byzantine
/// entries are `false`.
pub fn spec_table(topo: &Topology, config: &Configuration) -> Vec<bool> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unknown,
        Yes,
        No,
    }
    let n = topo.n();
    let mut chain = vec![Mark::Unknown; n];
    let mut path = Vec::new();
    for start in topo.processes() {
        if chain[start.0] != Mark::Unknown {
            continue;
        }
        path.clear();
        let mut u = start;
        let result = loop {
            match chain[u.0] {
                Mark::Yes => break true,
                Mark::No => break false,
                Mark::Unknown => {}
            }
            if is_chain_origin(topo, config, u) {
                chain[u.0] = Mark::Yes;
                break true;
            }
            if !hop_ok(topo, config, u) {
                chain[u.0] = Mark::No;
                break false;
            }
            path.push(u);
            u = config[u].parent.unwrap();
        };
        let mark = if result { Mark::Yes } else { Mark::No };
        for &w in &path {
            chain[w.0] = mark;
        }
    }
    topo.processes()
        .map(|v| {
            if topo.is_byzantine(v) {
                false
            } else if v == topo.root() {
                config[v] == ProcessState::ROOT
            } else {
                chain[v.0] == Mark::Yes
            }
        })
        .collect()
}

pub fn is_zone_legitimate(topo: &Topology, zones: &ZoneReport, config: &Configuration, zone: Zone) -> bool {
    let table = spec_table(topo, config);
    topo.correct_processes()
        .filter(|v| !zones.contains(zone, *v))
        .all(|v| table[v.0])
}

pub fn is_zone_stable(topo: &Topology, zones: &ZoneReport, config: &Configuration, zone: Zone) -> bool {
    topo.correct_processes()
        .filter(|v| !zones.contains(zone, *v))
        .all(|v| !protocol::is_enabled(topo, config, v))
}

#[inline]
pub fn is_zone_contained(topo: &Topology, zones: &ZoneReport, config: &Configuration, zone: Zone) -> bool {
    is_zone_stable(topo, zones, config, zone) && is_zone_legitimate(topo, zones, config, zone)
}

/// Every correct process strictly closer to the root than to any Byzantine
/// holds its exact BFS height, with a parent one level closer to the root.
pub fn outside_zone_exact(topo: &Topology, zones: &ZoneReport, config: &Configuration) -> bool {
    topo.correct_processes()
        .filter(|v| !zones.in_sb[v.0])
        .all(|v| {
            let s = config[v];
            let d = zones.dist_root[v.0];
            if v == topo.root() {
                return s == ProcessState::ROOT;
            }
            s.height == d
                && s.parent
                    .is_some_and(|p| topo.is_neighbor(v, p) && config[p].height + 1 == d)
        })
}

/// Whether a step modified an output variable of a correct process outside `zone`.
pub fn step_changes_outside(topo: &Topology, zones: &ZoneReport, rec: &StepRecord, zone: Zone) -> bool {
    rec.actions.iter().any(|a| {
        !topo.is_byzantine(a.process) && !zones.contains(zone, a.process) && a.changes_state()
    })
}

/// A perturbation spans from a zone-contained configuration to the next one.
/// `end` is `None` when the trace stops before containment is restored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub start: usize,
    pub end: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub zone: Zone,
    pub perturbations: Vec<Perturbation>,
    pub perturbation_count: usize,
    /// Output-variable modifications per correct process after `contained_at`.
    pub per_process_s_var_changes: BTreeMap<ProcessId, usize>,
    /// Largest entry of `per_process_s_var_changes` over processes outside the zone.
    pub max_changes_outside_zone: usize,
    /// First zone-legitimate and zone-stable configuration.
    pub contained_at: Option<usize>,
}

/// Counts perturbations relative to `zone`.
///
/// Steps that only move Byzantines or in-zone processes never open a
/// perturbation. A perturbation still open when the trace ends is counted.
pub fn analyze_trace(trace: &Trace, zones: &ZoneReport, zone: Zone) -> Result<PerturbationReport, CheckerError> {
    trace.replay_check()?;
    let topo = &trace.topo;
    let contained: Vec<bool> = trace
        .configs
        .iter()
        .map(|c| is_zone_contained(topo, zones, c, zone))
        .collect();
    let contained_at = contained.iter().position(|x| *x);

    let mut perturbations = Vec::new();
    if let Some(first) = contained_at {
        let mut anchor = first;
        let mut changed = false;
        for (j, rec) in trace.steps.iter().enumerate().skip(first) {
            if step_changes_outside(topo, zones, rec, zone) {
                changed = true;
            }
            if contained[j + 1] {
                if changed {
                    perturbations.push(Perturbation {
                        start: anchor,
                        end: Some(j + 1),
                    });
                }
                anchor = j + 1;
                changed = false;
            }
        }
        if changed {
            perturbations.push(Perturbation {
                start: anchor,
                end: None,
            });
        }
    }

    let mut per_process: BTreeMap<ProcessId, usize> = topo.correct_processes().map(|v| (v, 0)).collect();
    if let Some(first) = contained_at {
        for rec in &trace.steps[first..] {
            for a in &rec.actions {
                if !topo.is_byzantine(a.process) && a.changes_state() {
                    *per_process.get_mut(&a.process).unwrap() += 1;
                }
            }
        }
    }
    let max_changes_outside_zone = per_process
        .iter()
        .filter(|(v, _)| !zones.contains(zone, **v))
        .map(|(_, c)| *c)
        .max()
        .unwrap_or(0);

    Ok(PerturbationReport {
        zone,
        perturbation_count: perturbations.len(),
        perturbations,
        per_process_s_var_changes: per_process,
        max_changes_outside_zone,
        contained_at,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum StrictVerdict {
    /// From `at` on every configuration is SB-legitimate and no SB-correct
    /// process changes; `quiet_steps` adversary-active steps follow `at`.
    Contained { at: usize, quiet_steps: usize },
    Fail { truncated: bool },
}

impl StrictVerdict {
    pub fn contained_at(&self) -> Option<usize> {
        match *self {
            StrictVerdict::Contained { at, .. } => Some(at),
            StrictVerdict::Fail { .. } => None,
        }
    }
}

/// Finite-trace check of strict containment for zone SB.
///
/// Finds the earliest suffix in which every configuration is SB-legitimate
/// and no SB-correct process changes. The suffix must either end the
/// execution (nothing activatable) or contain at least `trace.quiet_target`
/// adversary-active steps; otherwise the verdict is `Fail`.
pub fn verify_td_strict(trace: &Trace, zones: &ZoneReport) -> StrictVerdict {
    let topo = &trace.topo;
    let fail = StrictVerdict::Fail {
        truncated: trace.truncated,
    };
    let last = trace.configs.len() - 1;
    if !is_zone_legitimate(topo, zones, &trace.configs[last], Zone::Sb) {
        return fail;
    }
    let mut at = last;
    let mut quiet_steps = 0usize;
    while at > 0 {
        let rec = &trace.steps[at - 1];
        if step_changes_outside(topo, zones, rec, Zone::Sb)
            || !is_zone_legitimate(topo, zones, &trace.configs[at - 1], Zone::Sb)
        {
            break;
        }
        if rec.byzantine_active(topo) {
            quiet_steps += 1;
        }
        at -= 1;
    }
    if trace.stop == StopReason::Terminal || quiet_steps >= trace.quiet_target {
        StrictVerdict::Contained { at, quiet_steps }
    } else {
        fail
    }
}
