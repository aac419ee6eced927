//! Daemons and the simulation loop.
//!
//! Strong fairness is enforced as bounded fairness: a correct process that
//! has been enabled but unselected for `fairness_bound - 1` consecutive steps
//! is forced into the next selection, so no starvation count ever reaches
//! the bound.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryStrategy;
use crate::checker::{self, StepRecord, StopReason, Trace};
use crate::protocol::{self, Configuration, ProtocolError};
use crate::topology::{compute_zones, ProcessId, Topology, Zone};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    /// One process per step, rotating through ids.
    RoundRobin,
    /// Each activatable process independently with probability 1/2.
    Randomized,
    /// One activatable process, uniformly.
    CentralRandom,
    /// Byzantine-first, then lowest-id correct process.
    AdversarialGreedy,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 4] = [
        SchedulerKind::RoundRobin,
        SchedulerKind::Randomized,
        SchedulerKind::CentralRandom,
        SchedulerKind::AdversarialGreedy,
    ];
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchedulerKind::RoundRobin => "round_robin",
            SchedulerKind::Randomized => "randomized",
            SchedulerKind::CentralRandom => "central_random",
            SchedulerKind::AdversarialGreedy => "adversarial_greedy",
        })
    }
}

impl std::str::FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchedulerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown scheduler `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchedulerPolicy {
    pub kind: SchedulerKind,
    pub seed: u64,
    pub fairness_bound: u32,
}

impl SchedulerPolicy {
    /// Fairness bound `2n`.
    pub fn with_default_bound(kind: SchedulerKind, seed: u64, n: usize) -> Self {
        SchedulerPolicy {
            kind,
            seed,
            fairness_bound: (2 * n).max(1) as u32,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("deadlock reached")]
    Deadlock,
    #[error("fairness bound must be at least 1")]
    ZeroFairnessBound,
    #[error("max_steps must be at least 1")]
    ZeroMaxSteps,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("invalid initial configuration: {0}")]
    InvalidInitial(ProtocolError),
}

/// Consecutive enabled-but-unselected steps per process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FairnessLedger {
    pub starvation_count: Vec<u32>,
}

impl FairnessLedger {
    pub fn new(n: usize) -> Self {
        FairnessLedger {
            starvation_count: vec![0; n],
        }
    }
}

/// Daemon state for one run: policy, ledger, rng and rotation cursor.
#[derive(Clone, Debug)]
pub struct Daemon {
    policy: SchedulerPolicy,
    ledger: FairnessLedger,
    rng: ChaCha8Rng,
    last_picked: Option<ProcessId>,
}

impl Daemon {
    pub fn new(policy: SchedulerPolicy, n: usize) -> Result<Self, SchedulerError> {
        if policy.fairness_bound == 0 {
            return Err(SchedulerError::ZeroFairnessBound);
        }
        Ok(Daemon {
            policy,
            ledger: FairnessLedger::new(n),
            rng: ChaCha8Rng::seed_from_u64(policy.seed),
            last_picked: None,
        })
    }

    pub fn ledger(&self) -> &FairnessLedger {
        &self.ledger
    }

    pub fn policy(&self) -> &SchedulerPolicy {
        &self.policy
    }

    /// Overrides the rotation cursor used by round-robin.
    pub fn set_last_picked(&mut self, v: Option<ProcessId>) {
        self.last_picked = v;
    }

    /// Picks a nonempty subset of `enabled_correct ∪ byzantines`.
    ///
    /// `disruptive` lists the Byzantines whose next write would enable a
    /// currently disabled correct process; only the greedy policy reads it.
    pub fn select(
        &mut self,
        enabled_correct: &[ProcessId],
        byzantines: &[ProcessId],
        disruptive: &[ProcessId],
    ) -> Result<BTreeSet<ProcessId>, SchedulerError> {
        let mut pool: Vec<ProcessId> = enabled_correct.iter().chain(byzantines).copied().collect();
        pool.sort_unstable();
        pool.dedup();
        if pool.is_empty() {
            return Err(SchedulerError::Deadlock);
        }

        let mut chosen = BTreeSet::new();
        match self.policy.kind {
            SchedulerKind::RoundRobin => {
                let next = match self.last_picked {
                    Some(last) => pool.iter().copied().find(|v| *v > last).unwrap_or(pool[0]),
                    None => pool[0],
                };
                chosen.insert(next);
            }
            SchedulerKind::Randomized => {
                for &v in &pool {
                    if self.rng.gen_bool(0.5) {
                        chosen.insert(v);
                    }
                }
                if chosen.is_empty() {
                    chosen.insert(*pool.choose(&mut self.rng).unwrap());
                }
            }
            SchedulerKind::CentralRandom => {
                chosen.insert(*pool.choose(&mut self.rng).unwrap());
            }
            SchedulerKind::AdversarialGreedy => {
                let first_disruptive = disruptive.iter().copied().filter(|b| byzantines.contains(b)).min();
                if let Some(b) = first_disruptive {
                    chosen.insert(b);
                } else if let Some(&v) = enabled_correct.iter().min() {
                    chosen.insert(v);
                } else {
                    chosen.insert(pool[0]);
                }
            }
        }

        let limit = self.policy.fairness_bound - 1;
        for &v in enabled_correct {
            if self.ledger.starvation_count[v.0] >= limit {
                chosen.insert(v);
            }
        }

        let enabled: BTreeSet<ProcessId> = enabled_correct.iter().copied().collect();
        for (i, count) in self.ledger.starvation_count.iter_mut().enumerate() {
            let v = ProcessId(i);
            if enabled.contains(&v) && !chosen.contains(&v) {
                *count += 1;
            } else {
                *count = 0;
            }
        }
        if self.policy.kind == SchedulerKind::RoundRobin {
            self.last_picked = chosen.iter().next_back().copied();
        }
        Ok(chosen)
    }
}

/// Knobs of [`run`] beyond policy and adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    pub max_steps: usize,
    /// Zone used by the stop condition.
    pub zone: Zone,
    /// Adversary-active steps without change outside the zone required
    /// before stopping. Defaults to `10·n·Δ`.
    pub quiet_steps: usize,
}

impl RunOptions {
    pub fn new(topo: &Topology, max_steps: usize, zone: Zone) -> Self {
        RunOptions {
            max_steps,
            zone,
            quiet_steps: default_quiet_steps(topo),
        }
    }
}

pub fn default_quiet_steps(topo: &Topology) -> usize {
    10 * topo.n() * topo.max_degree()
}

/// Byzantines whose next write would enable a currently disabled correct process.
pub fn disruptive_byzantines(
    topo: &Topology,
    config: &Configuration,
    adversary: &AdversaryStrategy,
    step_index: u64,
) -> Vec<ProcessId> {
    let mut out = Vec::new();
    let mut probe = config.clone();
    for &b in topo.byzantine() {
        let Ok(Some(write)) = adversary.byz_write(topo, config, b, step_index) else {
            continue;
        };
        if write == config[b] {
            continue;
        }
        probe[b] = write;
        let wakes = topo.neighbors(b).iter().any(|&q| {
            !topo.is_byzantine(q)
                && !protocol::is_enabled(topo, config, q)
                && protocol::is_enabled(topo, &probe, q)
        });
        probe[b] = config[b];
        if wakes {
            out.push(b);
        }
    }
    out
}

/// Runs the protocol from `initial`.
///
/// Without activatable processes the run ends (`Terminal`). With Byzantines
/// it ends once the configuration is zone-contained and `quiet_steps`
/// adversary-active steps have passed with no change outside the zone and
/// containment holding throughout (`Quiescent`), or at `max_steps`.
/// A silent adversary never writes, so its Byzantines are not activatable.
pub fn run(
    topo: &Topology,
    initial: &Configuration,
    policy: SchedulerPolicy,
    adversary: &AdversaryStrategy,
    options: RunOptions,
) -> Result<Trace, SchedulerError> {
    if options.max_steps == 0 {
        return Err(SchedulerError::ZeroMaxSteps);
    }
    initial.validate(topo).map_err(SchedulerError::InvalidInitial)?;
    let zones = compute_zones(topo);
    let mut daemon = Daemon::new(policy, topo.n())?;
    let mut config = initial.clone();
    let mut configs = vec![config.clone()];
    let mut steps = Vec::new();
    let mut quiet = 0usize;
    let mut stop = StopReason::MaxSteps;
    let mut contained = checker::is_zone_contained(topo, &zones, &config, options.zone);

    for step_index in 0..options.max_steps {
        let enabled = protocol::enabled_set(topo, &config);
        let byzantines: &[ProcessId] = if adversary.is_silent() { &[] } else { &enabled.byzantine };
        if enabled.correct.is_empty() && byzantines.is_empty() {
            stop = StopReason::Terminal;
            break;
        }
        if !byzantines.is_empty() && contained && quiet >= options.quiet_steps {
            stop = StopReason::Quiescent;
            break;
        }
        let disruptive = if policy.kind == SchedulerKind::AdversarialGreedy && !byzantines.is_empty() {
            disruptive_byzantines(topo, &config, adversary, step_index as u64)
        } else {
            Vec::new()
        };
        let selected = daemon.select(&enabled.correct, byzantines, &disruptive)?;
        let mut writes = BTreeMap::new();
        for &b in selected.iter().filter(|v| topo.is_byzantine(**v)) {
            if let Some(w) = adversary
                .byz_write(topo, &config, b, step_index as u64)
                .expect("selected Byzantines are Byzantine")
            {
                writes.insert(b, w);
            }
        }
        let (next, actions) = protocol::step(topo, &config, &selected, &writes)?;
        let record = StepRecord {
            activated: selected.into_iter().collect(),
            actions,
        };
        let changed_outside = checker::step_changes_outside(topo, &zones, &record, options.zone);
        contained = checker::is_zone_contained(topo, &zones, &next, options.zone);
        if changed_outside || !contained {
            quiet = 0;
        } else if record.byzantine_active(topo) {
            quiet += 1;
        }
        steps.push(record);
        configs.push(next.clone());
        config = next;
    }

    if stop == StopReason::MaxSteps {
        // The loop may have used its last iteration to reach a stopping point.
        let enabled = protocol::enabled_set(topo, &config);
        let byz_active = !adversary.is_silent() && !enabled.byzantine.is_empty();
        if enabled.correct.is_empty() && !byz_active {
            stop = StopReason::Terminal;
        } else if byz_active && contained && quiet >= options.quiet_steps {
            stop = StopReason::Quiescent;
        }
    }
    Ok(Trace {
        topo: topo.clone(),
        configs,
        steps,
        truncated: stop == StopReason::MaxSteps,
        stop,
        quiet_target: options.quiet_steps,
        fairness_bound: policy.fairness_bound,
    })
}

/// Longest run of consecutive steps in which `v` was enabled before the step
/// and not activated, for every correct process.
pub fn max_starvation(trace: &Trace) -> Vec<usize> {
    let topo = &trace.topo;
    let mut current = vec![0usize; topo.n()];
    let mut worst = vec![0usize; topo.n()];
    for (i, rec) in trace.steps.iter().enumerate() {
        let cfg = &trace.configs[i];
        for v in topo.correct_processes() {
            if protocol::is_enabled(topo, cfg, v) && !rec.activated.contains(&v) {
                current[v.0] += 1;
                worst[v.0] = worst[v.0].max(current[v.0]);
            } else {
                current[v.0] = 0;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::AdversaryKind;
    use crate::protocol::{legitimate_configuration, ProcessState};

    fn ids(v: &[usize]) -> Vec<ProcessId> {
        v.iter().copied().map(ProcessId).collect()
    }

    fn policy(kind: SchedulerKind, k: u32) -> SchedulerPolicy {
        SchedulerPolicy {
            kind,
            seed: 3,
            fairness_bound: k,
        }
    }

    #[test]
    fn round_robin_rotates() {
        let mut d = Daemon::new(policy(SchedulerKind::RoundRobin, 100), 6).unwrap();
        d.set_last_picked(Some(ProcessId(1)));
        let s = d.select(&ids(&[1, 2, 3]), &[], &[]).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(2)]));
        let s = d.select(&ids(&[1, 2, 3]), &[], &[]).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(3)]));
        let s = d.select(&ids(&[1, 2, 3]), &[], &[]).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(1)]));
    }

    #[test]
    fn deadlock_on_empty_input() {
        let mut d = Daemon::new(policy(SchedulerKind::CentralRandom, 4), 3).unwrap();
        assert_eq!(d.select(&[], &[], &[]), Err(SchedulerError::Deadlock));
        assert_eq!(
            Daemon::new(policy(SchedulerKind::CentralRandom, 0), 3).unwrap_err(),
            SchedulerError::ZeroFairnessBound
        );
    }

    #[test]
    fn starving_process_is_forced() {
        for kind in SchedulerKind::ALL {
            let k = 4;
            let mut d = Daemon::new(policy(kind, k), 8).unwrap();
            let enabled = ids(&[1, 5]);
            let mut unselected = 0;
            for _ in 0..50 {
                let s = d.select(&enabled, &[], &[]).unwrap();
                assert!(!s.is_empty());
                if s.contains(&ProcessId(5)) {
                    unselected = 0;
                } else {
                    unselected += 1;
                }
                assert!(unselected < k, "{kind}: 5 starved for {unselected} steps");
                assert!(d.ledger().starvation_count.iter().all(|c| *c < k));
            }
        }
    }

    #[test]
    fn greedy_prefers_disruptive_byzantine() {
        let mut d = Daemon::new(policy(SchedulerKind::AdversarialGreedy, 10), 6).unwrap();
        let s = d.select(&ids(&[1, 2]), &ids(&[4, 5]), &ids(&[5])).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(5)]));
        let s = d.select(&ids(&[1, 2]), &ids(&[4, 5]), &[]).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(1)]));
        let s = d.select(&[], &ids(&[4, 5]), &[]).unwrap();
        assert_eq!(s, BTreeSet::from([ProcessId(4)]));
    }

    #[test]
    fn legitimate_start_is_immediately_terminal() {
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[]).unwrap();
        let c = legitimate_configuration(&t);
        let adv = AdversaryStrategy::new(AdversaryKind::Silent, 0, 16);
        let trace = run(&t, &c, policy(SchedulerKind::RoundRobin, 8), &adv, RunOptions::new(&t, 100, Zone::Sb)).unwrap();
        assert!(trace.steps.is_empty());
        assert_eq!(trace.stop, StopReason::Terminal);
    }

    #[test]
    fn path_converges_to_bfs_heights() {
        let t = Topology::new(3, &[(0, 1), (1, 2)], 0, &[]).unwrap();
        let c = Configuration::new(vec![
            ProcessState::new(Some(1), 5),
            ProcessState::new(None, 0),
            ProcessState::new(Some(1), 0),
        ]);
        let adv = AdversaryStrategy::new(AdversaryKind::Silent, 0, 12);
        for kind in SchedulerKind::ALL {
            let trace = run(&t, &c, policy(kind, 6), &adv, RunOptions::new(&t, 1000, Zone::Sb)).unwrap();
            assert_eq!(trace.stop, StopReason::Terminal);
            let heights: Vec<u32> = trace.last().states.iter().map(|s| s.height).collect();
            assert_eq!(heights, vec![0, 1, 2], "{kind}");
        }
    }

    #[test]
    fn byzantine_leaf_run_ends_contained() {
        let t = Topology::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4)], 0, &[4]).unwrap();
        let c = Configuration::new(vec![ProcessState::new(None, 3); 5]);
        let adv = AdversaryStrategy::new(AdversaryKind::FakeRoot, 0, 20);
        let trace = run(&t, &c, policy(SchedulerKind::CentralRandom, 10), &adv, RunOptions::new(&t, 10_000, Zone::Sb)).unwrap();
        assert_eq!(trace.stop, StopReason::Quiescent);
        let z = compute_zones(&t);
        assert!(checker::is_zone_contained(&t, &z, trace.last(), Zone::Sb));
    }

    #[test]
    fn silent_byzantine_start_takes_no_step() {
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[3]).unwrap();
        let c = legitimate_configuration(&t);
        let adv = AdversaryStrategy::new(AdversaryKind::Silent, 0, 16);
        let trace = run(&t, &c, policy(SchedulerKind::Randomized, 8), &adv, RunOptions::new(&t, 100, Zone::Sb)).unwrap();
        assert!(trace.steps.is_empty());
    }
}
