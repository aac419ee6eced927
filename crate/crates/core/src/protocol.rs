//! The min+1 breadth-first spanning-tree protocol with circular tie-breaking.
//!
//! Each process owns two output variables, a parent pointer and a height.
//! The root keeps `(NIL, 0)`; every other process points at a neighbor of
//! minimum height and sets its own height to that neighbor's height plus one.
//! When several neighbors share the minimum, the new parent is the first of
//! them that follows the current parent in the (cyclic) sorted neighbor list.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ProcessId, Topology};

/// Output variables of one process. `parent == None` is the NIL pointer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessState {
    pub parent: Option<ProcessId>,
    pub height: u32,
}

impl ProcessState {
    pub const ROOT: ProcessState = ProcessState {
        parent: None,
        height: 0,
    };

    pub fn new(parent: Option<usize>, height: u32) -> Self {
        ProcessState {
            parent: parent.map(ProcessId),
            height,
        }
    }
}

impl fmt::Display for ProcessState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.parent {
            Some(p) => write!(f, "({p}, {})", self.height),
            None => write!(f, "(NIL, {})", self.height),
        }
    }
}

/// Global snapshot: one state per process, indexed by id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration {
    pub states: Vec<ProcessState>,
}

impl Configuration {
    pub fn new(states: Vec<ProcessState>) -> Self {
        Configuration { states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Checks length and that every correct process points at NIL or a neighbor.
    /// Byzantine entries may hold any parent id below `n`.
    pub fn validate(&self, topo: &Topology) -> Result<(), ProtocolError> {
        if self.len() != topo.n() {
            return Err(ProtocolError::LengthMismatch {
                expected: topo.n(),
                found: self.len(),
            });
        }
        for v in topo.processes() {
            if let Some(p) = self[v].parent {
                if p.0 >= topo.n() {
                    return Err(ProtocolError::InvalidId(p));
                }
                if !topo.is_byzantine(v) && !topo.is_neighbor(v, p) {
                    return Err(ProtocolError::ParentNotNeighbor { process: v, parent: p });
                }
            }
        }
        Ok(())
    }
}

impl Index<ProcessId> for Configuration {
    type Output = ProcessState;

    #[inline]
    fn index(&self, v: ProcessId) -> &ProcessState {
        &self.states[v.0]
    }
}

impl IndexMut<ProcessId> for Configuration {
    #[inline]
    fn index_mut(&mut self, v: ProcessId) -> &mut ProcessState {
        &mut self.states[v.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    RootRule,
    NonrootRule,
    ByzantineWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub process: ProcessId,
    #[serde(rename = "old")]
    pub old_state: ProcessState,
    #[serde(rename = "new")]
    pub new_state: ProcessState,
    pub rule: Rule,
}

impl Action {
    #[inline]
    pub fn changes_state(&self) -> bool {
        self.old_state != self.new_state
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("process {0} is not the root")]
    NotRoot(ProcessId),
    #[error("process {0} is not enabled")]
    NotEnabled(ProcessId),
    #[error("process {0} is Byzantine and does not run the protocol")]
    Byzantine(ProcessId),
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("candidate {candidate} is not a neighbor of {process}")]
    CandidateNotNeighbor {
        process: ProcessId,
        candidate: ProcessId,
    },
    #[error("parent {parent} of correct process {process} is not a neighbor")]
    ParentNotNeighbor { process: ProcessId, parent: ProcessId },
    #[error("empty activation set")]
    EmptyActivation,
    #[error("byzantine write for correct process {0}")]
    WriteForCorrect(ProcessId),
    #[error("byzantine write for {0}, which is not activated")]
    WriteNotActivated(ProcessId),
    #[error("invalid process id {0}")]
    InvalidId(ProcessId),
    #[error("configuration has {found} states, expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Minimum height over the neighbors of `v`, or `None` for an isolated process.
#[inline]
pub fn min_neighbor_height(topo: &Topology, config: &Configuration, v: ProcessId) -> Option<u32> {
    topo.neighbors(v).iter().map(|&q| config[q].height).min()
}

pub fn guard_root(topo: &Topology, config: &Configuration, v: ProcessId) -> Result<bool, ProtocolError> {
    if v != topo.root() {
        return Err(ProtocolError::NotRoot(v));
    }
    let s = config[v];
    Ok(s.parent.is_some() || s.height != 0)
}

/// Non-root guard: NIL parent, broken height link, or a parent whose height
/// is not the minimum among the neighbors. Heights are read as published,
/// Byzantine values included.
pub fn guard_nonroot(topo: &Topology, config: &Configuration, v: ProcessId) -> bool {
    let s = config[v];
    let Some(p) = s.parent else {
        return true;
    };
    let hp = config[p].height;
    if s.height != hp.saturating_add(1) {
        return true;
    }
    match min_neighbor_height(topo, config, v) {
        Some(min) => hp != min,
        None => true,
    }
}

/// Guard of a correct process, dispatching on whether it is the root.
#[inline]
pub fn is_enabled(topo: &Topology, config: &Configuration, v: ProcessId) -> bool {
    if v == topo.root() {
        let s = config[v];
        s.parent.is_some() || s.height != 0
    } else {
        guard_nonroot(topo, config, v)
    }
}

/// Circular successor: scans the neighbors of `v` starting strictly after
/// `current_parent` and returns the first candidate met, wrapping around.
/// With a NIL (or non-neighbor) parent the smallest candidate is returned.
pub fn suivant(
    topo: &Topology,
    v: ProcessId,
    current_parent: Option<ProcessId>,
    candidates: &[ProcessId],
) -> Result<ProcessId, ProtocolError> {
    if candidates.is_empty() {
        return Err(ProtocolError::EmptyCandidates);
    }
    let nbrs = topo.neighbors(v);
    if let Some(&c) = candidates.iter().find(|c| nbrs.binary_search(c).is_err()) {
        return Err(ProtocolError::CandidateNotNeighbor {
            process: v,
            candidate: c,
        });
    }
    let start = match current_parent.map(|p| nbrs.binary_search(&p)) {
        Some(Ok(pos)) => pos + 1,
        _ => 0,
    };
    let len = nbrs.len();
    (0..len)
        .map(|i| nbrs[(start + i) % len])
        .find(|q| candidates.contains(q))
        .ok_or(ProtocolError::EmptyCandidates)
}

/// New state of enabled correct process `v`, computed from the snapshot.
pub fn next_state(topo: &Topology, config: &Configuration, v: ProcessId) -> ProcessState {
    if v == topo.root() {
        return ProcessState::ROOT;
    }
    let min = min_neighbor_height(topo, config, v).expect("non-root process in a connected graph has neighbors");
    let nbrs = topo.neighbors(v);
    let start = match config[v].parent.map(|p| nbrs.binary_search(&p)) {
        Some(Ok(pos)) => pos + 1,
        _ => 0,
    };
    let len = nbrs.len();
    let parent = (0..len)
        .map(|i| nbrs[(start + i) % len])
        .find(|&q| config[q].height == min)
        .expect("the minimum is attained");
    ProcessState {
        parent: Some(parent),
        height: min.saturating_add(1),
    }
}

/// Executes the enabled rule of correct process `v` against `config`.
pub fn apply_action(topo: &Topology, config: &Configuration, v: ProcessId) -> Result<Action, ProtocolError> {
    if v.0 >= topo.n() {
        return Err(ProtocolError::InvalidId(v));
    }
    if topo.is_byzantine(v) {
        return Err(ProtocolError::Byzantine(v));
    }
    if !is_enabled(topo, config, v) {
        return Err(ProtocolError::NotEnabled(v));
    }
    let new_state = next_state(topo, config, v);
    let action = Action {
        process: v,
        old_state: config[v],
        new_state,
        rule: if v == topo.root() {
            Rule::RootRule
        } else {
            Rule::NonrootRule
        },
    };
    debug_assert!(action.changes_state(), "enabled action must modify an output variable");
    Ok(action)
}

/// Activatable processes of a configuration.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EnabledSet {
    /// Correct processes whose guard holds.
    pub correct: Vec<ProcessId>,
    /// Byzantine processes, always activatable.
    pub byzantine: Vec<ProcessId>,
}

impl EnabledSet {
    pub fn is_empty(&self) -> bool {
        self.correct.is_empty() && self.byzantine.is_empty()
    }
}

pub fn enabled_set(topo: &Topology, config: &Configuration) -> EnabledSet {
    let mut out = EnabledSet::default();
    for v in topo.processes() {
        if topo.is_byzantine(v) {
            out.byzantine.push(v);
        } else if is_enabled(topo, config, v) {
            out.correct.push(v);
        }
    }
    out
}

/// One atomic step: every activated process reads the start-of-step snapshot,
/// then all new states are installed at once. Byzantine writes are installed
/// verbatim; an activated Byzantine without a write keeps its state.
pub fn step(
    topo: &Topology,
    config: &Configuration,
    activated: &BTreeSet<ProcessId>,
    byz_writes: &BTreeMap<ProcessId, ProcessState>,
) -> Result<(Configuration, Vec<Action>), ProtocolError> {
    if activated.is_empty() {
        return Err(ProtocolError::EmptyActivation);
    }
    for &b in byz_writes.keys() {
        if b.0 >= topo.n() {
            return Err(ProtocolError::InvalidId(b));
        }
        if !topo.is_byzantine(b) {
            return Err(ProtocolError::WriteForCorrect(b));
        }
        if !activated.contains(&b) {
            return Err(ProtocolError::WriteNotActivated(b));
        }
    }
    let mut actions = Vec::with_capacity(activated.len());
    for &v in activated {
        if v.0 >= topo.n() {
            return Err(ProtocolError::InvalidId(v));
        }
        if topo.is_byzantine(v) {
            if let Some(&w) = byz_writes.get(&v) {
                actions.push(Action {
                    process: v,
                    old_state: config[v],
                    new_state: w,
                    rule: Rule::ByzantineWrite,
                });
            }
        } else {
            actions.push(apply_action(topo, config, v)?);
        }
    }
    let mut next = config.clone();
    for a in &actions {
        next[a.process] = a.new_state;
    }
    Ok((next, actions))
}

/// Breadth-first legitimate configuration: heights equal root distances and
/// each non-root points at its smallest-id neighbor one hop closer.
/// Byzantine processes get the state a correct process would hold.
pub fn legitimate_configuration(topo: &Topology) -> Configuration {
    let dist = crate::topology::bfs_distances(topo, &[topo.root()]).expect("root is valid");
    let states = topo
        .processes()
        .map(|v| {
            if v == topo.root() {
                ProcessState::ROOT
            } else {
                let parent = topo
                    .neighbors(v)
                    .iter()
                    .copied()
                    .find(|q| dist[q.0] + 1 == dist[v.0])
                    .expect("connected graph");
                ProcessState {
                    parent: Some(parent),
                    height: dist[v.0],
                }
            }
        })
        .collect();
    Configuration::new(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(i: usize) -> ProcessId {
        ProcessId(i)
    }

    fn st(parent: Option<usize>, h: u32) -> ProcessState {
        ProcessState::new(parent, h)
    }

    fn path3() -> Topology {
        Topology::new(3, &[(0, 1), (1, 2)], 0, &[]).unwrap()
    }

    fn triangle(byz: &[usize]) -> Topology {
        Topology::new(3, &[(0, 1), (1, 2), (0, 2)], 0, byz).unwrap()
    }

    #[test]
    fn root_guard() {
        let t = path3();
        let mut c = Configuration::new(vec![st(None, 0), st(Some(0), 1), st(Some(1), 2)]);
        assert!(!guard_root(&t, &c, p(0)).unwrap());
        c[p(0)] = st(None, 5);
        assert!(guard_root(&t, &c, p(0)).unwrap());
        c[p(0)] = st(Some(1), 0);
        assert!(guard_root(&t, &c, p(0)).unwrap());
        assert_eq!(guard_root(&t, &c, p(1)), Err(ProtocolError::NotRoot(p(1))));
    }

    #[test]
    fn nonroot_guard() {
        let t = path3();
        let mut c = Configuration::new(vec![st(None, 0), st(Some(0), 1), st(Some(1), 2)]);
        assert!(!guard_nonroot(&t, &c, p(1)));
        c[p(1)] = st(Some(0), 3);
        assert!(guard_nonroot(&t, &c, p(1)));

        let t = triangle(&[]);
        let c = Configuration::new(vec![st(None, 0), st(Some(2), 7), st(Some(0), 1)]);
        assert!(guard_nonroot(&t, &c, p(1)));
        // Link H_1 = H_2 + 1 is not the failing disjunct here; the minimum is.
        let c = Configuration::new(vec![st(None, 0), st(Some(2), 2), st(Some(0), 1)]);
        assert!(guard_nonroot(&t, &c, p(1)));
    }

    #[test]
    fn suivant_circular_scan() {
        let t = Topology::new(6, &[(0, 1), (0, 3), (0, 5), (1, 2), (2, 4)], 2, &[]).unwrap();
        let v = p(0);
        assert_eq!(suivant(&t, v, Some(p(3)), &[p(1), p(5)]).unwrap(), p(5));
        assert_eq!(suivant(&t, v, Some(p(5)), &[p(1), p(3)]).unwrap(), p(1));
        assert_eq!(suivant(&t, v, None, &[p(3), p(5)]).unwrap(), p(3));
        assert_eq!(suivant(&t, v, None, &[]), Err(ProtocolError::EmptyCandidates));
        assert!(matches!(
            suivant(&t, v, None, &[p(2)]),
            Err(ProtocolError::CandidateNotNeighbor { .. })
        ));
    }

    #[test]
    fn root_action() {
        let t = path3();
        let c = Configuration::new(vec![st(None, 4), st(Some(0), 1), st(Some(1), 2)]);
        let a = apply_action(&t, &c, p(0)).unwrap();
        assert_eq!(a.new_state, ProcessState::ROOT);
        assert_eq!(a.rule, Rule::RootRule);
    }

    #[test]
    fn nonroot_action() {
        let t = path3();
        let c = Configuration::new(vec![st(None, 0), st(None, 9), st(Some(1), 10)]);
        let a = apply_action(&t, &c, p(1)).unwrap();
        assert_eq!(a.new_state, st(Some(0), 1));
        assert_eq!(a.rule, Rule::NonrootRule);
    }

    #[test]
    fn tie_breaking_after_byzantine_write() {
        let t = triangle(&[2]);
        let c = Configuration::new(vec![st(None, 0), st(Some(0), 1), st(Some(0), 1)]);
        let activated = BTreeSet::from([p(2)]);
        let writes = BTreeMap::from([(p(2), st(None, 0))]);
        let (c, _) = step(&t, &c, &activated, &writes).unwrap();
        // Parent 0 still has minimum height 0 and the link is intact.
        assert!(!guard_nonroot(&t, &c, p(1)));
        // Raise 1's height so the guard fires; both 0 and 2 are minimal.
        let mut c2 = c.clone();
        c2[p(1)] = st(Some(0), 3);
        let a = apply_action(&t, &c2, p(1)).unwrap();
        assert_eq!(a.new_state, st(Some(2), 1));
    }

    #[test]
    fn action_errors() {
        let t = path3();
        let c = legitimate_configuration(&t);
        assert_eq!(apply_action(&t, &c, p(1)), Err(ProtocolError::NotEnabled(p(1))));
        let t = triangle(&[2]);
        assert_eq!(apply_action(&t, &c, p(2)), Err(ProtocolError::Byzantine(p(2))));
    }

    #[test]
    fn step_uses_snapshot() {
        // 1 and 2 both point at each other with garbage heights.
        let t = path3();
        let c = Configuration::new(vec![st(None, 0), st(Some(2), 5), st(Some(1), 3)]);
        let both = BTreeSet::from([p(1), p(2)]);
        let (sim, actions) = step(&t, &c, &both, &BTreeMap::new()).unwrap();
        assert_eq!(actions.len(), 2);
        // 2 reads 1's old height 5.
        assert_eq!(sim[p(1)], st(Some(0), 1));
        assert_eq!(sim[p(2)], st(Some(1), 6));

        // Sequential execution yields a different configuration.
        let (mid, _) = step(&t, &c, &BTreeSet::from([p(1)]), &BTreeMap::new()).unwrap();
        let (seq, _) = step(&t, &mid, &BTreeSet::from([p(2)]), &BTreeMap::new()).unwrap();
        assert_eq!(seq[p(2)], st(Some(1), 2));
        assert_ne!(sim, seq);
    }

    #[test]
    fn step_single_root_and_byzantine() {
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[3]).unwrap();
        let mut c = legitimate_configuration(&t);
        c[p(0)] = st(None, 7);
        let (next, _) = step(&t, &c, &BTreeSet::from([p(0)]), &BTreeMap::new()).unwrap();
        assert_eq!(next[p(0)], ProcessState::ROOT);
        assert_eq!(&next.states[1..], &c.states[1..]);

        let (next, actions) = step(
            &t,
            &c,
            &BTreeSet::from([p(3)]),
            &BTreeMap::from([(p(3), st(None, 0))]),
        )
        .unwrap();
        assert_eq!(actions[0].rule, Rule::ByzantineWrite);
        assert_eq!(next[p(3)], st(None, 0));
        assert_eq!(&next.states[..3], &c.states[..3]);
    }

    #[test]
    fn step_errors() {
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[3]).unwrap();
        let c = legitimate_configuration(&t);
        assert_eq!(
            step(&t, &c, &BTreeSet::new(), &BTreeMap::new()),
            Err(ProtocolError::EmptyActivation)
        );
        assert_eq!(
            step(&t, &c, &BTreeSet::from([p(1)]), &BTreeMap::new()),
            Err(ProtocolError::NotEnabled(p(1)))
        );
        assert_eq!(
            step(&t, &c, &BTreeSet::from([p(1)]), &BTreeMap::from([(p(1), st(None, 0))])),
            Err(ProtocolError::WriteForCorrect(p(1)))
        );
    }

    #[test]
    fn enabled_sets() {
        let t = path3();
        assert!(enabled_set(&t, &legitimate_configuration(&t)).is_empty());
        let zero = Configuration::new(vec![st(None, 0); 3]);
        assert_eq!(enabled_set(&t, &zero).correct, vec![p(1), p(2)]);
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[3]).unwrap();
        assert_eq!(enabled_set(&t, &legitimate_configuration(&t)).byzantine, vec![p(3)]);
    }

    #[test]
    fn configuration_validation() {
        let t = path3();
        let c = Configuration::new(vec![st(None, 0), st(Some(2), 1), st(Some(0), 1)]);
        assert_eq!(
            c.validate(&t),
            Err(ProtocolError::ParentNotNeighbor { process: p(2), parent: p(0) })
        );
        let short = Configuration::new(vec![st(None, 0)]);
        assert!(matches!(short.validate(&t), Err(ProtocolError::LengthMismatch { .. })));
    }
}
