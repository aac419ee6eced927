//! Explicit-state check of strict containment on small graphs.
//!
//! For one instance (graph, root, at most one Byzantine) every configuration
//! with heights `0..=n` is an initial state. From each state the daemon may
//! activate any nonempty subset of the enabled correct processes and the
//! Byzantine process, which may publish any state from a finite domain
//! (parent NIL or its first neighbor, height `0..=n`).
//!
//! The check establishes that every strongly fair execution eventually reaches
//! the set `C` of configurations from which *every* reachable configuration is
//! SB-legitimate and SB-stable. `C` is computed in one Tarjan pass: a
//! component is outside `C` iff it holds a non-contained state or has an edge
//! into a component outside `C`. Components outside `C` are then searched for
//! a fair cycle by iterated pruning (a component is fair when every correct
//! process enabled somewhere in it also moves on one of its internal edges).
//!
//! The Byzantine can switch between any two of its states in one step, so all
//! states sharing the correct processes' part belong to the same component.
//! Nodes are therefore "clusters": the correct part of a configuration paired
//! with a bitmask of admissible Byzantine states.

use std::collections::BTreeSet;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::checker;
use crate::protocol::{self, Configuration, ProcessState};
use crate::topology::{compute_zones, generate_graph, GraphSpec, ProcessId, Topology, Zone, ZoneReport};

const BITS: u32 = 8;
const SLOT_BITS: u32 = 3;
const MAX_HEIGHT: u32 = (1 << (BITS - SLOT_BITS)) - 1;
const MAX_N: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Path,
    Ring,
    Star,
    Complete,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Path, Family::Ring, Family::Star, Family::Complete];

    fn min_n(self) -> usize {
        match self {
            Family::Path | Family::Complete => 2,
            Family::Ring | Family::Star => 3,
        }
    }

    fn spec(self, n: usize) -> GraphSpec {
        match self {
            Family::Path => GraphSpec::Path { n },
            Family::Ring => GraphSpec::Ring { n },
            Family::Star => GraphSpec::Star { n },
            Family::Complete => GraphSpec::Complete { n },
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "path" => Ok(Family::Path),
            "ring" => Ok(Family::Ring),
            "star" => Ok(Family::Star),
            "complete" => Ok(Family::Complete),
            other => Err(format!("unknown family `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Verified {
        /// Clusters inside the closed contained set.
        contained_clusters: usize,
    },
    /// A fair execution that never reaches containment.
    Violation {
        kind: ViolationKind,
        witness: Vec<ProcessState>,
    },
    BudgetExhausted {
        clusters: usize,
        reason: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Nothing is enabled but the configuration is not contained.
    Deadlock,
    /// A strongly fair cycle avoiding the contained set.
    FairCycle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub family: Family,
    pub n: usize,
    pub root: usize,
    pub byzantine: Vec<usize>,
    pub clusters: usize,
    pub states: usize,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustiveReport {
    pub instances: Vec<InstanceReport>,
    pub verified: usize,
    pub violations: usize,
    pub budget_exhausted: usize,
}

impl ExhaustiveReport {
    pub fn all_verified(&self) -> bool {
        self.violations == 0 && self.budget_exhausted == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustiveOptions {
    pub n_max: usize,
    pub families: Vec<Family>,
    /// Upper bound on clusters explored per instance.
    pub max_clusters: usize,
}

impl Default for ExhaustiveOptions {
    fn default() -> Self {
        ExhaustiveOptions {
            n_max: 5,
            families: Family::ALL.to_vec(),
            max_clusters: 40_000_000,
        }
    }
}

/// All instances: each family and size, with `B = ∅` and every single
/// non-root Byzantine placement. Root is process 0.
pub fn instances(options: &ExhaustiveOptions) -> Vec<(Family, Topology)> {
    let mut out = Vec::new();
    for &family in &options.families {
        for n in family.min_n()..=options.n_max {
            let base = generate_graph(&family.spec(n), 0).expect("family parameters are valid");
            out.push((family, base.clone()));
            for b in 1..n {
                out.push((family, base.with_byzantine([ProcessId(b)]).unwrap()));
            }
        }
    }
    out
}

pub fn exhaustive_check(options: &ExhaustiveOptions) -> ExhaustiveReport {
    let reports: Vec<InstanceReport> = instances(options)
        .into_iter()
        .map(|(family, topo)| check_instance(family, &topo, options.max_clusters))
        .collect();
    let count = |f: fn(&Outcome) -> bool| reports.iter().filter(|r| f(&r.outcome)).count();
    ExhaustiveReport {
        verified: count(|o| matches!(o, Outcome::Verified { .. })),
        violations: count(|o| matches!(o, Outcome::Violation { .. })),
        budget_exhausted: count(|o| matches!(o, Outcome::BudgetExhausted { .. })),
        instances: reports,
    }
}

#[derive(Debug)]
struct Overflow;

/// Packs one configuration into a `u64`, one byte per process:
/// low bits hold the parent slot (0 = NIL, `i + 1` = i-th neighbor),
/// high bits the height.
struct Codec<'a> {
    topo: &'a Topology,
    zones: ZoneReport,
    zone: Zone,
    byz: Option<ProcessId>,
    byz_domain: Vec<ProcessState>,
}

impl<'a> Codec<'a> {
    fn new(topo: &'a Topology, zone: Zone) -> Self {
        assert!(topo.n() <= MAX_N, "exhaustive check supports n <= {MAX_N}");
        assert!(topo.max_degree() < (1 << SLOT_BITS), "degree too large for encoding");
        assert!(topo.byzantine().len() <= 1, "at most one Byzantine process");
        let byz = topo.byzantine().iter().next().copied();
        let hmax = topo.n() as u32;
        let byz_domain = match byz {
            None => vec![ProcessState::ROOT],
            Some(b) => {
                let first = topo.neighbors(b)[0];
                (0..=hmax)
                    .map(|h| ProcessState { parent: None, height: h })
                    .chain((0..=hmax).map(|h| ProcessState {
                        parent: Some(first),
                        height: h,
                    }))
                    .collect()
            }
        };
        Codec {
            topo,
            zones: compute_zones(topo),
            zone,
            byz,
            byz_domain,
        }
    }

    fn full_mask(&self) -> u32 {
        ((1u64 << self.byz_domain.len()) - 1) as u32
    }

    fn encode_process(&self, v: ProcessId, s: ProcessState) -> Result<u64, Overflow> {
        if s.height > MAX_HEIGHT {
            return Err(Overflow);
        }
        let slot = match s.parent {
            None => 0,
            Some(p) => self.topo.neighbors(v).binary_search(&p).map_err(|_| Overflow)? as u64 + 1,
        };
        Ok(slot | ((s.height as u64) << SLOT_BITS))
    }

    fn decode_into(&self, code: u64, cfg: &mut Configuration) {
        for v in self.topo.correct_processes() {
            let byte = (code >> (BITS * v.0 as u32)) & 0xff;
            let slot = (byte & ((1 << SLOT_BITS) - 1)) as usize;
            cfg[v] = ProcessState {
                parent: if slot == 0 { None } else { Some(self.topo.neighbors(v)[slot - 1]) },
                height: (byte >> SLOT_BITS) as u32,
            };
        }
    }

    fn decode(&self, code: u64, beta: usize) -> Configuration {
        let mut cfg = Configuration::new(vec![ProcessState::ROOT; self.topo.n()]);
        self.decode_into(code, &mut cfg);
        if let Some(b) = self.byz {
            cfg[b] = self.byz_domain[beta];
        }
        cfg
    }

    /// Initial cluster codes: every correct process takes every parent slot
    /// and every height in `0..=n`.
    fn initial_codes(&self) -> Vec<u64> {
        let hmax = self.topo.n() as u64;
        let mut codes = vec![0u64];
        for v in self.topo.correct_processes() {
            let slots = self.topo.neighbors(v).len() as u64 + 1;
            let shift = BITS * v.0 as u32;
            let mut next = Vec::with_capacity(codes.len() * (slots * (hmax + 1)) as usize);
            for &c in &codes {
                for h in 0..=hmax {
                    for s in 0..slots {
                        next.push(c | ((s | (h << SLOT_BITS)) << shift));
                    }
                }
            }
            codes = next;
        }
        codes
    }

    /// Expands cluster `code` restricted to Byzantine states in `mask`.
    /// Pushes `(moved correct processes, target)` edges and the enabled
    /// correct processes for each beta. Returns whether some admissible
    /// state is not SB-contained.
    fn expand(
        &self,
        code: u64,
        mask: u32,
        cfg: &mut Configuration,
        edges: &mut Vec<Edge>,
        enabled_by_beta: &mut Vec<(usize, u8)>,
    ) -> Result<bool, Overflow> {
        self.decode_into(code, cfg);
        let mut any_bad = false;
        let mut moves: Vec<(u8, u64, u64)> = Vec::with_capacity(MAX_N);
        for beta in 0..self.byz_domain.len() {
            if mask & (1 << beta) == 0 {
                continue;
            }
            if let Some(b) = self.byz {
                cfg[b] = self.byz_domain[beta];
            }
            if !checker::is_zone_contained(self.topo, &self.zones, cfg, self.zone) {
                any_bad = true;
            }
            moves.clear();
            let mut enabled_bits = 0u8;
            for v in self.topo.correct_processes() {
                if protocol::is_enabled(self.topo, cfg, v) {
                    let next = protocol::next_state(self.topo, cfg, v);
                    let shift = BITS * v.0 as u32;
                    moves.push((v.0 as u8, 0xffu64 << shift, self.encode_process(v, next)? << shift));
                    enabled_bits |= 1 << v.0;
                }
            }
            enabled_by_beta.push((beta, enabled_bits));
            let k = moves.len();
            for subset in 1u32..(1 << k) {
                let mut target = code;
                let mut label = 0u8;
                for (i, &(v, clear, set)) in moves.iter().enumerate() {
                    if subset & (1 << i) != 0 {
                        target = (target & !clear) | set;
                        label |= 1 << v;
                    }
                }
                edges.push(Edge {
                    label,
                    target,
                });
            }
        }
        Ok(any_bad)
    }
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    label: u8,
    target: u64,
}

struct Frame {
    node: u32,
    start: usize,
    pos: usize,
    end: usize,
}

/// Checks containment in `S_B`.
pub fn check_instance(family: Family, topo: &Topology, max_clusters: usize) -> InstanceReport {
    check_instance_in_zone(family, topo, Zone::Sb, max_clusters)
}

pub fn check_instance_in_zone(family: Family, topo: &Topology, zone: Zone, max_clusters: usize) -> InstanceReport {
    let codec = Codec::new(topo, zone);
    let byz_count = codec.byz_domain.len();
    let full = codec.full_mask();
    let mut report = InstanceReport {
        family,
        n: topo.n(),
        root: topo.root().0,
        byzantine: topo.byzantine().iter().map(|b| b.0).collect(),
        clusters: 0,
        states: 0,
        outcome: Outcome::Verified { contained_clusters: 0 },
    };
    let exhausted = |clusters: usize, reason: &str| Outcome::BudgetExhausted {
        clusters,
        reason: reason.to_string(),
    };

    let mut index: FxHashMap<u64, u32> = FxHashMap::default();
    let mut codes: Vec<u64> = Vec::new();
    let mut low: Vec<u32> = Vec::new();
    let mut on_stack: Vec<bool> = Vec::new();
    // Own non-containment or an edge into a finished component outside C.
    let mut reach_bad: Vec<bool> = Vec::new();
    let mut finished_bad: Vec<bool> = Vec::new();
    let mut has_succ: Vec<bool> = Vec::new();
    let mut scc_stack: Vec<u32> = Vec::new();
    let mut frames: Vec<Frame> = Vec::new();
    let mut arena: Vec<u64> = Vec::new();
    let mut cfg = Configuration::new(vec![ProcessState::ROOT; topo.n()]);
    let mut edges = Vec::new();
    let mut enabled = Vec::new();
    let mut contained_clusters = 0usize;

    for start in codec.initial_codes() {
        if index.contains_key(&start) {
            continue;
        }
        // Discover `start`.
        macro_rules! discover {
            ($code:expr) => {{
                let code = $code;
                if codes.len() >= max_clusters {
                    report.clusters = codes.len();
                    report.states = codes.len() * byz_count;
                    report.outcome = exhausted(codes.len(), "cluster budget");
                    return report;
                }
                let id = codes.len() as u32;
                index.insert(code, id);
                codes.push(code);
                low.push(id);
                on_stack.push(true);
                scc_stack.push(id);
                edges.clear();
                enabled.clear();
                let bad = match codec.expand(code, full, &mut cfg, &mut edges, &mut enabled) {
                    Ok(b) => b,
                    Err(Overflow) => {
                        report.clusters = codes.len();
                        report.states = codes.len() * byz_count;
                        report.outcome = exhausted(codes.len(), "height exceeds encoding range");
                        return report;
                    }
                };
                reach_bad.push(bad);
                finished_bad.push(false);
                let begin = arena.len();
                arena.extend(edges.iter().map(|e| e.target));
                arena[begin..].sort_unstable();
                let mut w = begin;
                for r in begin..arena.len() {
                    if r == begin || arena[r] != arena[w - 1] {
                        arena[w] = arena[r];
                        w += 1;
                    }
                }
                arena.truncate(w);
                has_succ.push(w > begin);
                frames.push(Frame {
                    node: id,
                    start: begin,
                    pos: begin,
                    end: w,
                });
            }};
        }
        discover!(start);

        while let Some(frame) = frames.last_mut() {
            let v = frame.node as usize;
            if frame.pos < frame.end {
                let t = arena[frame.pos];
                frame.pos += 1;
                match index.get(&t) {
                    None => discover!(t),
                    Some(&w) => {
                        let w = w as usize;
                        if on_stack[w] {
                            low[v] = low[v].min(w as u32);
                        } else if finished_bad[w] {
                            reach_bad[v] = true;
                        }
                    }
                }
                continue;
            }
            let frame = frames.pop().unwrap();
            arena.truncate(frame.start);
            if low[v] == v as u32 {
                let mut members = Vec::new();
                loop {
                    let w = scc_stack.pop().unwrap();
                    on_stack[w as usize] = false;
                    members.push(w);
                    if w as usize == v {
                        break;
                    }
                }
                let bad = members.iter().any(|&w| reach_bad[w as usize]);
                for &w in &members {
                    finished_bad[w as usize] = bad;
                }
                if !bad {
                    contained_clusters += members.len();
                } else {
                    let member_codes: Vec<u64> = members.iter().map(|&w| codes[w as usize]).collect();
                    let verdict = if codec.byz.is_none() && members.len() == 1 {
                        if has_succ[v] {
                            None
                        } else {
                            Some((ViolationKind::Deadlock, codec.decode(member_codes[0], 0)))
                        }
                    } else {
                        match find_fair_cycle(&codec, &member_codes) {
                            Ok(found) => found.map(|(code, beta)| (ViolationKind::FairCycle, codec.decode(code, beta))),
                            Err(Overflow) => {
                                report.clusters = codes.len();
                                report.states = codes.len() * byz_count;
                                report.outcome = exhausted(codes.len(), "height exceeds encoding range");
                                return report;
                            }
                        }
                    };
                    if let Some((kind, witness)) = verdict {
                        report.clusters = codes.len();
                        report.states = codes.len() * byz_count;
                        report.outcome = Outcome::Violation {
                            kind,
                            witness: witness.states,
                        };
                        return report;
                    }
                }
            }
            if let Some(parent) = frames.last() {
                let p = parent.node as usize;
                low[p] = low[p].min(low[v]);
                if !on_stack[v] && finished_bad[v] {
                    reach_bad[p] = true;
                }
            }
        }
    }
    report.clusters = codes.len();
    report.states = codes.len() * byz_count;
    report.outcome = Outcome::Verified { contained_clusters };
    report
}

/// Iterated pruning for strong fairness inside one component outside `C`.
/// Returns a state of a fair component if one exists.
fn find_fair_cycle(codec: &Codec<'_>, members: &[u64]) -> Result<Option<(u64, usize)>, Overflow> {
    let full = codec.full_mask();
    let mut worklist: Vec<Vec<(u64, u32)>> = vec![members.iter().map(|&c| (c, full)).collect()];
    let mut cfg = Configuration::new(vec![ProcessState::ROOT; codec.topo.n()]);
    let with_byz = codec.byz.is_some();

    while let Some(set) = worklist.pop() {
        let pos: FxHashMap<u64, usize> = set.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();
        // Expand each cluster within its mask.
        let mut succ: Vec<Vec<(usize, u8)>> = Vec::with_capacity(set.len());
        let mut enabled: Vec<Vec<(usize, u8)>> = Vec::with_capacity(set.len());
        let mut edges = Vec::new();
        for &(code, mask) in &set {
            edges.clear();
            let mut en = Vec::new();
            codec.expand(code, mask, &mut cfg, &mut edges, &mut en)?;
            let mut out: Vec<(usize, u8)> = edges
                .iter()
                .filter_map(|e| pos.get(&e.target).map(|&j| (j, e.label)))
                .collect();
            out.sort_unstable();
            out.dedup();
            succ.push(out);
            enabled.push(en);
        }
        for comp in components(&succ) {
            if !with_byz && comp.len() == 1 {
                // No self-loops without a Byzantine: every action changes state.
                continue;
            }
            let in_comp: BTreeSet<usize> = comp.iter().copied().collect();
            let mut enabled_somewhere = 0u8;
            let mut moved = 0u8;
            for &i in &comp {
                for &(_, bits) in &enabled[i] {
                    enabled_somewhere |= bits;
                }
                for &(j, label) in &succ[i] {
                    if in_comp.contains(&j) {
                        moved |= label;
                    }
                }
            }
            let missing = enabled_somewhere & !moved;
            if missing == 0 {
                let i = comp[0];
                let beta = (0..32).find(|b| set[i].1 & (1 << b) != 0).unwrap_or(0);
                return Ok(Some((set[i].0, beta)));
            }
            let mut pruned = Vec::new();
            for &i in &comp {
                let mut mask = set[i].1;
                for &(beta, bits) in &enabled[i] {
                    if bits & missing != 0 {
                        mask &= !(1 << beta);
                    }
                }
                if mask != 0 {
                    pruned.push((set[i].0, mask));
                }
            }
            if !pruned.is_empty() {
                worklist.push(pruned);
            }
        }
    }
    Ok(None)
}

/// Strongly connected components of a small explicit graph (iterative Tarjan).
fn components(succ: &[Vec<(usize, u8)>]) -> Vec<Vec<usize>> {
    const UNSEEN: usize = usize::MAX;
    let n = succ.len();
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut counter = 0;
    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        let mut frames = vec![(root, 0usize)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut pos)) = frames.last_mut() {
            if *pos < succ[v].len() {
                let w = succ[v][*pos].0;
                *pos += 1;
                if index[w] == UNSEEN {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            frames.pop();
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().unwrap();
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                out.push(comp);
            }
            if let Some(&(p, _)) = frames.last() {
                low[p] = low[p].min(low[v]);
            }
        }
    }
    out
}
