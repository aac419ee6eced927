//! Static communication graph, hop distances and Byzantine containment zones.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a process. Ids are dense: `0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub usize);

impl ProcessId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<usize> for ProcessId {
    fn from(v: usize) -> Self {
        ProcessId(v)
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("graph has no processes")]
    Empty,
    #[error("process id {id} out of range for n = {n}")]
    InvalidId { id: usize, n: usize },
    #[error("self-loop on process {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected")]
    Disconnected,
    #[error("root {0} cannot be Byzantine")]
    RootByzantine(usize),
    #[error("no sources")]
    NoSources,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsatisfiable generator parameters: {0}")]
    Unsatisfiable(String),
}

/// Undirected connected graph with a designated root and a Byzantine set.
///
/// Neighbor lists are sorted by id. That order, read cyclically, is the
/// circular order used for parent tie-breaking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    adjacency: Vec<Vec<ProcessId>>,
    root: ProcessId,
    byzantine: BTreeSet<ProcessId>,
    is_byzantine: Vec<bool>,
}

impl Topology {
    pub fn new(
        n: usize,
        edges: &[(usize, usize)],
        root: usize,
        byzantine: &[usize],
    ) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        let check = |id: usize| {
            if id < n {
                Ok(())
            } else {
                Err(TopologyError::InvalidId { id, n })
            }
        };
        check(root)?;
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(u, v) in edges {
            check(u)?;
            check(v)?;
            if u == v {
                return Err(TopologyError::SelfLoop(u));
            }
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                return Err(TopologyError::DuplicateEdge(key.0, key.1));
            }
            adjacency[u].push(ProcessId(v));
            adjacency[v].push(ProcessId(u));
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let mut topo = Topology {
            adjacency,
            root: ProcessId(root),
            byzantine: BTreeSet::new(),
            is_byzantine: vec![false; n],
        };
        if !topo.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        topo.set_byzantine(byzantine.iter().copied().map(ProcessId))?;
        Ok(topo)
    }

    /// Same graph and root with a different Byzantine set.
    pub fn with_byzantine<I>(&self, byzantine: I) -> Result<Self, TopologyError>
    where
        I: IntoIterator<Item = ProcessId>,
    {
        let mut topo = self.clone();
        topo.set_byzantine(byzantine)?;
        Ok(topo)
    }

    /// Same graph and Byzantine set with a different root.
    pub fn with_root(&self, root: ProcessId) -> Result<Self, TopologyError> {
        if root.0 >= self.n() {
            return Err(TopologyError::InvalidId { id: root.0, n: self.n() });
        }
        if self.is_byzantine[root.0] {
            return Err(TopologyError::RootByzantine(root.0));
        }
        let mut topo = self.clone();
        topo.root = root;
        Ok(topo)
    }

    fn set_byzantine<I>(&mut self, byzantine: I) -> Result<(), TopologyError>
    where
        I: IntoIterator<Item = ProcessId>,
    {
        let n = self.n();
        let mut set = BTreeSet::new();
        for b in byzantine {
            if b.0 >= n {
                return Err(TopologyError::InvalidId { id: b.0, n });
            }
            if b == self.root {
                return Err(TopologyError::RootByzantine(b.0));
            }
            set.insert(b);
        }
        self.is_byzantine = vec![false; n];
        for b in &set {
            self.is_byzantine[b.0] = true;
        }
        self.byzantine = set;
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for v in &self.adjacency[u] {
                if !seen[v.0] {
                    seen[v.0] = true;
                    count += 1;
                    queue.push_back(v.0);
                }
            }
        }
        count == self.n()
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    #[inline]
    pub fn root(&self) -> ProcessId {
        self.root
    }

    #[inline]
    pub fn neighbors(&self, v: ProcessId) -> &[ProcessId] {
        &self.adjacency[v.0]
    }

    #[inline]
    pub fn is_byzantine(&self, v: ProcessId) -> bool {
        self.is_byzantine[v.0]
    }

    #[inline]
    pub fn is_neighbor(&self, v: ProcessId, u: ProcessId) -> bool {
        self.adjacency[v.0].binary_search(&u).is_ok()
    }

    pub fn byzantine(&self) -> &BTreeSet<ProcessId> {
        &self.byzantine
    }

    pub fn processes(&self) -> impl Iterator<Item = ProcessId> {
        (0..self.n()).map(ProcessId)
    }

    pub fn correct_processes(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.processes().filter(move |v| !self.is_byzantine(*v))
    }

    /// Maximum degree.
    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (u, list) in self.adjacency.iter().enumerate() {
            for v in list {
                if u < v.0 {
                    out.push((u, v.0));
                }
            }
        }
        out
    }

    /// Parses the edge-list text format: a header `n root byz1,byz2,...`
    /// (the Byzantine field may be empty or absent) followed by one `u v`
    /// pair per line. Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            msg: "missing header `n root byzantine`".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(TopologyError::Parse {
                line: hline,
                msg: format!("header needs 2 or 3 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, line: usize, what: &str| {
            s.parse::<usize>().map_err(|_| TopologyError::Parse {
                line,
                msg: format!("invalid {what} `{s}`"),
            })
        };
        let n = num(fields[0], hline, "process count")?;
        let root = num(fields[1], hline, "root id")?;
        let mut byz = Vec::new();
        if let Some(list) = fields.get(2) {
            for item in list.split(',').filter(|s| !s.is_empty()) {
                byz.push(num(item, hline, "byzantine id")?);
            }
        }
        let mut edges = Vec::new();
        for (line, l) in lines {
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(TopologyError::Parse {
                    line,
                    msg: format!("expected `u v`, found `{l}`"),
                });
            }
            let u = num(parts[0], line, "endpoint")?;
            let v = num(parts[1], line, "endpoint")?;
            for id in [u, v] {
                if id >= n {
                    return Err(TopologyError::Parse {
                        line,
                        msg: format!("process id {id} out of range for n = {n}"),
                    });
                }
            }
            edges.push((u, v));
        }
        Topology::new(n, &edges, root, &byz)
    }

    pub fn to_edge_list(&self) -> String {
        let byz: Vec<String> = self.byzantine.iter().map(|b| b.0.to_string()).collect();
        let mut out = format!("{} {} {}\n", self.n(), self.root.0, byz.join(","));
        for (u, v) in self.edges() {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }
}

/// Multi-source BFS: hop distance from every process to the nearest source.
pub fn bfs_distances(topo: &Topology, sources: &[ProcessId]) -> Result<Vec<u32>, TopologyError> {
    if sources.is_empty() {
        return Err(TopologyError::NoSources);
    }
    let n = topo.n();
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::new();
    for &s in sources {
        if s.0 >= n {
            return Err(TopologyError::InvalidId { id: s.0, n });
        }
        if dist[s.0] != 0 {
            dist[s.0] = 0;
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let next = dist[u.0] + 1;
        for &v in topo.neighbors(u) {
            if dist[v.0] == u32::MAX {
                dist[v.0] = next;
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Which containment zone a check exempts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Zone {
    /// Processes at least as close to a Byzantine as to the root.
    #[serde(rename = "SB")]
    Sb,
    /// Processes strictly closer to a Byzantine than to the root.
    #[serde(rename = "SBstar")]
    SbStar,
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Zone::Sb => "SB",
            Zone::SbStar => "SBstar",
        })
    }
}

impl std::str::FromStr for Zone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SB" | "sb" => Ok(Zone::Sb),
            "SBstar" | "sbstar" | "SB*" => Ok(Zone::SbStar),
            other => Err(format!("unknown zone `{other}` (expected SB or SBstar)")),
        }
    }
}

/// Per-process zone membership together with the distances it was derived from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneReport {
    pub dist_root: Vec<u32>,
    /// `None` when there is no Byzantine process (distance +inf).
    pub dist_byz: Vec<Option<u32>>,
    pub in_sb: Vec<bool>,
    pub in_sb_star: Vec<bool>,
}

impl ZoneReport {
    /// True when `v` belongs to `zone`, i.e. is exempt from containment checks.
    #[inline]
    pub fn contains(&self, zone: Zone, v: ProcessId) -> bool {
        match zone {
            Zone::Sb => self.in_sb[v.0],
            Zone::SbStar => self.in_sb_star[v.0],
        }
    }

    pub fn members(&self, zone: Zone) -> Vec<ProcessId> {
        (0..self.in_sb.len())
            .map(ProcessId)
            .filter(|v| self.contains(zone, *v))
            .collect()
    }
}

pub fn compute_zones(topo: &Topology) -> ZoneReport {
    let dist_root = bfs_distances(topo, &[topo.root()]).expect("root is a valid source");
    let byz: Vec<ProcessId> = topo.byzantine().iter().copied().collect();
    let dist_byz: Vec<Option<u32>> = if byz.is_empty() {
        vec![None; topo.n()]
    } else {
        bfs_distances(topo, &byz)
            .expect("byzantine ids are validated")
            .into_iter()
            .map(Some)
            .collect()
    };
    let in_sb = dist_byz
        .iter()
        .zip(&dist_root)
        .map(|(b, r)| b.is_some_and(|b| b <= *r))
        .collect();
    let in_sb_star = dist_byz
        .iter()
        .zip(&dist_root)
        .map(|(b, r)| b.is_some_and(|b| b < *r))
        .collect();
    ZoneReport {
        dist_root,
        dist_byz,
        in_sb,
        in_sb_star,
    }
}

/// Graph families produced by [`generate_graph`]. Root is 0, no Byzantines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphSpec {
    Path { n: usize },
    Ring { n: usize },
    Grid { rows: usize, cols: usize },
    Star { n: usize },
    Complete { n: usize },
    RandomConnected { n: usize, p: f64 },
}

const MAX_RANDOM_ATTEMPTS: usize = 10_000;

pub fn generate_graph(spec: &GraphSpec, seed: u64) -> Result<Topology, TopologyError> {
    let unsat = |m: &str| Err(TopologyError::Unsatisfiable(m.to_string()));
    let (n, edges) = match *spec {
        GraphSpec::Path { n } => {
            if n == 0 {
                return unsat("path needs n >= 1");
            }
            (n, (1..n).map(|i| (i - 1, i)).collect::<Vec<_>>())
        }
        GraphSpec::Ring { n } => {
            if n < 3 {
                return unsat("ring needs n >= 3");
            }
            (n, (0..n).map(|i| (i, (i + 1) % n)).collect())
        }
        GraphSpec::Grid { rows, cols } => {
            if rows == 0 || cols == 0 {
                return unsat("grid dimensions must be >= 1");
            }
            let mut e = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    let id = r * cols + c;
                    if c + 1 < cols {
                        e.push((id, id + 1));
                    }
                    if r + 1 < rows {
                        e.push((id, id + cols));
                    }
                }
            }
            (rows * cols, e)
        }
        GraphSpec::Star { n } => {
            if n == 0 {
                return unsat("star needs n >= 1");
            }
            (n, (1..n).map(|i| (0, i)).collect())
        }
        GraphSpec::Complete { n } => {
            if n == 0 {
                return unsat("complete graph needs n >= 1");
            }
            let mut e = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    e.push((u, v));
                }
            }
            (n, e)
        }
        GraphSpec::RandomConnected { n, p } => {
            if n == 0 {
                return unsat("random graph needs n >= 1");
            }
            if !(0.0..=1.0).contains(&p) || (n > 1 && p == 0.0) {
                return unsat("edge probability must be in (0, 1]");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..MAX_RANDOM_ATTEMPTS {
                let mut e = Vec::new();
                for u in 0..n {
                    for v in u + 1..n {
                        if rng.gen_bool(p) {
                            e.push((u, v));
                        }
                    }
                }
                match Topology::new(n, &e, 0, &[]) {
                    Ok(t) => return Ok(t),
                    Err(TopologyError::Disconnected) => continue,
                    Err(other) => return Err(other),
                }
            }
            return unsat("no connected sample within the attempt budget");
        }
    };
    Topology::new(n, &edges, 0, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[usize]) -> Vec<ProcessId> {
        v.iter().copied().map(ProcessId).collect()
    }

    #[test]
    fn bfs_on_path() {
        let t = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        assert_eq!(bfs_distances(&t, &ids(&[0])).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn bfs_all_sources_is_zero() {
        let t = generate_graph(&GraphSpec::Grid { rows: 3, cols: 3 }, 0).unwrap();
        let all: Vec<_> = t.processes().collect();
        assert!(bfs_distances(&t, &all).unwrap().iter().all(|d| *d == 0));
    }

    #[test]
    fn bfs_on_four_cycle() {
        let t = generate_graph(&GraphSpec::Ring { n: 4 }, 0).unwrap();
        assert_eq!(bfs_distances(&t, &ids(&[0])).unwrap(), vec![0, 1, 2, 1]);
    }

    #[test]
    fn bfs_errors() {
        let t = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        assert_eq!(bfs_distances(&t, &[]), Err(TopologyError::NoSources));
        assert!(matches!(
            bfs_distances(&t, &ids(&[7])),
            Err(TopologyError::InvalidId { id: 7, n: 3 })
        ));
    }

    #[test]
    fn zones_on_short_path() {
        // r=0 - 1 - 2 - 3=byz
        let t = Topology::new(4, &[(0, 1), (1, 2), (2, 3)], 0, &[3]).unwrap();
        let z = compute_zones(&t);
        assert_eq!(z.members(Zone::Sb), ids(&[2, 3]));
        assert_eq!(z.members(Zone::SbStar), ids(&[2, 3]));
        assert!(!z.in_sb[1]);
    }

    #[test]
    fn zones_equal_distance_midpoint() {
        let t = Topology::new(5, &[(0, 1), (1, 2), (2, 3), (3, 4)], 0, &[4]).unwrap();
        let z = compute_zones(&t);
        assert_eq!((z.dist_root[2], z.dist_byz[2]), (2, Some(2)));
        assert!(z.in_sb[2]);
        assert!(!z.in_sb_star[2]);
    }

    #[test]
    fn zones_empty_without_byzantines() {
        let t = generate_graph(&GraphSpec::Ring { n: 6 }, 0).unwrap();
        let z = compute_zones(&t);
        assert!(z.members(Zone::Sb).is_empty());
        assert!(z.members(Zone::SbStar).is_empty());
        assert!(z.dist_byz.iter().all(Option::is_none));
    }

    #[test]
    fn generators() {
        let p = generate_graph(&GraphSpec::Path { n: 3 }, 0).unwrap();
        assert_eq!(p.edges(), vec![(0, 1), (1, 2)]);
        let r = generate_graph(&GraphSpec::Ring { n: 4 }, 0).unwrap();
        assert_eq!(r.edges().len(), 4);
        assert!(r.processes().all(|v| r.neighbors(v).len() == 2));
        let a = generate_graph(&GraphSpec::RandomConnected { n: 20, p: 0.2 }, 7).unwrap();
        let b = generate_graph(&GraphSpec::RandomConnected { n: 20, p: 0.2 }, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n(), 20);
        assert!(matches!(
            generate_graph(&GraphSpec::Grid { rows: 0, cols: 3 }, 0),
            Err(TopologyError::Unsatisfiable(_))
        ));
        assert!(generate_graph(&GraphSpec::RandomConnected { n: 5, p: 0.0 }, 0).is_err());
    }

    #[test]
    fn constructor_rejects_bad_graphs() {
        assert_eq!(
            Topology::new(3, &[(0, 1)], 0, &[]),
            Err(TopologyError::Disconnected)
        );
        assert_eq!(Topology::new(2, &[(0, 0)], 0, &[]), Err(TopologyError::SelfLoop(0)));
        assert_eq!(
            Topology::new(2, &[(0, 1), (1, 0)], 0, &[]),
            Err(TopologyError::DuplicateEdge(0, 1))
        );
        assert_eq!(
            Topology::new(2, &[(0, 1)], 0, &[0]),
            Err(TopologyError::RootByzantine(0))
        );
    }

    #[test]
    fn edge_list_parsing() {
        let t = Topology::parse_edge_list("4 0 3\n0 1\n1 2\n2 3\n").unwrap();
        assert_eq!(t.byzantine().iter().copied().collect::<Vec<_>>(), ids(&[3]));
        let empty_field = Topology::parse_edge_list("3 1 \n0 1\n1 2\n").unwrap();
        assert!(empty_field.byzantine().is_empty());
        assert_eq!(empty_field.root(), ProcessId(1));
        assert_eq!(Topology::parse_edge_list(&t.to_edge_list()).unwrap(), t);

        let err = Topology::parse_edge_list("3 0\n0 1\n1 x\n").unwrap_err();
        assert_eq!(
            err,
            TopologyError::Parse {
                line: 3,
                msg: "invalid endpoint `x`".into()
            }
        );
        assert_eq!(
            Topology::parse_edge_list("4 0\n0 1\n2 3\n"),
            Err(TopologyError::Disconnected)
        );
    }
}
