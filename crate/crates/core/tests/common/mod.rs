//! Independent oracles shared by the integration tests. Nothing here calls
//! into the checker or the BFS of the library.
#![allow(dead_code)]

use calfs::topology::{GraphSpec, ProcessId, Topology};
use calfs::{Configuration, ProcessState};

/// All-pairs hop distances; `None` when unreachable.
pub fn floyd_warshall(topo: &Topology) -> Vec<Vec<Option<u32>>> {
    let n = topo.n();
    let mut d = vec![vec![None; n]; n];
    for (u, row) in d.iter_mut().enumerate() {
        row[u] = Some(0);
    }
    for (u, v) in topo.edges() {
        d[u][v] = Some(1);
        d[v][u] = Some(1);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].is_none_or(|c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

pub struct OracleZones {
    pub dist_root: Vec<u32>,
    pub dist_byz: Vec<Option<u32>>,
    pub in_sb: Vec<bool>,
    pub in_sb_star: Vec<bool>,
}

pub fn oracle_zones(topo: &Topology) -> OracleZones {
    let d = floyd_warshall(topo);
    let r = topo.root().0;
    let dist_root: Vec<u32> = (0..topo.n()).map(|v| d[r][v].unwrap()).collect();
    let dist_byz: Vec<Option<u32>> = (0..topo.n())
        .map(|v| topo.byzantine().iter().map(|b| d[b.0][v].unwrap()).min())
        .collect();
    let in_sb = (0..topo.n()).map(|v| dist_byz[v].is_some_and(|b| b <= dist_root[v])).collect();
    let in_sb_star = (0..topo.n()).map(|v| dist_byz[v].is_some_and(|b| b < dist_root[v])).collect();
    OracleZones {
        dist_root,
        dist_byz,
        in_sb,
        in_sb_star,
    }
}

/// Local specification by enumerating every simple graph path
/// `(v_0, ..., v_k = v)` and testing the three correct-path conditions.
pub fn brute_force_spec(topo: &Topology, config: &Configuration, v: usize) -> bool {
    let st = |u: usize| config.states[u];
    if v == topo.root().0 {
        return st(v) == ProcessState::ROOT;
    }
    let min_around = |u: usize| topo.neighbors(ProcessId(u)).iter().map(|w| st(w.0).height).min();
    let is_correct_path = |path: &[usize]| {
        let v0 = path[0];
        let origin_ok = (v0 == topo.root().0 || topo.is_byzantine(ProcessId(v0)))
            && st(v0).parent.is_none()
            && st(v0).height == 0;
        origin_ok
            && (1..path.len()).all(|i| {
                let (prev, cur) = (path[i - 1], path[i]);
                st(cur).parent == Some(ProcessId(prev))
                    && st(cur).height == st(prev).height + 1
                    && min_around(cur) == Some(st(prev).height)
            })
    };
    // Paths are grown backwards from v.
    let mut stack: Vec<Vec<usize>> = vec![vec![v]];
    while let Some(rev) = stack.pop() {
        if rev.len() >= 2 {
            let path: Vec<usize> = rev.iter().rev().copied().collect();
            if is_correct_path(&path) {
                return true;
            }
        }
        let last = *rev.last().unwrap();
        for w in topo.neighbors(ProcessId(last)) {
            if !rev.contains(&w.0) {
                let mut next = rev.clone();
                next.push(w.0);
                stack.push(next);
            }
        }
    }
    false
}

/// Edge lists of every connected labeled graph on `n` vertices.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    let mut out = Vec::new();
    for mask in 0u32..(1 << pairs.len()) {
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, e)| *e)
            .collect();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(a, b) in &edges {
                let w = if a == u { b } else if b == u { a } else { continue };
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if seen.iter().all(|s| *s) {
            out.push(edges);
        }
    }
    out
}

/// A random connected graph spec with edge probability that keeps the
/// rejection sampler fast.
pub fn random_spec(n: usize) -> GraphSpec {
    let nf = n as f64;
    let p = if n <= 2 { 1.0 } else { (2.0 * nf.ln() / nf).clamp(0.15, 1.0) };
    GraphSpec::RandomConnected { n, p }
}
