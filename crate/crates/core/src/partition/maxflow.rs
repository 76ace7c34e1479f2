//! Dinic max-flow on real capacities.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
struct Edge {
    to: usize,
    cap: f64,
}

/// Flow network with paired forward/reverse edges.
#[derive(Clone, Debug)]
pub struct FlowGraph {
    adj: Vec<Vec<usize>>,
    edges: Vec<Edge>,
    eps: f64,
}

impl FlowGraph {
    pub fn new(n: usize) -> Self {
        Self {
            adj: vec![Vec::new(); n],
            edges: Vec::new(),
            eps: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Directed arc `u → v` with capacity `cap` (reverse residual starts at 0).
    pub fn add_edge(&mut self, u: usize, v: usize, cap: f64) {
        self.add_edge_pair(u, v, cap, 0.0);
    }

    /// Arc `u → v` with capacity `cap` and `v → u` with `rev_cap`, sharing
    /// one residual pair.
    pub fn add_edge_pair(&mut self, u: usize, v: usize, cap: f64, rev_cap: f64) {
        self.adj[u].push(self.edges.len());
        self.edges.push(Edge { to: v, cap });
        self.adj[v].push(self.edges.len());
        self.edges.push(Edge { to: u, cap: rev_cap });
    }

    fn levels(&self, s: usize) -> Vec<i64> {
        let mut level = vec![-1i64; self.len()];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &e in &self.adj[u] {
                let ed = &self.edges[e];
                if ed.cap > self.eps && level[ed.to] < 0 {
                    level[ed.to] = level[u] + 1;
                    q.push_back(ed.to);
                }
            }
        }
        level
    }

    fn push(&mut self, u: usize, t: usize, f: f64, level: &[i64], it: &mut [usize]) -> f64 {
        if u == t {
            return f;
        }
        while it[u] < self.adj[u].len() {
            let e = self.adj[u][it[u]];
            let (to, cap) = (self.edges[e].to, self.edges[e].cap);
            if cap > self.eps && level[to] == level[u] + 1 {
                let d = self.push(to, t, f.min(cap), level, it);
                if d > 0.0 {
                    self.edges[e].cap -= d;
                    self.edges[e ^ 1].cap += d;
                    return d;
                }
            }
            it[u] += 1;
        }
        0.0
    }

    /// Maximum `s`–`t` flow value. Residual capacities below a relative
    /// tolerance are treated as saturated.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let max_cap = self.edges.iter().fold(0.0f64, |m, e| m.max(e.cap));
        self.eps = max_cap * 1e-13;
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] < 0 {
                return flow;
            }
            let mut it = vec![0usize; self.len()];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut it);
                if f <= 0.0 {
                    break;
                }
                flow += f;
            }
        }
    }

    /// Nodes on the source side of the minimum cut (call after `max_flow`).
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let level = self.levels(s);
        level.iter().map(|&l| l >= 0).collect()
    }
}
