//! Supergaussian grouping: ℓ0 cut pursuit on the k-NN feature graph.
//!
//! The energy is `Σ_i ‖f_i − f̂_{k_i}‖² + μ·|{(i,j) ∈ E : k_i ≠ k_j}|`, with
//! `f̂_g` the mean feature of group `g`. The solver alternates binary
//! min-cut splits with greedy merges and single-node moves; every accepted
//! move strictly lowers the energy. Groups under the minimum size are then
//! merged by a separate forced step that may raise it.

mod maxflow;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use maxflow::FlowGraph;

use crate::error::{Error, Result};
use crate::neighborhood::{
    build_knn, descriptors, grouping_features, shape_descriptors, Descriptors, Feature, NeighborGraph, Standardizer,
    FEATURE_DIM,
};
use crate::scene::GaussianSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEnergy {
    pub data: f64,
    pub boundary: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Split,
    Merge,
    Relabel,
    /// Min-size merge; exempt from the descent guarantee.
    Forced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyStep {
    pub kind: MoveKind,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPursuitConfig {
    pub mu: f64,
    pub min_group_size: usize,
    /// Maximum number of split/merge/relabel sweeps.
    pub max_iters: usize,
}

impl Default for CutPursuitConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            min_group_size: 3,
            max_iters: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupergaussianPartition {
    /// Group index per Gaussian.
    pub assignment: Vec<usize>,
    /// Members per group, ascending; groups ordered by smallest member.
    pub groups: Vec<Vec<usize>>,
    /// Mean member position (filled by [`group_stats`]).
    pub centroids: Vec<Vector3<f64>>,
    /// Mean member feature `f̂_g`.
    pub values: Vec<Feature>,
    /// Group shape descriptors (filled by [`group_stats`]).
    pub descriptors: Vec<Descriptors>,
    pub mu: f64,
    pub energy: PartitionEnergy,
    /// Energy after the initial state and after every move.
    pub trace: Vec<EnergyStep>,
}

/// Compact export record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    #[serde(rename = "G")]
    pub groups: usize,
    pub energy: f64,
    pub sizes: Vec<usize>,
    pub mu: f64,
}

impl SupergaussianPartition {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Rebuilds index sets from an assignment; ids are compacted to `0..G`
    /// in order of first appearance by smallest member.
    pub fn from_assignment(assignment: &[usize], mu: f64) -> Self {
        let groups = groups_from_labels(assignment);
        let mut out = Self {
            assignment: vec![0; assignment.len()],
            groups: Vec::new(),
            centroids: Vec::new(),
            values: Vec::new(),
            descriptors: Vec::new(),
            mu,
            energy: PartitionEnergy {
                data: 0.0,
                boundary: 0.0,
                total: 0.0,
            },
            trace: Vec::new(),
        };
        out.set_groups(groups);
        out
    }

    fn set_groups(&mut self, mut groups: Vec<Vec<usize>>) {
        groups.retain(|g| !g.is_empty());
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g[0]);
        for (gi, g) in groups.iter().enumerate() {
            for &i in g {
                self.assignment[i] = gi;
            }
        }
        self.groups = groups;
    }

    /// Disjoint-cover check against `n` items.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.assignment.len() != n {
            return Err(Error::invalid(format!(
                "partition covers {} items, expected {n}",
                self.assignment.len()
            )));
        }
        if n > 0 && self.groups.is_empty() {
            return Err(Error::invalid("partition has no groups"));
        }
        let mut seen = vec![false; n];
        for (g, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("group {g} is empty")));
            }
            for &i in members {
                if i >= n || seen[i] || self.assignment[i] != g {
                    return Err(Error::invalid(format!("item {i} is not covered exactly once")));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("item {i} is in no group")));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn summary(&self) -> PartitionSummary {
        PartitionSummary {
            groups: self.groups.len(),
            energy: self.energy.total,
            sizes: self.sizes(),
            mu: self.mu,
        }
    }
}

fn groups_from_labels(labels: &[usize]) -> Vec<Vec<usize>> {
    let max = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); max];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn sq_dist(a: &Feature, b: &Feature) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn feature_mean(features: &[Feature], members: &[usize]) -> Feature {
    let mut m = [0.0; FEATURE_DIM];
    for &i in members {
        for d in 0..FEATURE_DIM {
            m[d] += features[i][d];
        }
    }
    let n = members.len().max(1) as f64;
    m.map(|v| v / n)
}

/// `Σ_{i ∈ members} ‖f_i − mean‖²`.
pub fn data_term(features: &[Feature], members: &[usize]) -> f64 {
    let m = feature_mean(features, members);
    members.iter().map(|&i| sq_dist(&features[i], &m)).sum()
}

/// Energy of an arbitrary labeling (labels need not be compact).
pub fn partition_energy(
    features: &[Feature],
    graph: &NeighborGraph,
    labels: &[usize],
    mu: f64,
) -> PartitionEnergy {
    let data = groups_from_labels(labels)
        .iter()
        .map(|g| data_term(features, g))
        .sum::<f64>();
    let cut = graph.edges.iter().filter(|&&(i, j)| labels[i] != labels[j]).count();
    let boundary = mu * cut as f64;
    PartitionEnergy {
        data,
        boundary,
        total: data + boundary,
    }
}

/// Components of the subgraph induced on `members` where both endpoints
/// share a label.
fn label_components(graph: &NeighborGraph, members: &[usize], label: &[u8], pos: &[usize]) -> Vec<Vec<usize>> {
    let n = members.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut head = 0;
        while head < comp.len() {
            let u = comp[head];
            head += 1;
            for &v in &graph.adjacency[members[u]] {
                let lv = pos[v];
                if lv != usize::MAX && !seen[lv] && label[lv] == label[u] {
                    seen[lv] = true;
                    comp.push(lv);
                }
            }
        }
        out.push(comp.into_iter().map(|l| members[l]).collect());
    }
    out
}

/// Best binary split of `members`, or `None` if it does not lower the energy.
/// `pos` maps global index → local index (MAX outside `members`).
fn try_split(
    features: &[Feature],
    graph: &NeighborGraph,
    members: &[usize],
    mu: f64,
    pos: &[usize],
) -> Option<(f64, Vec<Vec<usize>>)> {
    let n = members.len();
    if n < 2 {
        return None;
    }
    // farthest pair; ties to the lexicographically lowest pair
    let (mut pa, mut pb, mut best) = (0, 0, 0.0);
    for a in 0..n {
        for b in a + 1..n {
            let d = sq_dist(&features[members[a]], &features[members[b]]);
            if d > best {
                (pa, pb, best) = (a, b, d);
            }
        }
    }
    if best == 0.0 {
        return None;
    }
    let mut inits = vec![(features[members[pa]], features[members[pb]])];
    // outlier against the rest
    let mean = feature_mean(features, members);
    let far = (0..n)
        .max_by(|&x, &y| {
            sq_dist(&features[members[x]], &mean)
                .total_cmp(&sq_dist(&features[members[y]], &mean))
                .then(y.cmp(&x))
        })
        .unwrap();
    let rest: Vec<usize> = members.iter().copied().filter(|&i| i != members[far]).collect();
    inits.push((features[members[far]], feature_mean(features, &rest)));
    let mut best_split: Option<(f64, Vec<Vec<usize>>)> = None;
    for (ca, cb) in inits {
        if let Some((after, parts)) = split_from(features, graph, members, mu, pos, ca, cb) {
            if best_split.as_ref().map_or(true, |(e, _)| after < *e) {
                best_split = Some((after, parts));
            }
        }
    }
    let (after, parts) = best_split?;
    let before = data_term(features, members);
    (after < before - descent_tol(before)).then_some((after - before, parts))
}

/// Alternating min-cut / centroid refinement from two initial centroids.
/// Returns the energy restricted to `members` (data plus internal cut
/// edges) and the resulting connected parts, or `None` if one side empties.
fn split_from(
    features: &[Feature],
    graph: &NeighborGraph,
    members: &[usize],
    mu: f64,
    pos: &[usize],
    mut ca: Feature,
    mut cb: Feature,
) -> Option<(f64, Vec<Vec<usize>>)> {
    let n = members.len();
    let mut labels: Vec<u8> = Vec::new();
    for _ in 0..10 {
        let s = n;
        let t = n + 1;
        let mut fg = FlowGraph::new(n + 2);
        for (l, &i) in members.iter().enumerate() {
            let da = sq_dist(&features[i], &ca);
            let db = sq_dist(&features[i], &cb);
            let m = da.min(db);
            if db > m {
                fg.add_edge(s, l, db - m);
            }
            if da > m {
                fg.add_edge(l, t, da - m);
            }
            if mu > 0.0 {
                for &j in &graph.adjacency[i] {
                    let lj = pos[j];
                    if j > i && lj != usize::MAX {
                        fg.add_edge_pair(l, lj, mu, mu);
                    }
                }
            }
        }
        fg.max_flow(s, t);
        let side = fg.source_side(s);
        let new: Vec<u8> = (0..n).map(|l| if side[l] { 0 } else { 1 }).collect();
        let na = new.iter().filter(|&&v| v == 0).count();
        if na == 0 || na == n {
            labels = new;
            break;
        }
        let a: Vec<usize> = (0..n).filter(|&l| new[l] == 0).map(|l| members[l]).collect();
        let b: Vec<usize> = (0..n).filter(|&l| new[l] == 1).map(|l| members[l]).collect();
        ca = feature_mean(features, &a);
        cb = feature_mean(features, &b);
        let stable = new == labels;
        labels = new;
        if stable {
            break;
        }
    }
    let na = labels.iter().filter(|&&v| v == 0).count();
    if na == 0 || na == n {
        return None;
    }
    let parts = label_components(graph, members, &labels, pos);
    let mut cut = 0usize;
    for (l, &i) in members.iter().enumerate() {
        for &j in &graph.adjacency[i] {
            let lj = pos[j];
            if j > i && lj != usize::MAX && labels[lj] != labels[l] {
                cut += 1;
            }
        }
    }
    let after: f64 = parts.iter().map(|p| data_term(features, p)).sum::<f64>() + mu * cut as f64;
    Some((after, parts))
}

fn descent_tol(scale: f64) -> f64 {
    1e-10 * (1.0 + scale.abs())
}

struct State<'a> {
    features: &'a [Feature],
    graph: &'a NeighborGraph,
    mu: f64,
    labels: Vec<usize>,
    groups: Vec<Vec<usize>>,
    means: Vec<Feature>,
    trace: Vec<EnergyStep>,
}

impl<'a> State<'a> {
    fn record(&mut self, kind: MoveKind) {
        let e = partition_energy(self.features, self.graph, &self.labels, self.mu).total;
        if kind != MoveKind::Forced {
            if let Some(prev) = self.trace.last() {
                debug_assert!(e <= prev.energy + 1e-9 * (1.0 + prev.energy.abs()), "energy rose");
            }
        }
        self.trace.push(EnergyStep { kind, energy: e });
    }

    fn rebuild_labels(&mut self) {
        self.groups.retain(|g| !g.is_empty());
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                self.labels[i] = g;
            }
        }
        self.means = self.groups.iter().map(|g| feature_mean(self.features, g)).collect();
    }

    /// One pass of binary splits over every group; returns whether any split.
    fn split_pass(&mut self) -> bool {
        let n = self.features.len();
        let features = self.features;
        let graph = self.graph;
        let mu = self.mu;
        let candidates: Vec<Option<(f64, Vec<Vec<usize>>)>> = self
            .groups
            .par_iter()
            .map(|members| {
                let mut pos = vec![usize::MAX; n];
                for (l, &i) in members.iter().enumerate() {
                    pos[i] = l;
                }
                try_split(features, graph, members, mu, &pos)
            })
            .collect();
        let mut any = false;
        let mut next = Vec::with_capacity(self.groups.len());
        let old = std::mem::take(&mut self.groups);
        for (members, cand) in old.into_iter().zip(candidates) {
            match cand {
                Some((_, parts)) => {
                    any = true;
                    next.extend(parts);
                }
                None => next.push(members),
            }
        }
        self.groups = next;
        if any {
            self.rebuild_labels();
            self.record(MoveKind::Split);
        }
        any
    }

    fn edges_between(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        let mut m = std::collections::BTreeMap::new();
        for &(i, j) in &self.graph.edges {
            let (a, b) = (self.labels[i], self.labels[j]);
            if a != b {
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Greedy best-first merging of adjacent groups while it lowers the energy.
    fn merge_pass(&mut self) -> bool {
        let mut any = false;
        loop {
            let between = self.edges_between();
            let mut best: Option<(f64, usize, usize)> = None;
            for (&(a, b), &cnt) in &between {
                let (na, nb) = (self.groups[a].len() as f64, self.groups[b].len() as f64);
                let delta = na * nb / (na + nb) * sq_dist(&self.means[a], &self.means[b])
                    - self.mu * cnt as f64;
                if best.map_or(true, |(d, _, _)| delta < d) {
                    best = Some((delta, a, b));
                }
            }
            let total = partition_energy(self.features, self.graph, &self.labels, self.mu).total;
            match best {
                Some((delta, a, b)) if delta < -descent_tol(total) => {
                    let moved = std::mem::take(&mut self.groups[b]);
                    self.groups[a].extend(moved);
                    self.groups[a].sort_unstable();
                    self.rebuild_labels();
                    self.record(MoveKind::Merge);
                    any = true;
                }
                _ => return any,
            }
        }
    }

    /// Re-splits the union of each adjacent pair from the pair's own means.
    fn resplit_pass(&mut self) -> bool {
        let n = self.features.len();
        let mut any = false;
        let mut pos = vec![usize::MAX; n];
        loop {
            let between = self.edges_between();
            let mut applied = false;
            for (&(a, b), &cnt) in &between {
                let mut union: Vec<usize> = self.groups[a].iter().chain(&self.groups[b]).copied().collect();
                union.sort_unstable();
                let current = data_term(self.features, &self.groups[a])
                    + data_term(self.features, &self.groups[b])
                    + self.mu * cnt as f64;
                for (l, &i) in union.iter().enumerate() {
                    pos[i] = l;
                }
                let cand = split_from(
                    self.features,
                    self.graph,
                    &union,
                    self.mu,
                    &pos,
                    self.means[a],
                    self.means[b],
                );
                for &i in &union {
                    pos[i] = usize::MAX;
                }
                if let Some((after, parts)) = cand {
                    if after < current - descent_tol(current) {
                        self.groups[a].clear();
                        self.groups[b].clear();
                        self.groups.extend(parts);
                        self.rebuild_labels();
                        self.record(MoveKind::Split);
                        applied = true;
                        any = true;
                        break;
                    }
                }
            }
            if !applied {
                return any;
            }
        }
    }

    /// Potts α-expansion with group means held fixed, then mean refit.
    fn expansion_pass(&mut self) -> bool {
        let mut any = false;
        let mut alpha = 0;
        while alpha < self.groups.len() {
            any |= self.expand(alpha, self.means[alpha]);
            alpha += 1;
        }
        any
    }

    /// Expansions of a fresh label centered on each node's own feature.
    fn seeded_expansion_pass(&mut self) -> bool {
        let mut any = false;
        for i in 0..self.features.len() {
            any |= self.expand(self.groups.len(), self.features[i]);
            let mut hood = self.graph.adjacency[i].clone();
            hood.push(i);
            any |= self.expand(self.groups.len(), feature_mean(self.features, &hood));
        }
        any
    }

    /// One expansion move toward label `alpha` (may be `groups.len()` for a
    /// new group) from center `ma`. The center is refit to the expanded set
    /// and the move re-solved a few times; the best proposal is applied only
    /// if it lowers the energy.
    fn expand(&mut self, alpha: usize, mut ma: Feature) -> bool {
        let current = partition_energy(self.features, self.graph, &self.labels, self.mu).total;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..5 {
            let Some(labels) = self.expansion_labels(alpha, &ma) else { break };
            let e = partition_energy(self.features, self.graph, &labels, self.mu).total;
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == alpha).collect();
            let next = feature_mean(self.features, &members);
            let improved = best.as_ref().map_or(true, |(b, _)| e < *b);
            if improved {
                best = Some((e, labels));
            }
            if !improved || next == ma {
                break;
            }
            ma = next;
        }
        match best {
            Some((e, labels)) if e < current - descent_tol(current) => {
                self.groups = groups_from_labels(&labels);
                self.labels = labels;
                self.rebuild_labels();
                self.record(MoveKind::Relabel);
                self.split_components();
                true
            }
            _ => false,
        }
    }

    fn expansion_labels(&self, alpha: usize, ma: &Feature) -> Option<Vec<usize>> {
        let n = self.features.len();
        let s = n;
        let t = n + 1;
        let mut fg = FlowGraph::new(n + 2);
        let mut unary1 = vec![0.0; n];
        let mut unary0 = vec![0.0; n];
        for i in 0..n {
            unary0[i] = sq_dist(&self.features[i], &self.means[self.labels[i]]);
            unary1[i] = sq_dist(&self.features[i], ma);
        }
        for &(i, j) in &self.graph.edges {
            let (li, lj) = (self.labels[i], self.labels[j]);
            let pot = |x: bool, y: bool| -> f64 {
                let a = if x { alpha } else { li };
                let b = if y { alpha } else { lj };
                if a != b {
                    self.mu
                } else {
                    0.0
                }
            };
            let (e00, e01, e10, e11) = (pot(false, false), pot(false, true), pot(true, false), pot(true, true));
            unary1[i] += e10 - e00;
            unary1[j] += e11 - e10;
            let w = e01 + e10 - e00 - e11;
            if w > 0.0 {
                fg.add_edge(i, j, w);
            }
        }
        for i in 0..n {
            if self.labels[i] == alpha {
                continue;
            }
            let m = unary0[i].min(unary1[i]);
            if unary1[i] > m {
                fg.add_edge(s, i, unary1[i] - m);
            }
            if unary0[i] > m {
                fg.add_edge(i, t, unary0[i] - m);
            }
        }
        fg.max_flow(s, t);
        let side = fg.source_side(s);
        let mut labels = self.labels.clone();
        let mut changed = false;
        for i in 0..n {
            if !side[i] && labels[i] != alpha {
                labels[i] = alpha;
                changed = true;
            }
        }
        changed.then_some(labels)
    }

    /// Splits every group into its connected components (never raises the energy).
    fn split_components(&mut self) {
        let n = self.features.len();
        let mut comps = Vec::new();
        let mut pos = vec![usize::MAX; n];
        for members in &self.groups {
            for (l, &i) in members.iter().enumerate() {
                pos[i] = l;
            }
            let zeros = vec![0u8; members.len()];
            comps.extend(label_components(self.graph, members, &zeros, &pos));
            for &i in members {
                pos[i] = usize::MAX;
            }
        }
        if comps.len() != self.groups.len() {
            self.groups = comps;
            self.rebuild_labels();
            self.record(MoveKind::Split);
        }
    }

    /// Moves single nodes to an adjacent group when that lowers the energy.
    fn relabel_pass(&mut self) -> bool {
        let mut any = false;
        let n = self.features.len();
        for i in 0..n {
            let a = self.labels[i];
            let na = self.groups[a].len() as f64;
            let f = &self.features[i];
            let removal = if na > 1.0 {
                na / (na - 1.0) * sq_dist(f, &self.means[a])
            } else {
                0.0
            };
            let mut counts: Vec<(usize, usize)> = Vec::new();
            for &j in &self.graph.adjacency[i] {
                let g = self.labels[j];
                match counts.iter_mut().find(|(h, _)| *h == g) {
                    Some(c) => c.1 += 1,
                    None => counts.push((g, 1)),
                }
            }
            let own = counts.iter().find(|(h, _)| *h == a).map_or(0, |c| c.1);
            let mut best: Option<(f64, usize)> = None;
            counts.sort_unstable();
            for &(b, cnt) in &counts {
                if b == a {
                    continue;
                }
                let nb = self.groups[b].len() as f64;
                let add = nb / (nb + 1.0) * sq_dist(f, &self.means[b]);
                let delta = add - removal + self.mu * (own as f64 - cnt as f64);
                if best.map_or(true, |(d, _)| delta < d) {
                    best = Some((delta, b));
                }
            }
            // detaching into a new singleton group
            if na > 1.0 {
                let delta = -removal + self.mu * own as f64;
                if best.map_or(true, |(d, _)| delta < d) {
                    best = Some((delta, usize::MAX));
                }
            }
            if let Some((delta, b)) = best {
                let scale = self.trace.last().map_or(0.0, |s| s.energy);
                if delta < -descent_tol(scale) && b == usize::MAX {
                    self.groups[a].retain(|&x| x != i);
                    self.groups.push(vec![i]);
                    self.rebuild_labels();
                    self.record(MoveKind::Relabel);
                    any = true;
                } else if delta < -descent_tol(scale) {
                    self.groups[a].retain(|&x| x != i);
                    let pos = self.groups[b].partition_point(|&x| x < i);
                    self.groups[b].insert(pos, i);
                    self.labels[i] = b;
                    self.means[a] = feature_mean(self.features, &self.groups[a]);
                    self.means[b] = feature_mean(self.features, &self.groups[b]);
                    if self.groups[a].is_empty() {
                        self.rebuild_labels();
                    }
                    self.record(MoveKind::Relabel);
                    any = true;
                }
            }
        }
        if any {
            // a move may disconnect its source group
            self.split_components();
        }
        any
    }

    fn descend(&mut self, max_iters: usize) {
        for _ in 0..max_iters {
            let mut changed = false;
            while self.split_pass() {
                changed = true;
            }
            changed |= self.merge_pass();
            changed |= self.resplit_pass();
            changed |= self.relabel_pass();
            changed |= self.expansion_pass();
            if !changed {
                changed |= self.seeded_expansion_pass();
            }
            if !changed {
                break;
            }
        }
    }

    fn forced_merges(&mut self, min_size: usize) {
        loop {
            let small = self
                .groups
                .iter()
                .enumerate()
                .filter(|(_, g)| g.len() < min_size)
                .min_by_key(|(gi, g)| (g.len(), *gi))
                .map(|(gi, _)| gi);
            let Some(s) = small else { return };
            if self.groups.len() < 2 {
                return;
            }
            let mut adjacent: Vec<usize> = self.groups[s]
                .iter()
                .flat_map(|&i| self.graph.adjacency[i].iter().map(|&j| self.labels[j]))
                .filter(|&g| g != s)
                .collect();
            adjacent.sort_unstable();
            adjacent.dedup();
            if adjacent.is_empty() {
                adjacent = (0..self.groups.len()).filter(|&g| g != s).collect();
            }
            let target = adjacent
                .iter()
                .copied()
                .min_by(|&x, &y| {
                    sq_dist(&self.means[s], &self.means[x])
                        .total_cmp(&sq_dist(&self.means[s], &self.means[y]))
                        .then(x.cmp(&y))
                })
                .unwrap();
            let moved = std::mem::take(&mut self.groups[s]);
            self.groups[target].extend(moved);
            self.groups[target].sort_unstable();
            self.rebuild_labels();
            self.record(MoveKind::Forced);
        }
    }
}

/// ℓ0 cut pursuit on standardized features.
pub fn cut_pursuit(
    features: &[Feature],
    graph: &NeighborGraph,
    cfg: &CutPursuitConfig,
) -> Result<SupergaussianPartition> {
    if features.is_empty() {
        return Err(Error::invalid("cut_pursuit: empty feature array"));
    }
    if graph.len() != features.len() {
        return Err(Error::invalid(format!(
            "cut_pursuit: {} features but graph has {} nodes",
            features.len(),
            graph.len()
        )));
    }
    if !(cfg.mu >= 0.0) || !cfg.mu.is_finite() {
        return Err(Error::invalid(format!("cut_pursuit: mu must be >= 0, got {}", cfg.mu)));
    }
    let n = features.len();
    let start = |groups: Vec<Vec<usize>>| {
        let mut st = State {
            features,
            graph,
            mu: cfg.mu,
            labels: vec![0; n],
            groups,
            means: Vec::new(),
            trace: Vec::new(),
        };
        st.rebuild_labels();
        st.record(MoveKind::Split);
        st.descend(cfg.max_iters);
        st
    };
    // top-down from the connected components, and bottom-up from singletons;
    // the lower local minimum wins (ties to top-down)
    let top = start(graph.components());
    let bottom = start((0..n).map(|i| vec![i]).collect());
    let energy = |st: &State| st.trace.last().map_or(f64::INFINITY, |s| s.energy);
    let mut st = if energy(&bottom) < energy(&top) { bottom } else { top };
    st.forced_merges(cfg.min_group_size);

    let mut out = SupergaussianPartition::from_assignment(&st.labels, cfg.mu);
    out.values = out.groups.iter().map(|g| feature_mean(features, g)).collect();
    out.energy = partition_energy(features, graph, &out.assignment, cfg.mu);
    out.trace = st.trace;
    Ok(out)
}

/// Group centroids and shape descriptors from member positions.
pub fn group_stats(mut partition: SupergaussianPartition, positions: &[Vector3<f64>]) -> SupergaussianPartition {
    partition.centroids = partition
        .groups
        .iter()
        .map(|g| g.iter().fold(Vector3::zeros(), |a, &i| a + positions[i]) / g.len() as f64)
        .collect();
    partition.descriptors = partition
        .groups
        .iter()
        .map(|g| {
            let pts: Vec<_> = g.iter().map(|&i| positions[i]).collect();
            shape_descriptors(&pts)
        })
        .collect();
    partition
}

#[derive(Clone, Debug)]
pub struct TuneResult {
    pub mu: f64,
    pub partition: SupergaussianPartition,
    pub evaluations: usize,
    /// `false` when no evaluated μ landed in the target range.
    pub in_range: bool,
}

/// Log-space bisection on μ for a group count in `[g_min, g_max]`.
pub fn tune_mu(
    features: &[Feature],
    graph: &NeighborGraph,
    target: (usize, usize),
    base: &CutPursuitConfig,
) -> Result<TuneResult> {
    let (g_min, g_max) = target;
    if g_min > g_max || g_min == 0 {
        return Err(Error::invalid(format!("tune_mu: bad target range {target:?}")));
    }
    if features.is_empty() {
        return Err(Error::invalid("tune_mu: empty feature array"));
    }
    let all: Vec<usize> = (0..features.len()).collect();
    let total_var = data_term(features, &all);
    let per_node = (total_var / features.len() as f64).max(1e-12);
    let mut lo = 1e-8 * per_node;
    let mut hi = 2.0 * total_var + 1.0;
    let dist = |g: usize| {
        if g < g_min {
            g_min - g
        } else {
            g.saturating_sub(g_max)
        }
    };
    let run = |mu: f64| {
        cut_pursuit(
            features,
            graph,
            &CutPursuitConfig {
                mu,
                ..base.clone()
            },
        )
    };
    let mut evaluations = 0;
    let mut best: Option<(usize, f64, SupergaussianPartition)> = None;
    let consider = |mu: f64, p: SupergaussianPartition, best: &mut Option<(usize, f64, SupergaussianPartition)>| {
        let d = dist(p.len());
        if best.as_ref().map_or(true, |(bd, _, _)| d < *bd) {
            *best = Some((d, mu, p));
        }
        d == 0
    };
    for mu in [hi, lo] {
        let p = run(mu)?;
        evaluations += 1;
        if consider(mu, p, &mut best) {
            let (_, mu, partition) = best.unwrap();
            return Ok(TuneResult {
                mu,
                partition,
                evaluations,
                in_range: true,
            });
        }
    }
    while evaluations < 20 {
        let mid = (lo * hi).sqrt();
        let p = run(mid)?;
        evaluations += 1;
        let g = p.len();
        if consider(mid, p, &mut best) {
            break;
        }
        if g > g_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (d, mu, partition) = best.unwrap();
    if d > 0 {
        log::warn!(
            "tune_mu: target {target:?} not reached; using mu={mu:.4e} with G={}",
            partition.len()
        );
    }
    Ok(TuneResult {
        mu,
        partition,
        evaluations,
        in_range: d == 0,
    })
}

/// Settings for grouping a whole scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// k of the neighbor graph.
    pub neighbors: usize,
    /// Target group count range `[min, max]`.
    pub target: (usize, usize),
    /// Position, color, scale and shape block weights.
    pub block_weights: [f64; 4],
    pub min_group_size: usize,
    pub max_iters: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            neighbors: 10,
            target: (16, 64),
            block_weights: [1.0; 4],
            min_group_size: 3,
            max_iters: 50,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| {
            Err(Error::Config {
                field: format!("grouping.{f}"),
                message: m,
            })
        };
        if self.neighbors == 0 {
            return bad("neighbors", "must be >= 1".into());
        }
        if self.target.0 == 0 || self.target.0 > self.target.1 {
            return bad("target", format!("need 1 <= min <= max, got {:?}", self.target));
        }
        if self.block_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("block_weights", "weights must be > 0".into());
        }
        Ok(())
    }
}

/// Everything produced by grouping a scene.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub graph: NeighborGraph,
    pub descriptors: Vec<Descriptors>,
    pub partition: SupergaussianPartition,
    pub in_range: bool,
}

/// kNN graph, descriptors, standardized features, then μ tuned to the target.
pub fn group_scene(scene: &GaussianSet, cfg: &GroupingConfig) -> Result<Grouping> {
    cfg.validate()?;
    let positions = scene.positions();
    let k = cfg.neighbors.min(positions.len().saturating_sub(1)).max(1);
    let graph = build_knn(&positions, k)?;
    let descriptors = descriptors(&positions, &graph)?;
    let raw = grouping_features(scene, &descriptors)?;
    let features = Standardizer::fit(&raw, cfg.block_weights, 1e-12)?.apply(&raw);
    let base = CutPursuitConfig {
        mu: 1.0,
        min_group_size: cfg.min_group_size,
        max_iters: cfg.max_iters,
    };
    let tuned = tune_mu(&features, &graph, cfg.target, &base)?;
    let partition = group_stats(tuned.partition, &positions);
    Ok(Grouping {
        graph,
        descriptors,
        partition,
        in_range: tuned.in_range,
    })
}
