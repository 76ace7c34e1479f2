//! k-nearest-neighbor graph over Gaussian centers, eigenvalue shape
//! descriptors, and the 13-dimensional grouping feature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::GaussianSet;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a point set. Queries break distance ties by the lower
/// point index, so results are identical to an exhaustive scan.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(PartialEq)]
struct Cand {
    d2: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let slice = &self.order[start..end];
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in slice {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points to `query` as `(index, squared distance)`,
    /// nearest first; `exclude` is skipped (used for self-queries).
    pub fn knn(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, exclude, &mut heap);
        }
        let mut out: Vec<Cand> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.idx, c.d2)).collect()
    }

    fn search(
        &self,
        node: usize,
        q: &Vector3<f64>,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Cand>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Cand {
                        d2: (self.points[i] - q).norm_squared(),
                        idx: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // `<=` keeps equal-distance candidates on the far side reachable
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// k-NN graph: directed neighbor lists plus the symmetrized edge set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    /// `neighbors[i]`: the `k` nearest other points, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    /// Symmetrized adjacency, sorted ascending.
    pub adjacency: Vec<Vec<usize>>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl NeighborGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.get(i).is_some_and(|a| a.binary_search(&j).is_ok())
    }

    /// Builds the graph structure from arbitrary directed lists (union-symmetrized).
    pub fn from_neighbor_lists(k: usize, neighbors: Vec<Vec<usize>>) -> Self {
        let n = neighbors.len();
        let mut adjacency = vec![Vec::new(); n];
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if i != j {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
        for a in &mut adjacency {
            a.sort_unstable();
            a.dedup();
        }
        let edges = adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect();
        Self {
            k,
            neighbors,
            adjacency,
            edges,
        }
    }

    /// Graph with the given undirected edges and no directed lists.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut lists = vec![Vec::new(); n];
        for &(i, j) in edges {
            lists[i].push(j);
        }
        let mut g = Self::from_neighbor_lists(0, vec![Vec::new(); n]);
        let sym = Self::from_neighbor_lists(0, lists);
        g.adjacency = sym.adjacency;
        g.edges = sym.edges;
        g
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for s in 0..n {
            if seen[s] {
                continue;
            }
            let mut comp = vec![s];
            seen[s] = true;
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &v in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Exact k-NN graph; ties in distance go to the lower index.
pub fn build_knn(points: &[Vector3<f64>], k: usize) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::invalid("build_knn: k must be at least 1"));
    }
    if points.len() < k + 1 {
        return Err(Error::invalid(format!(
            "build_knn: need at least k+1 = {} points, got {}",
            k + 1,
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    let neighbors: Vec<Vec<usize>> = (0..points.len())
        .into_par_iter()
        .map(|i| tree.knn(&points[i], k, Some(i)).into_iter().map(|(j, _)| j).collect())
        .collect();
    Ok(NeighborGraph::from_neighbor_lists(k, neighbors))
}

/// Eigenvalue shape statistics of a point set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    pub linearity: f64,
    pub planarity: f64,
    pub scattering: f64,
    pub verticality: f64,
    /// Set when the covariance vanished and the fallback values were used.
    pub degenerate: bool,
}

impl Descriptors {
    pub const DEGENERATE: Self = Self {
        linearity: 0.0,
        planarity: 0.0,
        scattering: 1.0,
        verticality: 0.0,
        degenerate: true,
    };
}

/// Population covariance of a point set.
pub fn point_covariance(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut c = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        c += d * d.transpose();
    }
    c / n
}

/// Descriptors from a covariance matrix. Eigenvalues are clamped at 0.
pub fn descriptors_from_covariance(cov: &Matrix3<f64>) -> Descriptors {
    let eig = SymmetricEigen::new(*cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam = order.map(|d| eig.eigenvalues[d].max(0.0));
    let total: f64 = lam.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Descriptors::DEGENERATE;
    }
    let l = lam.map(|v| v / total);
    let linearity = (l[0] - l[1]) / l[0];
    let planarity = (l[1] - l[2]) / l[0];
    let scattering = l[2] / l[0];
    let mut w = Vector3::zeros();
    for (k, &d) in order.iter().enumerate() {
        w += l[k] * eig.eigenvectors.column(d).abs();
    }
    let verticality = (w.z / w.norm()).clamp(0.0, 1.0);
    Descriptors {
        linearity,
        planarity,
        scattering,
        verticality,
        degenerate: false,
    }
}

/// Descriptors of a point set (fewer than 3 points is degenerate).
pub fn shape_descriptors(points: &[Vector3<f64>]) -> Descriptors {
    if points.len() < 3 {
        return Descriptors::DEGENERATE;
    }
    let cov = point_covariance(points);
    // spread below coordinate rounding noise counts as coincident
    let mag = points.iter().fold(0.0f64, |m, p| m.max(p.norm_squared()));
    if cov.trace() <= 1e-24 * mag {
        return Descriptors::DEGENERATE;
    }
    descriptors_from_covariance(&cov)
}

/// Per-node descriptors over the neighborhoods `{i} ∪ neighbors[i]`.
pub fn descriptors(points: &[Vector3<f64>], graph: &NeighborGraph) -> Result<Vec<Descriptors>> {
    if points.len() != graph.len() {
        return Err(Error::invalid(format!(
            "descriptors: {} points but graph has {} nodes",
            points.len(),
            graph.len()
        )));
    }
    if let Some(i) = graph.neighbors.iter().position(|n| n.len() < 2) {
        return Err(Error::invalid(format!(
            "descriptors: neighborhood of node {i} has fewer than 3 points"
        )));
    }
    let out: Vec<Descriptors> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut nb = Vec::with_capacity(graph.neighbors[i].len() + 1);
            nb.push(points[i]);
            nb.extend(graph.neighbors[i].iter().map(|&j| points[j]));
            shape_descriptors(&nb)
        })
        .collect();
    let bad = out.iter().filter(|d| d.degenerate).count();
    if bad > 0 {
        log::warn!("{bad} degenerate neighborhoods (coincident points)");
    }
    Ok(out)
}

/// Writes `index,linearity,planarity,scattering,verticality` rows.
pub fn write_descriptor_csv(path: &Path, desc: &[Descriptors]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("index,linearity,planarity,scattering,verticality\n");
    for (i, d) in desc.iter().enumerate() {
        body.push_str(&format!(
            "{i},{},{},{},{}\n",
            d.linearity, d.planarity, d.scattering, d.verticality
        ));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

pub const FEATURE_DIM: usize = 13;
pub type Feature = [f64; FEATURE_DIM];

/// Column ranges of the feature blocks: position, color, scale, shape.
pub const FEATURE_BLOCKS: [(usize, usize); 4] = [(0, 3), (3, 6), (6, 9), (9, 13)];

/// `[x, c, σ, ℓ, s, v, p]` per Gaussian, with `c` the activated color and `σ`
/// the per-axis standard deviation.
pub fn grouping_features(scene: &GaussianSet, desc: &[Descriptors]) -> Result<Vec<Feature>> {
    if desc.len() != scene.len() {
        return Err(Error::invalid(format!(
            "grouping_features: {} descriptors for {} Gaussians",
            desc.len(),
            scene.len()
        )));
    }
    Ok(scene
        .gaussians
        .iter()
        .zip(desc)
        .map(|(g, d)| {
            let c = g.color();
            let s = g.scale();
            [
                g.position.x,
                g.position.y,
                g.position.z,
                c.x,
                c.y,
                c.z,
                s.x,
                s.y,
                s.z,
                d.linearity,
                d.scattering,
                d.verticality,
                d.planarity,
            ]
        })
        .collect())
}

/// Block-wise standardization: per-column mean removal, one scale per block so
/// the block's mean per-column variance becomes 1, then a per-block weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Feature,
    /// `sqrt(block variance + eps)` per block.
    pub scale: [f64; 4],
    pub weights: [f64; 4],
    pub eps: f64,
}

impl Standardizer {
    pub fn fit(features: &[Feature], weights: [f64; 4], eps: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("standardize: no features"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || !(eps > 0.0) {
            return Err(Error::invalid("standardize: weights and eps must be positive"));
        }
        let n = features.len() as f64;
        let mut mean = [0.0; FEATURE_DIM];
        for f in features {
            for d in 0..FEATURE_DIM {
                mean[d] += f[d];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut scale = [0.0; 4];
        for (b, &(lo, hi)) in FEATURE_BLOCKS.iter().enumerate() {
            let mut var = 0.0;
            for f in features {
                for d in lo..hi {
                    var += (f[d] - mean[d]).powi(2);
                }
            }
            var /= n * (hi - lo) as f64;
            scale[b] = (var + eps).sqrt();
        }
        Ok(Self {
            mean,
            scale,
            weights,
            eps,
        })
    }

    fn factor(&self, d: usize) -> f64 {
        let b = FEATURE_BLOCKS.iter().position(|&(lo, hi)| d >= lo && d < hi).unwrap();
        self.weights[b] / self.scale[b]
    }

    pub fn apply(&self, features: &[Feature]) -> Vec<Feature> {
        let fac: [f64; FEATURE_DIM] = std::array::from_fn(|d| self.factor(d));
        features
            .iter()
            .map(|f| std::array::from_fn(|d| (f[d] - self.mean[d]) * fac[d]))
            .collect()
    }

    pub fn invert(&self, features: &[Feature]) -> Vec<Feature> {
        let fac: [f64; FEATURE_DIM] = std::array::from_fn(|d| self.factor(d));
        features
            .iter()
            .map(|f| std::array::from_fn(|d| f[d] / fac[d] + self.mean[d]))
            .collect()
    }
}
