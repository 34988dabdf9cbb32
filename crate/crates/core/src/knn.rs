//! Exact K-nearest-neighbour search over the 4-D (origin, destination)
//! points and the sparse similarity graph built from it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 4];

const LEAF_SIZE: usize = 16;

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    let d3 = a[3] - b[3];
    d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3
}

enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a borrowed point set.
pub struct KdTree<'a> {
    points: &'a [Point],
    order: Vec<u32>,
    nodes: Vec<KdNode>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Point]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        // split on the widest dimension at the median
        let pts = self.points;
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        for &k in &self.order[start..end] {
            for d in 0..4 {
                lo[d] = lo[d].min(pts[k as usize][d]);
                hi[d] = hi[d].max(pts[k as usize][d]);
            }
        }
        let dim = (0..4)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[dim] - lo[dim] <= 0.0 {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a as usize][dim].total_cmp(&pts[b as usize][dim])
        });
        let value = pts[self.order[mid] as usize][dim];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` nearest points to `query`, excluding index `exclude`, ordered by
    /// (distance, index). Returned as `(squared distance, index)`.
    pub fn nearest(&self, query: &Point, k: usize, exclude: Option<usize>) -> Vec<(f64, u32)> {
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, exclude, &mut heap);
        }
        let mut out: Vec<(f64, u32)> = heap.into_iter().map(|c| (c.d2, c.index)).collect();
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }

    fn search(
        &self,
        node: usize,
        query: &Point,
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &idx in &self.order[start..end] {
                    if Some(idx as usize) == exclude {
                        continue;
                    }
                    let cand = Candidate {
                        d2: dist2(query, &self.points[idx as usize]),
                        index: idx,
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            KdNode::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                // equal bound may still hide a lower-index tie
                if heap.len() < k || diff * diff <= heap.peek().expect("heap is full").d2 {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    index: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-point neighbour lists, stored flat: point `p` owns entries
/// `p*k .. (p+1)*k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<u32>,
    pub distances: Vec<f64>,
}

impl Neighbors {
    pub fn num_points(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn of(&self, p: usize) -> impl Iterator<Item = (u32, f64)> + '_ {
        let r = p * self.k..(p + 1) * self.k;
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.distances[r].iter().copied())
    }
}

/// Default neighbourhood size `min(1500, Q - 1)`.
pub fn default_k(num_points: usize) -> usize {
    1500.min(num_points.saturating_sub(1))
}

/// Exact Euclidean K nearest neighbours of every point, self excluded, ties
/// broken by lower index.
pub fn knn_search(points: &[Point], k: usize) -> Result<Neighbors> {
    let q = points.len();
    if k == 0 || k + 1 > q {
        return Err(Error::arg(format!("K must lie in 1..={} for {q} points, got {k}", q.saturating_sub(1))));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg("points must have finite coordinates"));
    }
    let tree = KdTree::build(points);
    let mut indices = vec![0u32; q * k];
    let mut distances = vec![0.0f64; q * k];
    indices
        .par_chunks_mut(k)
        .zip(distances.par_chunks_mut(k))
        .enumerate()
        .for_each(|(p, (idx, dist))| {
            for (slot, (d2, j)) in tree.nearest(&points[p], k, Some(p)).into_iter().enumerate() {
                idx[slot] = j;
                dist[slot] = d2.sqrt();
            }
        });
    Ok(Neighbors {
        k,
        indices,
        distances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Median of all K-NN distances.
    Median,
    Fixed(f64),
}

impl std::str::FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "median" {
            return Ok(Bandwidth::Median);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
            _ => Err(format!("bandwidth must be `median` or a positive number, got `{s}`")),
        }
    }
}

/// Integer Gaussian-kernel similarity `max(1, round(1000 exp(-d^2 / (2 sigma^2))))`.
pub fn kernel_weight(distance: f64, sigma: f64) -> u32 {
    let w = (1000.0 * (-(distance * distance) / (2.0 * sigma * sigma)).exp()).round();
    (w as u32).max(1)
}

/// Undirected weighted graph in compressed sparse row form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnGraph {
    pub offsets: Vec<usize>,
    pub targets: Vec<u32>,
    pub weights: Vec<u32>,
}

impl KnnGraph {
    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges `|E|`.
    pub fn total_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.targets[r.clone()]
            .iter()
            .map(|&t| t as usize)
            .zip(self.weights[r].iter().copied())
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Builds a graph from undirected edges; duplicates keep the larger weight
    /// and self-loops are dropped.
    pub fn from_edges(num_vertices: usize, edges: &[(usize, usize, u32)]) -> Self {
        let mut degree = vec![0usize; num_vertices + 1];
        for &(u, v, _) in edges {
            if u != v {
                degree[u] += 1;
                degree[v] += 1;
            }
        }
        let mut lists = vec![Vec::new(); num_vertices];
        for (v, d) in degree.iter().take(num_vertices).enumerate() {
            lists[v].reserve(*d);
        }
        for &(u, v, w) in edges {
            if u != v {
                lists[u].push((v as u32, w));
                lists[v].push((u as u32, w));
            }
        }
        Self::from_lists(lists)
    }

    fn from_lists(mut lists: Vec<Vec<(u32, u32)>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let total: usize = lists.iter().map(Vec::len).sum();
        let mut targets = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for list in lists.iter_mut() {
            list.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)));
            list.dedup_by_key(|e| e.0);
            for &(t, w) in list.iter() {
                targets.push(t);
                weights.push(w);
            }
            offsets.push(targets.len());
            *list = Vec::new();
        }
        KnnGraph {
            offsets,
            targets,
            weights,
        }
    }

    /// Plain-text edge list, one `u v w` line per undirected edge (`u < v`).
    pub fn write_edge_list<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for u in 0..self.num_vertices() {
            for (v, wt) in self.neighbors(u) {
                if u < v {
                    writeln!(w, "{u} {v} {wt}")?;
                }
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.num_vertices()).all(|u| {
            self.neighbors(u).all(|(v, w)| {
                v != u && w >= 1 && self.neighbors(v).any(|(x, wx)| x == u && wx == w)
            })
        })
    }
}

/// Kernel bandwidth actually used for `neighbors` under `mode`.
pub fn resolve_bandwidth(neighbors: &Neighbors, mode: Bandwidth) -> f64 {
    let sigma = match mode {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => {
            let mut d = neighbors.distances.clone();
            if d.is_empty() {
                return 1.0;
            }
            let mid = d.len() / 2;
            let (_, hi, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
            let hi = *hi;
            if d.len() % 2 == 0 {
                let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                0.5 * (lo + hi)
            } else {
                hi
            }
        }
    };
    if sigma > 0.0 && sigma.is_finite() {
        sigma
    } else {
        log::warn!("degenerate kNN distances; using bandwidth 1");
        1.0
    }
}

/// Union-symmetrized kNN graph with integer Gaussian-kernel weights.
pub fn build_similarity_graph(neighbors: &Neighbors, bandwidth: Bandwidth) -> KnnGraph {
    let q = neighbors.num_points();
    let sigma = resolve_bandwidth(neighbors, bandwidth);
    let mut lists: Vec<Vec<(u32, u32)>> = vec![Vec::new(); q];
    let mut incoming = vec![0usize; q];
    for &j in &neighbors.indices {
        incoming[j as usize] += 1;
    }
    for (p, list) in lists.iter_mut().enumerate() {
        list.reserve(neighbors.k + incoming[p]);
    }
    for p in 0..q {
        for (j, d) in neighbors.of(p) {
            let w = kernel_weight(d, sigma);
            lists[p].push((j, w));
            lists[j as usize].push((p as u32, w));
        }
    }
    KnnGraph::from_lists(lists)
}
