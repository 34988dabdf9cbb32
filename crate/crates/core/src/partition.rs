//! Recursive multilevel graph bisection.
//!
//! Each bisection coarsens the graph by heavy-edge matching until at most
//! [`COARSEN_TO`] vertices remain, bisects the coarsest graph by greedy graph
//! growing (or by packing connected components when the graph is
//! disconnected), then projects back level by level with boundary
//! Kernighan-Lin/Fiduccia-Mattheyses refinement. Splits are applied
//! recursively to build a full binary tree of the requested height.

use std::borrow::Cow;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::knn::KnnGraph;
use crate::rng::{stream_rng, Stream};
use crate::tree::{Node, PartitionTree};

pub const COARSEN_TO: usize = 64;
pub const REFINE_PASSES: usize = 2;
pub const DEFAULT_BALANCE_TOL: f64 = 1.03;
const INITIAL_TRIALS: usize = 8;

/// Working graph for one bisection: CSR adjacency with vertex weights.
#[derive(Debug, Clone)]
pub struct WGraph<'a> {
    xadj: Cow<'a, [usize]>,
    adj: Cow<'a, [u32]>,
    ew: Cow<'a, [u32]>,
    vw: Vec<u32>,
}

impl<'a> WGraph<'a> {
    pub fn from_knn(g: &'a KnnGraph) -> Self {
        WGraph {
            xadj: Cow::Borrowed(&g.offsets),
            adj: Cow::Borrowed(&g.targets),
            ew: Cow::Borrowed(&g.weights),
            vw: vec![1; g.num_vertices()],
        }
    }

    fn n(&self) -> usize {
        self.vw.len()
    }

    #[inline]
    fn edges(&self, v: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let r = self.xadj[v]..self.xadj[v + 1];
        self.adj[r.clone()]
            .iter()
            .map(|&u| u as usize)
            .zip(self.ew[r].iter().copied())
    }

    fn total_weight(&self) -> u64 {
        self.vw.iter().map(|&w| w as u64).sum()
    }

    /// Induced subgraph on `keep` (vertex ids of `self`), vertex weights kept.
    fn induced(&self, keep: &[u32]) -> WGraph<'static> {
        let mut local = vec![u32::MAX; self.n()];
        for (i, &v) in keep.iter().enumerate() {
            local[v as usize] = i as u32;
        }
        let mut xadj = Vec::with_capacity(keep.len() + 1);
        xadj.push(0);
        let mut adj = Vec::new();
        let mut ew = Vec::new();
        for &v in keep {
            for (u, w) in self.edges(v as usize) {
                let lu = local[u];
                if lu != u32::MAX {
                    adj.push(lu);
                    ew.push(w);
                }
            }
            xadj.push(adj.len());
        }
        WGraph {
            xadj: Cow::Owned(xadj),
            adj: Cow::Owned(adj),
            ew: Cow::Owned(ew),
            vw: keep.iter().map(|&v| self.vw[v as usize]).collect(),
        }
    }

    fn edge_cut(&self, part: &[u8]) -> u64 {
        let mut cut = 0u64;
        for v in 0..self.n() {
            for (u, w) in self.edges(v) {
                if part[u] != part[v] {
                    cut += w as u64;
                }
            }
        }
        cut / 2
    }

    /// Connected components as a label per vertex; returns the count.
    fn components(&self) -> (Vec<u32>, usize) {
        let n = self.n();
        let mut label = vec![u32::MAX; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if label[s] != u32::MAX {
                continue;
            }
            label[s] = count as u32;
            stack.push(s);
            while let Some(v) = stack.pop() {
                for (u, _) in self.edges(v) {
                    if label[u] == u32::MAX {
                        label[u] = count as u32;
                        stack.push(u);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }
}

/// Upper bound on each side's weight for a split of `size` vertices where
/// each side must keep at least `min_side` vertices.
fn max_side_weight(size: u64, min_side: u64, tol: f64) -> u64 {
    let half = size.div_ceil(2);
    let by_tol = ((tol * half as f64) + 1e-9).floor() as u64;
    by_tol.max(half).min(size - min_side)
}

struct Level<'a> {
    graph: WGraph<'a>,
    /// fine vertex -> coarse vertex of the next level
    cmap: Vec<u32>,
}

fn coarsen(g: &WGraph<'_>, rng: &mut ChaCha8Rng, max_vw: u64) -> (WGraph<'static>, Vec<u32>) {
    let n = g.n();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(rng);
    let mut mate = vec![u32::MAX; n];
    for &v in &order {
        let v = v as usize;
        if mate[v] != u32::MAX {
            continue;
        }
        let mut best: Option<(u32, usize)> = None;
        for (u, w) in g.edges(v) {
            if mate[u] != u32::MAX || u == v {
                continue;
            }
            if g.vw[u] as u64 + g.vw[v] as u64 > max_vw {
                continue;
            }
            let better = match best {
                None => true,
                Some((bw, bu)) => w > bw || (w == bw && u < bu),
            };
            if better {
                best = Some((w, u));
            }
        }
        match best {
            Some((_, u)) => {
                mate[v] = u as u32;
                mate[u] = v as u32;
            }
            None => mate[v] = v as u32,
        }
    }

    let mut cmap = vec![u32::MAX; n];
    let mut nc = 0u32;
    for v in 0..n {
        if cmap[v] == u32::MAX {
            cmap[v] = nc;
            cmap[mate[v] as usize] = nc;
            nc += 1;
        }
    }

    let nc = nc as usize;
    let mut xadj = Vec::with_capacity(nc + 1);
    xadj.push(0usize);
    let mut adj: Vec<u32> = Vec::new();
    let mut ew: Vec<u32> = Vec::new();
    let mut vw = vec![0u32; nc];
    let mut slot = vec![u32::MAX; nc];
    let mut members = Vec::with_capacity(2);
    let mut next = 0u32;
    for v in 0..n {
        let c = cmap[v];
        if c != next {
            continue;
        }
        next += 1;
        members.clear();
        members.push(v);
        if mate[v] as usize != v {
            members.push(mate[v] as usize);
        }
        let start = adj.len();
        for &f in &members {
            vw[c as usize] = vw[c as usize].saturating_add(g.vw[f]);
            for (u, w) in g.edges(f) {
                let cu = cmap[u];
                if cu == c {
                    continue;
                }
                let s = slot[cu as usize];
                if s == u32::MAX {
                    slot[cu as usize] = (adj.len() - start) as u32;
                    adj.push(cu);
                    ew.push(w);
                } else {
                    let e = &mut ew[start + s as usize];
                    *e = e.saturating_add(w);
                }
            }
        }
        for &cu in &adj[start..] {
            slot[cu as usize] = u32::MAX;
        }
        xadj.push(adj.len());
    }
    (
        WGraph {
            xadj: Cow::Owned(xadj),
            adj: Cow::Owned(adj),
            ew: Cow::Owned(ew),
            vw,
        },
        cmap,
    )
}

/// Bisection state: side per vertex, side weights and per-vertex
/// internal/external degrees.
struct Bisection {
    part: Vec<u8>,
    weight: [u64; 2],
    id: Vec<i64>,
    ed: Vec<i64>,
}

impl Bisection {
    fn new(g: &WGraph<'_>, part: Vec<u8>) -> Self {
        let n = g.n();
        let mut weight = [0u64; 2];
        let mut id = vec![0i64; n];
        let mut ed = vec![0i64; n];
        for v in 0..n {
            weight[part[v] as usize] += g.vw[v] as u64;
            for (u, w) in g.edges(v) {
                if part[u] == part[v] {
                    id[v] += w as i64;
                } else {
                    ed[v] += w as i64;
                }
            }
        }
        Bisection {
            part,
            weight,
            id,
            ed,
        }
    }

    fn gain(&self, v: usize) -> i64 {
        self.ed[v] - self.id[v]
    }

    fn cut(&self) -> i64 {
        self.ed.iter().sum::<i64>() / 2
    }

    fn do_move(&mut self, g: &WGraph<'_>, v: usize) {
        let from = self.part[v];
        let to = 1 - from;
        self.part[v] = to;
        self.weight[from as usize] -= g.vw[v] as u64;
        self.weight[to as usize] += g.vw[v] as u64;
        std::mem::swap(&mut self.id[v], &mut self.ed[v]);
        for (u, w) in g.edges(v) {
            let w = w as i64;
            if self.part[u] == to {
                self.id[u] += w;
                self.ed[u] -= w;
            } else {
                self.id[u] -= w;
                self.ed[u] += w;
            }
        }
    }
}

/// Forces both sides under `max_w` by moving the highest-gain vertices off the
/// heavy side.
fn balance(g: &WGraph<'_>, b: &mut Bisection, max_w: u64) {
    for _ in 0..2 {
        let heavy = if b.weight[0] > max_w {
            0u8
        } else if b.weight[1] > max_w {
            1u8
        } else {
            return;
        };
        let mut heap: BinaryHeap<(i64, std::cmp::Reverse<usize>)> = (0..g.n())
            .filter(|&v| b.part[v] == heavy)
            .map(|v| (b.gain(v), std::cmp::Reverse(v)))
            .collect();
        while b.weight[heavy as usize] > max_w {
            let Some((gain, std::cmp::Reverse(v))) = heap.pop() else {
                break;
            };
            if b.part[v] != heavy || gain != b.gain(v) {
                continue;
            }
            // never overshoot the light side past the bound
            if b.weight[1 - heavy as usize] + g.vw[v] as u64 > max_w {
                continue;
            }
            b.do_move(g, v);
            for (u, _) in g.edges(v) {
                if b.part[u] == heavy {
                    heap.push((b.gain(u), std::cmp::Reverse(u)));
                }
            }
        }
    }
}

/// Boundary FM refinement: single-vertex moves in gain order, rolled back to
/// the best balanced prefix. At most `passes` sweeps; stops early when a
/// sweep does not improve the cut.
fn refine(g: &WGraph<'_>, b: &mut Bisection, max_w: u64, passes: usize) {
    let n = g.n();
    let stall_limit = (n / 100).clamp(20, 200);
    let mut locked = vec![false; n];
    for _ in 0..passes {
        let mut heaps: [BinaryHeap<(i64, std::cmp::Reverse<usize>)>; 2] =
            [BinaryHeap::new(), BinaryHeap::new()];
        for v in 0..n {
            locked[v] = false;
            if b.ed[v] > 0 {
                heaps[b.part[v] as usize].push((b.gain(v), std::cmp::Reverse(v)));
            }
        }
        let start_cut = b.cut();
        let mut cut = start_cut;
        let mut best_cut = start_cut;
        let mut best_len = 0usize;
        let mut moves: Vec<usize> = Vec::new();
        let mut stall = 0;

        loop {
            // pick the side to move from: the heavier one, unless both fit
            let mut choice: Option<(i64, usize)> = None;
            for side in 0..2 {
                let other = 1 - side;
                while let Some(&(gain, std::cmp::Reverse(v))) = heaps[side].peek() {
                    if locked[v] || b.part[v] as usize != side || gain != b.gain(v) {
                        heaps[side].pop();
                        continue;
                    }
                    if b.weight[other] + g.vw[v] as u64 > max_w {
                        break;
                    }
                    if choice.is_none_or(|(cg, cv)| gain > cg || (gain == cg && v < cv)) {
                        choice = Some((gain, v));
                    }
                    break;
                }
            }
            let Some((gain, v)) = choice else { break };
            let side = b.part[v] as usize;
            heaps[side].pop();
            locked[v] = true;
            b.do_move(g, v);
            cut -= gain;
            moves.push(v);
            for (u, _) in g.edges(v) {
                if !locked[u] && b.ed[u] > 0 {
                    heaps[b.part[u] as usize].push((b.gain(u), std::cmp::Reverse(u)));
                }
            }
            if cut < best_cut {
                best_cut = cut;
                best_len = moves.len();
                stall = 0;
            } else {
                stall += 1;
                if stall >= stall_limit {
                    break;
                }
            }
        }
        for &v in moves[best_len..].iter().rev() {
            b.do_move(g, v);
        }
        if best_cut >= start_cut {
            break;
        }
    }
}

/// Grows side 0 from `seed` by repeatedly absorbing the frontier vertex that
/// most reduces the cut, until side 0 reaches `target` weight.
fn grow_from(g: &WGraph<'_>, seed: usize, target: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = g.n();
    let mut part = vec![1u8; n];
    let mut gain = vec![0i64; n];
    for v in 0..n {
        gain[v] = -g.edges(v).map(|(_, w)| w as i64).sum::<i64>();
    }
    let mut heap: BinaryHeap<(i64, std::cmp::Reverse<usize>)> = BinaryHeap::new();
    let mut weight = 0u64;
    let mut next_seed = Some(seed);
    while weight < target {
        let (v, from_frontier) = match heap.pop() {
            Some((gv, std::cmp::Reverse(v))) => {
                if part[v] == 0 || gv != gain[v] {
                    continue;
                }
                (v, true)
            }
            None => {
                // frontier exhausted: jump to an unvisited vertex
                let v = match next_seed.take() {
                    Some(s) => s,
                    None => {
                        let rest: Vec<usize> = (0..n).filter(|&u| part[u] == 1).collect();
                        if rest.is_empty() {
                            break;
                        }
                        rest[rng.random_range(0..rest.len())]
                    }
                };
                if part[v] == 0 {
                    continue;
                }
                (v, false)
            }
        };
        if from_frontier && weight + g.vw[v] as u64 > target && weight > 0 {
            // skip vertices that would overshoot; keep looking
            let over = weight + g.vw[v] as u64 - target;
            if over > g.vw[v] as u64 / 2 {
                continue;
            }
        }
        part[v] = 0;
        weight += g.vw[v] as u64;
        for (u, w) in g.edges(v) {
            if part[u] == 1 {
                gain[u] += 2 * w as i64;
                heap.push((gain[u], std::cmp::Reverse(u)));
            }
        }
    }
    part
}

/// Greedy component packing: components, heaviest first, go to the lighter side.
fn pack_components(g: &WGraph<'_>, label: &[u32], count: usize) -> Vec<u8> {
    let mut cw = vec![0u64; count];
    for v in 0..g.n() {
        cw[label[v] as usize] += g.vw[v] as u64;
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| cw[b].cmp(&cw[a]).then(a.cmp(&b)));
    let mut side = vec![0u8; count];
    let mut w = [0u64; 2];
    for c in order {
        let s = usize::from(w[1] < w[0]);
        side[c] = s as u8;
        w[s] += cw[c];
    }
    label.iter().map(|&c| side[c as usize]).collect()
}

fn initial_bisection(g: &WGraph<'_>, max_w: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n = g.n();
    let total = g.total_weight();
    let target = total / 2;
    let mut candidates: Vec<Vec<u8>> = Vec::new();
    let (label, count) = g.components();
    if count > 1 {
        log::warn!("bisecting a graph with {count} connected components");
        candidates.push(pack_components(g, &label, count));
    }
    for _ in 0..INITIAL_TRIALS.min(n) {
        let seed = rng.random_range(0..n);
        candidates.push(grow_from(g, seed, target, rng));
    }
    let mut best: Option<(bool, i64, Vec<u8>)> = None;
    for part in candidates {
        let mut b = Bisection::new(g, part);
        balance(g, &mut b, max_w);
        refine(g, &mut b, max_w, REFINE_PASSES);
        let ok = b.weight[0] <= max_w && b.weight[1] <= max_w;
        let cut = b.cut();
        let better = match &best {
            None => true,
            Some((bok, bcut, _)) => (ok && !bok) || (ok == *bok && cut < *bcut),
        };
        if better {
            best = Some((ok, cut, b.part));
        }
    }
    best.map(|(_, _, p)| p).unwrap_or_else(|| vec![0; n])
}

/// One multilevel bisection. Returns side (0/1) per vertex of `g`; each side
/// holds at most `max_side` weight when achievable.
pub fn multilevel_bisect(g: &WGraph<'_>, max_side: u64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let total = g.total_weight();
    let max_vw = (total as f64 * 1.5 / COARSEN_TO as f64).ceil().max(1.0) as u64;

    let mut levels: Vec<Level<'_>> = Vec::new();
    let mut current: WGraph<'_> = g.clone();
    while current.n() > COARSEN_TO {
        let (coarse, cmap) = coarsen(&current, rng, max_vw);
        if coarse.n() as f64 > 0.95 * current.n() as f64 {
            break;
        }
        levels.push(Level {
            graph: current,
            cmap,
        });
        current = coarse;
    }

    // coarse levels cannot always hit the exact bound; allow the heaviest
    // coarse vertex of slack there
    let slack = |gr: &WGraph<'_>| -> u64 {
        if gr.n() == g.n() {
            0
        } else {
            gr.vw.iter().copied().max().unwrap_or(0) as u64
        }
    };
    let bound = max_side + slack(&current);
    let mut part = initial_bisection(&current, bound, rng);

    while let Some(level) = levels.pop() {
        let fine = level.graph;
        part = level.cmap.iter().map(|&c| part[c as usize]).collect();
        let bound = max_side + slack(&fine);
        let mut b = Bisection::new(&fine, part);
        balance(&fine, &mut b, bound);
        refine(&fine, &mut b, bound, REFINE_PASSES);
        part = b.part;
        current = fine;
    }
    let mut b = Bisection::new(&current, part);
    balance(&current, &mut b, max_side);
    b.part
}

/// Builds a full binary partition tree of height `height` over the vertices
/// of `graph` by recursive multilevel bisection. Deterministic in `seed`.
pub fn recursive_bisect(graph: &KnnGraph, height: u32, seed: u64, balance_tol: f64) -> Result<PartitionTree> {
    let q = graph.num_vertices();
    if height == 0 {
        return Err(Error::arg("tree height must be at least 1"));
    }
    if height >= usize::BITS || (1usize << height) > q {
        return Err(Error::arg(format!("2^{height} leaves exceed {q} primitive objects")));
    }
    if !(balance_tol >= 1.0) {
        return Err(Error::arg(format!("balance tolerance must be >= 1, got {balance_tol}")));
    }
    let mut leaves = vec![0u32; q];
    let ids: Vec<u32> = (0..q as u32).collect();
    let root = WGraph::from_knn(graph);
    split(root, ids, Node::ROOT, height, seed, balance_tol, &mut leaves);
    PartitionTree::new(height, leaves)
}

fn split(
    g: WGraph<'_>,
    ids: Vec<u32>,
    node: Node,
    height: u32,
    seed: u64,
    tol: f64,
    leaves: &mut [u32],
) {
    if node.depth == height {
        for &v in &ids {
            leaves[v as usize] = node.pos;
        }
        return;
    }
    let size = g.total_weight();
    let min_side = 1u64 << (height - node.depth - 1);
    let max_w = max_side_weight(size, min_side, tol);
    let mut rng = stream_rng(seed, Stream::Bisection, node.flat() as u64);
    let part = multilevel_bisect(&g, max_w, &mut rng);

    let mut sides: [Vec<u32>; 2] = [Vec::new(), Vec::new()];
    for (v, &p) in part.iter().enumerate() {
        sides[p as usize].push(v as u32);
    }
    let [left_local, right_local] = sides;
    let left_g = g.induced(&left_local);
    let right_g = g.induced(&right_local);
    drop(g);
    let left_ids: Vec<u32> = left_local.iter().map(|&v| ids[v as usize]).collect();
    let right_ids: Vec<u32> = right_local.iter().map(|&v| ids[v as usize]).collect();
    drop(ids);
    let (a, b) = node.children();
    split(left_g, left_ids, a, height, seed, tol, leaves);
    split(right_g, right_ids, b, height, seed, tol, leaves);
}

/// Edge cut of a 2-way labelling of `graph`.
pub fn edge_cut(graph: &KnnGraph, part: &[u8]) -> u64 {
    WGraph::from_knn(graph).edge_cut(part)
}

/// Checks that every split of `tree` respects the balance tolerance;
/// returns the offending node, if any.
pub fn check_balance(tree: &PartitionTree, tol: f64) -> Option<Node> {
    let m = tree.num_leaves();
    let mut leaf_size = vec![0u64; m];
    for &j in &tree.leaf_assignment {
        leaf_size[j as usize - 1] += 1;
    }
    for node in tree.internal_nodes() {
        let (a, b) = node.children();
        let wa: u64 = tree.descendant_range(a).map(|j| leaf_size[j]).sum();
        let wb: u64 = tree.descendant_range(b).map(|j| leaf_size[j]).sum();
        let size = wa + wb;
        let bound = ((tol * size.div_ceil(2) as f64) + 1e-9).floor() as u64;
        if wa.max(wb) > bound.max(size.div_ceil(2)) {
            return Some(node);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> KnnGraph {
        let edges: Vec<_> = (0..n - 1).map(|v| (v, v + 1, 1)).collect();
        KnnGraph::from_edges(n, &edges)
    }

    fn two_cliques(size: usize) -> KnnGraph {
        let mut edges = Vec::new();
        for base in [0, size] {
            for u in 0..size {
                for v in u + 1..size {
                    edges.push((base + u, base + v, 10));
                }
            }
        }
        KnnGraph::from_edges(2 * size, &edges)
    }

    /// Minimum cut over all perfectly balanced 2-way splits.
    fn exhaustive_min_cut(g: &KnnGraph) -> u64 {
        let n = g.num_vertices();
        let mut best = u64::MAX;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n / 2 {
                continue;
            }
            let part: Vec<u8> = (0..n).map(|v| ((mask >> v) & 1) as u8).collect();
            best = best.min(edge_cut(g, &part));
        }
        best
    }

    #[test]
    fn path_of_ten() {
        let g = path_graph(10);
        assert_eq!(exhaustive_min_cut(&g), 1);
        let tree = recursive_bisect(&g, 1, 7, 1.03).unwrap();
        let part: Vec<u8> = tree.leaf_assignment.iter().map(|&j| (j - 1) as u8).collect();
        assert_eq!(part.iter().filter(|&&p| p == 0).count(), 5);
        assert_eq!(edge_cut(&g, &part), 1);
    }

    #[test]
    fn disconnected_cliques() {
        let g = two_cliques(12);
        let tree = recursive_bisect(&g, 1, 3, 1.03).unwrap();
        let first = tree.leaf_assignment[0];
        assert!(tree.leaf_assignment[..12].iter().all(|&j| j == first));
        assert!(tree.leaf_assignment[12..].iter().all(|&j| j != first));
    }

    #[test]
    fn deterministic_for_seed_and_balanced() {
        let g = path_graph(300);
        let a = recursive_bisect(&g, 4, 11, 1.03).unwrap();
        let b = recursive_bisect(&g, 4, 11, 1.03).unwrap();
        assert_eq!(a, b);
        assert_eq!(check_balance(&a, 1.03), None);
        let mut seen = vec![false; 16];
        for &j in &a.leaf_assignment {
            seen[j as usize - 1] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn every_leaf_nonempty_at_capacity() {
        // exactly 2^h vertices: each leaf must receive one
        let g = path_graph(32);
        let t = recursive_bisect(&g, 5, 1, 1.03).unwrap();
        let mut sorted = t.leaf_assignment.clone();
        sorted.sort();
        assert_eq!(sorted, (1..=32).collect::<Vec<u32>>());
    }

    #[test]
    fn too_many_leaves() {
        let g = path_graph(7);
        assert!(recursive_bisect(&g, 3, 0, 1.03).is_err());
        assert!(recursive_bisect(&g, 0, 0, 1.03).is_err());
    }

    #[test]
    fn side_bound() {
        assert_eq!(max_side_weight(10, 1, 1.03), 5);
        assert_eq!(max_side_weight(7, 1, 1.03), 4);
        assert_eq!(max_side_weight(1000, 1, 1.03), 515);
        assert_eq!(max_side_weight(1024, 512, 1.03), 512);
    }
}
