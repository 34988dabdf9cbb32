//! Partition-tree algebra: node indexing, path sets, descendant sets, the
//! node-to-leaf design matrix and count aggregation.
//!
//! Nodes are addressed as `(s, l)` with depth `0 <= s <= h` and a 1-based
//! position `1 <= l <= 2^s`. The children of `(s, l)` are `(s+1, 2l-1)` and
//! `(s+1, 2l)`. Leaves are the depth-`h` nodes and are numbered `1..=m`.
//! Flattened (column) indices follow breadth-first order
//! `(0,1), (1,1), (1,2), (2,1), ...`, so node `(s, l)` sits at `2^s - 1 + l - 1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SpinDataset;

/// A node `(s, l)` of a full binary tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub depth: u32,
    pub pos: u32,
}

impl Node {
    pub const ROOT: Node = Node { depth: 0, pos: 1 };

    pub fn new(depth: u32, pos: u32) -> Self {
        Node { depth, pos }
    }

    /// Breadth-first column index.
    pub fn flat(self) -> usize {
        (1usize << self.depth) - 1 + (self.pos as usize - 1)
    }

    pub fn from_flat(index: usize) -> Self {
        let depth = usize::BITS - 1 - (index + 1).leading_zeros();
        let pos = index + 1 - (1usize << depth) + 1;
        Node {
            depth,
            pos: pos as u32,
        }
    }

    pub fn children(self) -> (Node, Node) {
        (
            Node::new(self.depth + 1, 2 * self.pos - 1),
            Node::new(self.depth + 1, 2 * self.pos),
        )
    }

    pub fn parent(self) -> Option<Node> {
        (self.depth > 0).then(|| Node::new(self.depth - 1, self.pos.div_ceil(2)))
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.depth, self.pos)
    }
}

/// Number of nodes `L = 2^{h+1} - 1` of a full binary tree of height `h`.
pub fn node_count(height: u32) -> usize {
    (1usize << (height + 1)) - 1
}

/// Full binary tree of height `h` with a leaf assignment for every primitive
/// object. The assignment may be empty for purely index-defined trees (the
/// simulation study uses the canonical tree over leaf indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionTree {
    pub height: u32,
    /// 1-based leaf index of each primitive object.
    pub leaf_assignment: Vec<u32>,
}

impl PartitionTree {
    pub fn new(height: u32, leaf_assignment: Vec<u32>) -> Result<Self> {
        if height == 0 || height > 24 {
            return Err(Error::arg(format!("tree height must be in 1..=24, got {height}")));
        }
        let m = 1u32 << height;
        if let Some(bad) = leaf_assignment.iter().find(|&&j| j == 0 || j > m) {
            return Err(Error::arg(format!("leaf index {bad} outside 1..={m}")));
        }
        Ok(PartitionTree {
            height,
            leaf_assignment,
        })
    }

    /// Tree over leaf indices only, with no primitive objects attached.
    pub fn canonical(height: u32) -> Result<Self> {
        Self::new(height, Vec::new())
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.height
    }

    pub fn num_nodes(&self) -> usize {
        node_count(self.height)
    }

    pub fn num_internal(&self) -> usize {
        self.num_leaves() - 1
    }

    pub fn check_node(&self, node: Node) -> Result<()> {
        if node.depth > self.height || node.pos == 0 || node.pos > (1 << node.depth) {
            return Err(Error::arg(format!(
                "node {node} is not in a tree of height {}",
                self.height
            )));
        }
        Ok(())
    }

    /// Root-to-leaf path `A_j` for 1-based leaf `j`.
    pub fn path_set(&self, leaf: usize) -> Result<Vec<Node>> {
        let m = self.num_leaves();
        if leaf == 0 || leaf > m {
            return Err(Error::arg(format!("leaf {leaf} outside 1..={m}")));
        }
        let h = self.height;
        Ok((0..=h)
            .map(|s| Node::new(s, (((leaf - 1) >> (h - s)) + 1) as u32))
            .collect())
    }

    /// Leaves (1-based) under `node`, in increasing order.
    pub fn descendant_set(&self, node: Node) -> Result<Vec<usize>> {
        self.check_node(node)?;
        Ok(self.descendant_range(node).map(|j| j + 1).collect())
    }

    /// 0-based half-open range of leaves under `node` (no validation).
    pub fn descendant_range(&self, node: Node) -> std::ops::Range<usize> {
        let width = 1usize << (self.height - node.depth);
        let start = (node.pos as usize - 1) * width;
        start..start + width
    }

    /// Internal nodes in breadth-first order.
    pub fn internal_nodes(&self) -> impl Iterator<Item = Node> {
        (0..self.num_internal()).map(Node::from_flat)
    }

    /// Sibling pairs `((s+1, 2l-1), (s+1, 2l))` of every internal node, as
    /// flat column indices in breadth-first order of the parent.
    pub fn sibling_pairs(&self) -> Vec<(usize, usize)> {
        self.internal_nodes()
            .map(|p| {
                let (a, b) = p.children();
                (a.flat(), b.flat())
            })
            .collect()
    }

    pub fn design_matrix(&self) -> DesignMatrix {
        DesignMatrix {
            height: self.height,
        }
    }

    /// Leaf and node counts per replicate.
    pub fn aggregate_counts(&self, dataset: &SpinDataset) -> Result<CountMatrices> {
        if self.leaf_assignment.len() != dataset.pos.len() {
            return Err(Error::Shape(format!(
                "tree assigns {} primitive objects but the dataset has {}",
                self.leaf_assignment.len(),
                dataset.pos.len()
            )));
        }
        let n = dataset.replicates.len();
        let m = self.num_leaves();
        let mut x = vec![0u32; n * m];
        for (i, rep) in dataset.replicates.iter().enumerate() {
            for &k in &rep.po_indices {
                let j = self.leaf_assignment[k] as usize - 1;
                x[i * m + j] += 1;
            }
        }
        Ok(CountMatrices::from_leaf_counts(self.height, n, x))
    }
}

/// The `m x L` binary matrix with `beta = D gamma`. Row `j` holds ones on the
/// path set of leaf `j`. Stored implicitly: the structure is fully determined
/// by the height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub height: u32,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        1 << self.height
    }

    pub fn cols(&self) -> usize {
        node_count(self.height)
    }

    /// Column indices of the ones in row `j` (0-based row).
    pub fn row_support(&self, j: usize) -> Vec<usize> {
        let h = self.height;
        (0..=h)
            .map(|s| (1usize << s) - 1 + (j >> (h - s)))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        (0..self.rows())
            .map(|j| {
                let mut row = vec![0u8; self.cols()];
                for c in self.row_support(j) {
                    row[c] = 1;
                }
                row
            })
            .collect()
    }

    /// Whitespace-separated 0/1 rendering, one row per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for row in self.to_dense() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// `beta = D gamma`, by accumulating coefficients down the tree.
    pub fn apply(&self, gamma: &[f64]) -> Vec<f64> {
        let total = self.cols();
        assert_eq!(gamma.len(), total, "gamma length must equal the node count");
        let mut acc = vec![0.0; total];
        acc[0] = gamma[0];
        for idx in 1..total {
            acc[idx] = acc[(idx - 1) / 2] + gamma[idx];
        }
        acc[total - self.rows()..].to_vec()
    }

    /// `D^T v` for a leaf vector `v`: each node receives the sum over its leaves.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        let m = self.rows();
        assert_eq!(v.len(), m, "leaf vector length must equal the leaf count");
        let total = self.cols();
        let mut out = vec![0.0; total];
        out[total - m..].copy_from_slice(v);
        for idx in (0..total - m).rev() {
            out[idx] = out[2 * idx + 1] + out[2 * idx + 2];
        }
        out
    }
}

/// Leaf counts `X` (n x m) and node counts `Z` (n x L), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrices {
    pub n: usize,
    pub m: usize,
    pub num_nodes: usize,
    pub x: Vec<u32>,
    pub z: Vec<u32>,
}

impl CountMatrices {
    pub fn from_leaf_counts(height: u32, n: usize, x: Vec<u32>) -> Self {
        let m = 1usize << height;
        let total = node_count(height);
        assert_eq!(x.len(), n * m);
        let mut z = vec![0u32; n * total];
        for i in 0..n {
            let zi = &mut z[i * total..(i + 1) * total];
            zi[total - m..].copy_from_slice(&x[i * m..(i + 1) * m]);
            for idx in (0..total - m).rev() {
                zi[idx] = zi[2 * idx + 1] + zi[2 * idx + 2];
            }
        }
        CountMatrices {
            n,
            m,
            num_nodes: total,
            x,
            z,
        }
    }

    pub fn x_row(&self, i: usize) -> &[u32] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    pub fn z_row(&self, i: usize) -> &[u32] {
        &self.z[i * self.num_nodes..(i + 1) * self.num_nodes]
    }

    pub fn x_f64(&self) -> Vec<f64> {
        self.x.iter().map(|&v| v as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(h: u32) -> PartitionTree {
        PartitionTree::canonical(h).unwrap()
    }

    #[test]
    fn flat_index_round_trip() {
        for idx in 0..511 {
            assert_eq!(Node::from_flat(idx).flat(), idx);
        }
        assert_eq!(Node::from_flat(0), Node::ROOT);
        assert_eq!(Node::from_flat(2), Node::new(1, 2));
        assert_eq!(Node::new(2, 4).flat(), 6);
    }

    #[test]
    fn path_set_examples() {
        let t = tree(4);
        let expected: Vec<Node> = [(0, 1), (1, 1), (2, 2), (3, 4), (4, 8)]
            .iter()
            .map(|&(s, l)| Node::new(s, l))
            .collect();
        assert_eq!(t.path_set(8).unwrap(), expected);
        assert_eq!(
            tree(1).path_set(1).unwrap(),
            vec![Node::ROOT, Node::new(1, 1)]
        );
        for j in 1..=16 {
            let p = t.path_set(j).unwrap();
            assert_eq!(p.len(), 5);
            assert_eq!(p[0], Node::ROOT);
            assert_eq!(p[4], Node::new(4, j as u32));
        }
        assert!(t.path_set(0).is_err());
        assert!(t.path_set(17).is_err());
    }

    #[test]
    fn descendant_set_examples() {
        let t = tree(4);
        assert_eq!(t.descendant_set(Node::new(2, 4)).unwrap(), vec![13, 14, 15, 16]);
        assert_eq!(t.descendant_set(Node::ROOT).unwrap(), (1..=16).collect::<Vec<_>>());
        assert_eq!(t.descendant_set(Node::new(4, 5)).unwrap(), vec![5]);
        assert!(t.descendant_set(Node::new(2, 5)).is_err());
        assert!(t.descendant_set(Node::new(5, 1)).is_err());
    }

    #[test]
    fn design_matrix_small_and_row_sums() {
        let d = tree(1).design_matrix().to_dense();
        assert_eq!(d, vec![vec![1, 1, 0], vec![1, 0, 1]]);
        for h in 1..=6 {
            let dm = tree(h).design_matrix();
            for row in dm.to_dense() {
                assert_eq!(row.iter().map(|&v| v as u32).sum::<u32>(), h + 1);
                assert_eq!(row[0], 1);
            }
        }
    }

    #[test]
    fn design_rows_match_path_sets() {
        let t = tree(4);
        let d = t.design_matrix();
        for j in 1..=16 {
            let cols: Vec<usize> = t.path_set(j).unwrap().iter().map(|n| n.flat()).collect();
            assert_eq!(d.row_support(j - 1), cols);
        }
    }

    #[test]
    fn apply_and_transpose_match_dense() {
        let d = tree(3).design_matrix();
        let dense = d.to_dense();
        let gamma: Vec<f64> = (0..15).map(|v| (v as f64) * 0.37 - 2.0).collect();
        let beta = d.apply(&gamma);
        for (j, row) in dense.iter().enumerate() {
            let direct: f64 = row.iter().zip(&gamma).map(|(&a, g)| a as f64 * g).sum();
            assert!((beta[j] - direct).abs() < 1e-12);
        }
        let v: Vec<f64> = (0..8).map(|v| v as f64 + 0.5).collect();
        let dt = d.transpose_apply(&v);
        for c in 0..15 {
            let direct: f64 = (0..8).map(|j| dense[j][c] as f64 * v[j]).sum();
            assert!((dt[c] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_single_po() {
        use crate::ingest::{PrimitiveObject, Replicate, SpinDataset};
        let ds = SpinDataset {
            label: "t".into(),
            pos: vec![PrimitiveObject {
                origin: [0.0, 0.0],
                destination: [1.0, 1.0],
                replicate_index: 0,
            }],
            replicates: vec![
                Replicate {
                    id: "a".into(),
                    response: 1.0,
                    exposure: 1.0,
                    po_indices: vec![0],
                },
                Replicate {
                    id: "b".into(),
                    response: 0.0,
                    exposure: 1.0,
                    po_indices: vec![],
                },
            ],
        };
        let t = PartitionTree::new(2, vec![3]).unwrap();
        let c = t.aggregate_counts(&ds).unwrap();
        assert_eq!(c.x_row(0), &[0, 0, 1, 0]);
        assert_eq!(c.x_row(1), &[0, 0, 0, 0]);
        assert!(c.z_row(1).iter().all(|&v| v == 0));
        let path: Vec<usize> = t.path_set(3).unwrap().iter().map(|n| n.flat()).collect();
        for (idx, &v) in c.z_row(0).iter().enumerate() {
            assert_eq!(v, u32::from(path.contains(&idx)));
        }
    }
}
