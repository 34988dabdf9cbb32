//! Reduced multiscale representation: fused subtrees, deleted groups, SDR
//! scores and the group geometry behind the pitch figures.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::SpinDataset;
use crate::model::sdr_score;
use crate::tree::{CountMatrices, Node, PartitionTree};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub node: Node,
    /// 1-based leaves under `node`.
    pub member_leaves: Vec<usize>,
    pub fused_beta: f64,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedRepresentation {
    pub height: u32,
    pub threshold: f64,
    /// Left-to-right over the leaves.
    pub groups: Vec<Group>,
}

impl ReducedRepresentation {
    pub fn active_groups(&self) -> impl Iterator<Item = &Group> {
        self.groups.iter().filter(|g| !g.deleted)
    }

    /// Leaf coefficients implied by the reduction (fused values, zero where
    /// deleted).
    pub fn leaf_beta(&self) -> Vec<f64> {
        let mut beta = vec![0.0; 1 << self.height];
        for g in self.active_groups() {
            for &j in &g.member_leaves {
                beta[j - 1] = g.fused_beta;
            }
        }
        beta
    }
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    hi - lo
}

/// Maximal subtrees whose leaf coefficients lie within `threshold` of each
/// other, each collapsed to its mean; groups whose mean is within
/// `threshold` of zero are deleted.
pub fn extract_reduction(beta_hat: &[f64], tree: &PartitionTree, threshold: f64) -> Result<ReducedRepresentation> {
    if !(threshold >= 0.0) {
        return Err(Error::arg("threshold must be non-negative"));
    }
    if beta_hat.len() != tree.num_leaves() {
        return Err(Error::Shape(format!(
            "{} coefficients for a tree with {} leaves",
            beta_hat.len(),
            tree.num_leaves()
        )));
    }
    let mut groups = Vec::new();
    // fusibility is inherited by descendants, so the first fusible node met
    // top-down is the highest one
    let mut stack = vec![Node::ROOT];
    while let Some(node) = stack.pop() {
        let range = tree.descendant_range(node);
        let vals = &beta_hat[range.clone()];
        if node.depth == tree.height || spread(vals) <= threshold {
            let fused = vals.iter().sum::<f64>() / vals.len() as f64;
            groups.push(Group {
                node,
                member_leaves: range.map(|j| j + 1).collect(),
                fused_beta: fused,
                deleted: fused.abs() <= threshold,
            });
        } else {
            let (l, r) = node.children();
            stack.push(r);
            stack.push(l);
        }
    }
    Ok(ReducedRepresentation {
        height: tree.height,
        threshold,
        groups,
    })
}

/// SDR score `β̂ᵀx_i` of every replicate.
pub fn score_replicates(counts: &CountMatrices, beta_hat: &[f64]) -> Result<Vec<f64>> {
    if beta_hat.len() != counts.m {
        return Err(Error::Shape(format!("{} coefficients for {} leaves", beta_hat.len(), counts.m)));
    }
    let x = counts.x_f64();
    Ok(x.chunks(counts.m.max(1)).take(counts.n).map(|row| sdr_score(row, beta_hat)).collect())
}

/// Scores computed at the group level: group counts times fused values.
pub fn score_replicates_grouped(counts: &CountMatrices, reduction: &ReducedRepresentation) -> Vec<f64> {
    (0..counts.n)
        .map(|i| {
            let row = &counts.x[i * counts.m..(i + 1) * counts.m];
            reduction
                .active_groups()
                .map(|g| g.member_leaves.iter().map(|&j| row[j - 1] as f64).sum::<f64>() * g.fused_beta)
                .sum()
        })
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Monotone-chain convex hull, counter-clockwise from the lowest-leftmost
/// point, without collinear vertices. Fewer than three distinct
/// non-collinear points give a point or a segment.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * p.len());
    for &q in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    let lower = hull.len() + 1;
    for &q in p.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    hull.pop();
    hull
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupGeometry {
    pub node: Node,
    pub fused_beta: f64,
    pub origin_hull: Vec<[f64; 2]>,
    pub dest_hull: Vec<[f64; 2]>,
    pub origin_centroid: [f64; 2],
    pub dest_centroid: [f64; 2],
    pub count: usize,
    /// Either hull has fewer than three vertices.
    pub degenerate: bool,
}

fn centroid(p: &[[f64; 2]]) -> [f64; 2] {
    let k = p.len() as f64;
    [p.iter().map(|v| v[0]).sum::<f64>() / k, p.iter().map(|v| v[1]).sum::<f64>() / k]
}

/// Geometry of every non-deleted group over all primitive objects, or only
/// those of one replicate. Groups without members are skipped.
pub fn group_geometry(
    reduction: &ReducedRepresentation,
    dataset: &SpinDataset,
    tree: &PartitionTree,
    replicate: Option<usize>,
) -> Result<Vec<GroupGeometry>> {
    if tree.leaf_assignment.len() != dataset.pos.len() {
        return Err(Error::Shape(format!(
            "tree assigns {} primitive objects but the dataset has {}",
            tree.leaf_assignment.len(),
            dataset.pos.len()
        )));
    }
    if tree.height != reduction.height {
        return Err(Error::Shape("reduction and tree heights differ".into()));
    }
    let members: Vec<usize> = match replicate {
        Some(i) => dataset
            .replicates
            .get(i)
            .ok_or_else(|| Error::arg(format!("replicate index {i} out of range")))?
            .po_indices
            .clone(),
        None => (0..dataset.pos.len()).collect(),
    };
    let groups: Vec<&Group> = reduction.active_groups().collect();
    Ok(groups
        .par_iter()
        .filter_map(|g| {
            let range = tree.descendant_range(g.node);
            let (orig, dest): (Vec<[f64; 2]>, Vec<[f64; 2]>) = members
                .iter()
                .filter(|&&k| range.contains(&(tree.leaf_assignment[k] as usize - 1)))
                .map(|&k| (dataset.pos[k].origin, dataset.pos[k].destination))
                .unzip();
            if orig.is_empty() {
                return None;
            }
            let origin_hull = convex_hull(&orig);
            let dest_hull = convex_hull(&dest);
            Some(GroupGeometry {
                node: g.node,
                fused_beta: g.fused_beta,
                degenerate: origin_hull.len() < 3 || dest_hull.len() < 3,
                origin_centroid: centroid(&orig),
                dest_centroid: centroid(&dest),
                count: orig.len(),
                origin_hull,
                dest_hull,
            })
        })
        .collect())
}

pub const PITCH_LENGTH: f64 = 120.0;
pub const PITCH_WIDTH: f64 = 80.0;

fn polygon(points: &[[f64; 2]]) -> String {
    points.iter().map(|p| format!("{:.3},{:.3}", p[0], p[1])).collect::<Vec<_>>().join(" ")
}

/// Static pitch figure: translucent origin (blue) and destination (red)
/// hulls, and one arrow per group from origin to destination centroid with
/// stroke width proportional to the group's count. Groups with positive
/// coefficients are drawn solid, negative ones dashed.
pub fn render_svg(geometry: &[GroupGeometry], title: &str) -> String {
    let max_count = geometry.iter().map(|g| g.count).max().unwrap_or(1).max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="-2 -6 {} {}" width="{}" height="{}">"#,
        PITCH_LENGTH + 4.0,
        PITCH_WIDTH + 8.0,
        (PITCH_LENGTH + 4.0) * 6.0,
        (PITCH_WIDTH + 8.0) * 6.0
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    s.push_str(
        r#"<defs><marker id="head" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="black"/></marker></defs>"#,
    );
    s.push('\n');
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{PITCH_LENGTH}" height="{PITCH_WIDTH}" fill="#e8f3e8" stroke="black" stroke-width="0.3"/>"##
    );
    let _ = writeln!(
        s,
        r#"<line x1="{0}" y1="0" x2="{0}" y2="{1}" stroke="black" stroke-width="0.3"/>"#,
        PITCH_LENGTH / 2.0,
        PITCH_WIDTH
    );
    for g in geometry {
        for (hull, colour) in [(&g.origin_hull, "#1f77b4"), (&g.dest_hull, "#d62728")] {
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{colour}" fill-opacity="0.15" stroke="{colour}" stroke-opacity="0.4" stroke-width="0.2"/>"#,
                polygon(hull)
            );
        }
    }
    for g in geometry {
        let width = 0.2 + 1.3 * g.count as f64 / max_count;
        let dash = if g.fused_beta < 0.0 { r#" stroke-dasharray="1,0.6""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="black" stroke-width="{width:.3}"{dash} marker-end="url(#head)"><title>{} beta={:.4} count={}</title></line>"#,
            g.origin_centroid[0], g.origin_centroid[1], g.dest_centroid[0], g.dest_centroid[1], g.node, g.fused_beta, g.count
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Hull vertices as CSV: `depth,pos,kind,vertex,x,y` with `kind` one of
/// `origin` / `destination`.
pub fn write_hull_csv<W: std::io::Write>(geometry: &[GroupGeometry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::arg(format!("csv write failed: {e}"));
    w.write_record(["depth", "pos", "kind", "vertex", "x", "y"]).map_err(err)?;
    for g in geometry {
        for (kind, hull) in [("origin", &g.origin_hull), ("destination", &g.dest_hull)] {
            for (v, p) in hull.iter().enumerate() {
                w.write_record([
                    g.node.depth.to_string(),
                    g.node.pos.to_string(),
                    kind.to_string(),
                    v.to_string(),
                    p[0].to_string(),
                    p[1].to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_coefficients_fuse_at_root() {
        let tree = PartitionTree::canonical(3).unwrap();
        let r = extract_reduction(&[0.7; 8], &tree, 0.005).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].node, Node::ROOT);
        assert!(!r.groups[0].deleted);
    }

    #[test]
    fn four_blocks() {
        let tree = PartitionTree::canonical(5).unwrap();
        let mut beta = vec![1.0; 8];
        beta.extend([0.0; 8]);
        beta.extend([-1.0; 8]);
        beta.extend([0.0; 8]);
        let r = extract_reduction(&beta, &tree, 0.005).unwrap();
        assert_eq!(r.groups.len(), 4);
        assert!(r.groups.iter().all(|g| g.node.depth == 2));
        let deleted: Vec<bool> = r.groups.iter().map(|g| g.deleted).collect();
        assert_eq!(deleted, [false, true, false, true]);
        assert_eq!(r.leaf_beta(), beta);
    }

    #[test]
    fn distinct_coefficients_at_zero_threshold() {
        let tree = PartitionTree::canonical(3).unwrap();
        let beta: Vec<f64> = (0..8).map(|j| 0.1 + j as f64).collect();
        let r = extract_reduction(&beta, &tree, 0.0).unwrap();
        assert_eq!(r.groups.len(), 8);
        assert!(extract_reduction(&beta, &tree, -1.0).is_err());
    }

    #[test]
    fn zero_counts_give_zero_scores() {
        let counts = CountMatrices::from_leaf_counts(2, 3, vec![0; 12]);
        assert_eq!(score_replicates(&counts, &[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn hull_of_square_with_interior() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5], [0.5, 0.0]];
        assert_eq!(convex_hull(&pts), vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        assert_eq!(convex_hull(&[[2.0, 3.0], [2.0, 3.0]]), vec![[2.0, 3.0]]);
        assert_eq!(convex_hull(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).len(), 2);
    }

    #[test]
    fn svg_has_one_arrow_per_group() {
        let g = GroupGeometry {
            node: Node::ROOT,
            fused_beta: 1.0,
            origin_hull: vec![[1.0, 1.0]],
            dest_hull: vec![[5.0, 5.0]],
            origin_centroid: [1.0, 1.0],
            dest_centroid: [5.0, 5.0],
            count: 3,
            degenerate: true,
        };
        let svg = render_svg(&[g.clone(), g], "t<1>");
        assert_eq!(svg.matches("marker-end").count(), 2);
        assert!(svg.contains("t&lt;1&gt;"));
    }
}
