use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinlets::ingest::{PrimitiveObject, Replicate, SpinDataset};
use spinlets::reduction::{convex_hull, extract_reduction, group_geometry, score_replicates, score_replicates_grouped};
use spinlets::tree::{CountMatrices, Node, PartitionTree};

/// Highest nodes whose leaves span at most `thr`, by checking every node.
fn brute_groups(beta: &[f64], tree: &PartitionTree, thr: f64) -> Vec<Node> {
    let fusible = |n: Node| {
        let r = tree.descendant_range(n);
        let v = &beta[r];
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min) <= thr
    };
    let mut out = Vec::new();
    for flat in 0..tree.num_nodes() {
        let n = Node::from_flat(flat);
        let parent_fusible = std::iter::successors(n.parent(), |p| p.parent()).any(fusible);
        if fusible(n) && !parent_fusible {
            out.push(n);
        }
    }
    out.sort_by_key(|n| tree.descendant_range(*n).start);
    out
}

#[test]
fn perturbed_leaf_splits_along_its_path() {
    let tree = PartitionTree::canonical(4).unwrap();
    for leaf in 0..16 {
        let mut beta = vec![0.4; 16];
        beta[leaf] += 2.0 * 0.005;
        let r = extract_reduction(&beta, &tree, 0.005).unwrap();
        let nodes: Vec<Node> = r.groups.iter().map(|g| g.node).collect();
        assert_eq!(nodes, brute_groups(&beta, &tree, 0.005));
        // the perturbed leaf stands alone, and its path's siblings are whole groups
        assert_eq!(nodes.len(), 5);
        assert!(r.groups.iter().any(|g| g.member_leaves == vec![leaf + 1]));
    }
}

/// Extreme points by brute force: a point is a hull vertex unless it lies in
/// a triangle of three others or strictly between two others on a segment.
fn brute_hull_vertices(p: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut pts = p.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    let n = pts.len();
    let mut out = Vec::new();
    'outer: for i in 0..n {
        for a in 0..n {
            for b in 0..n {
                if a == i || b == i || a == b {
                    continue;
                }
                // on the open segment a-b
                if cross(pts[a], pts[b], pts[i]) == 0.0 {
                    let d = (pts[i][0] - pts[a][0]) * (pts[b][0] - pts[a][0]) + (pts[i][1] - pts[a][1]) * (pts[b][1] - pts[a][1]);
                    let len = (pts[b][0] - pts[a][0]).powi(2) + (pts[b][1] - pts[a][1]).powi(2);
                    if d > 0.0 && d < len {
                        continue 'outer;
                    }
                }
                for c in 0..n {
                    if c == i || c == a || c == b {
                        continue;
                    }
                    let (d1, d2, d3) = (cross(pts[a], pts[b], pts[i]), cross(pts[b], pts[c], pts[i]), cross(pts[c], pts[a], pts[i]));
                    if (d1 > 0.0 && d2 > 0.0 && d3 > 0.0) || (d1 < 0.0 && d2 < 0.0 && d3 < 0.0) {
                        continue 'outer;
                    }
                }
            }
        }
        out.push(pts[i]);
    }
    out
}

#[test]
fn hull_matches_extreme_point_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let pts: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(0.0..120.0f64).round(), rng.random_range(0.0..80.0f64).round()])
            .collect();
        let mut hull = convex_hull(&pts);
        let mut oracle = brute_hull_vertices(&pts);
        let key = |a: &[f64; 2], b: &[f64; 2]| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]));
        hull.sort_by(key);
        oracle.sort_by(key);
        assert_eq!(hull, oracle);
    }
}

fn square_dataset() -> (SpinDataset, PartitionTree) {
    let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let mut pos: Vec<PrimitiveObject> = corners
        .iter()
        .map(|&c| PrimitiveObject {
            origin: c,
            destination: [c[0] + 10.0, c[1] + 5.0],
            replicate_index: 0,
        })
        .collect();
    pos.push(PrimitiveObject {
        origin: [50.0, 50.0],
        destination: [60.0, 40.0],
        replicate_index: 0,
    });
    let ds = SpinDataset {
        label: "square".into(),
        pos,
        replicates: vec![Replicate {
            id: "r".into(),
            response: 1.0,
            exposure: 1.0,
            po_indices: (0..5).collect(),
        }],
    };
    // the four corners in leaf 1, the lone pass in leaf 2
    let tree = PartitionTree::new(1, vec![1, 1, 1, 1, 2]).unwrap();
    (ds, tree)
}

#[test]
fn square_and_single_pass_geometry() {
    let (ds, tree) = square_dataset();
    let red = extract_reduction(&[1.0, -1.0], &tree, 0.005).unwrap();
    let geo = group_geometry(&red, &ds, &tree, None).unwrap();
    assert_eq!(geo.len(), 2);
    assert_eq!(geo[0].origin_hull, vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
    assert_eq!(geo[0].origin_centroid, [0.5, 0.5]);
    assert_eq!(geo[0].count, 4);
    assert!(!geo[0].degenerate);
    assert_eq!(geo[1].origin_hull, vec![[50.0, 50.0]]);
    assert_eq!(geo[1].dest_hull, vec![[60.0, 40.0]]);
    assert!(geo[1].degenerate);
    // a deleted group has no geometry
    let red = extract_reduction(&[1.0, 0.001], &tree, 0.005).unwrap();
    assert_eq!(group_geometry(&red, &ds, &tree, None).unwrap().len(), 1);
}

proptest! {
    #[test]
    fn groups_match_brute_force(raw in prop::collection::vec(0u8..4, 16), thr in 0.0f64..0.6) {
        let beta: Vec<f64> = raw.iter().map(|&v| v as f64 * 0.25 - 0.25).collect();
        let tree = PartitionTree::canonical(4).unwrap();
        let r = extract_reduction(&beta, &tree, thr).unwrap();
        let nodes: Vec<Node> = r.groups.iter().map(|g| g.node).collect();
        prop_assert_eq!(&nodes, &brute_groups(&beta, &tree, thr));
        // leaves covered exactly once, contiguously
        let leaves: Vec<usize> = r.groups.iter().flat_map(|g| g.member_leaves.clone()).collect();
        prop_assert_eq!(leaves, (1..=16).collect::<Vec<_>>());
        for g in &r.groups {
            prop_assert_eq!(g.deleted, g.fused_beta.abs() <= thr);
        }
    }

    #[test]
    fn group_count_monotone_in_threshold(beta in prop::collection::vec(-1.0f64..1.0, 8), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let tree = PartitionTree::canonical(3).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let g_lo = extract_reduction(&beta, &tree, lo).unwrap().groups.len();
        let g_hi = extract_reduction(&beta, &tree, hi).unwrap().groups.len();
        prop_assert!(g_hi <= g_lo);
    }

    #[test]
    fn grouped_scores_equal_leaf_scores(vals in prop::collection::vec(-2i32..3, 4), counts in prop::collection::vec(0u32..9, 3 * 8)) {
        // piecewise constant on pairs of leaves: exactly fused at threshold 0
        let beta: Vec<f64> = vals.iter().flat_map(|&v| [v as f64 * 0.5; 2]).collect();
        let tree = PartitionTree::canonical(3).unwrap();
        let red = extract_reduction(&beta, &tree, 0.0).unwrap();
        let cm = CountMatrices::from_leaf_counts(3, 3, counts);
        prop_assert_eq!(score_replicates(&cm, &beta).unwrap(), score_replicates_grouped(&cm, &red));
    }
}

#[test]
fn duplicate_rows_duplicate_scores() {
    let cm = CountMatrices::from_leaf_counts(1, 2, vec![3, 1, 3, 1]);
    let s = score_replicates(&cm, &[0.5, -2.0]).unwrap();
    assert_eq!(s, vec![-0.5, -0.5]);
}
