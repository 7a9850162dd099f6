//! Density-based hierarchical clustering of 2-D embeddings (the HDBSCAN
//! algorithm): mutual-reachability minimum spanning tree, condensed cluster
//! tree, and excess-of-mass cluster selection.
//!
//! Specialized to the offset-clustering use: points are 2-D, `min_samples`
//! equals `min_cluster_size`, the root is selectable (a lone blob yields one
//! cluster rather than all noise), and every tie is broken by index so the
//! labeling is deterministic. Complexity is O(n^2), which is fine for the
//! desk-scale thing-area inputs this crate targets.

use crate::scalar::Real;

/// Caps 1/distance so duplicate points cannot produce non-finite lambdas.
const LAMBDA_CAP: f64 = 1e300;

/// Clusters `points`; returns one label per point, `0` for noise and
/// `1..=C` for clusters numbered by first member index.
pub(crate) fn cluster<T: Real>(points: &[[T; 2]], min_cluster_size: usize) -> Vec<u32> {
    assert!(min_cluster_size >= 2, "min_cluster_size must be at least 2");
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    if n < min_cluster_size {
        return vec![0; n];
    }
    let pts: Vec<[f64; 2]> = points
        .iter()
        .map(|p| [p[0].to_f64().unwrap(), p[1].to_f64().unwrap()])
        .collect();

    let core = core_distances(&pts, min_cluster_size);
    let edges = mst_edges(&pts, &core);
    let dendrogram = single_linkage(n, edges);
    let condensed = condense(&dendrogram, n, min_cluster_size);
    let selected = select_excess_of_mass(&condensed);
    label_points(&condensed, &selected, n)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dh = a[0] - b[0];
    let dw = a[1] - b[1];
    (dh * dh + dw * dw).sqrt()
}

/// Distance to the k-th nearest other point, k = min_cluster_size.
fn core_distances(pts: &[[f64; 2]], k: usize) -> Vec<f64> {
    let n = pts.len();
    let mut core = vec![0.0; n];
    let mut scratch: Vec<f64> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        for j in 0..n {
            if i != j {
                scratch.push(dist(pts[i], pts[j]));
            }
        }
        let idx = (k - 1).min(scratch.len() - 1);
        scratch.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
        core[i] = scratch[idx];
    }
    core
}

/// Prim's minimum spanning tree under the mutual-reachability distance.
fn mst_edges(pts: &[[f64; 2]], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = pts.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);

    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let mr = dist(pts[current], pts[j]).max(core[current]).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        let mut next_cost = f64::INFINITY;
        for j in 0..n {
            if !in_tree[j] && best[j] < next_cost {
                next_cost = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, next_cost));
        current = next;
    }
    edges
}

struct DendroNode {
    left: usize,
    right: usize,
    lambda: f64, // 1 / merge distance
    size: usize,
}

/// Single-linkage dendrogram over the MST edges. Leaves are `0..n`; internal
/// nodes are `n..2n-1` and store the merge lambda (larger = tighter).
fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<DendroNode> {
    edges.sort_by(|a, b| {
        a.2.partial_cmp(&b.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    // Union-find tracking the dendrogram node currently representing each set.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut nodes: Vec<DendroNode> = Vec::with_capacity(n - 1);

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for (a, b, d) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        debug_assert_ne!(ra, rb);
        let lambda = if d > 1.0 / LAMBDA_CAP {
            1.0 / d
        } else {
            LAMBDA_CAP
        };
        let left = node_of[ra];
        let right = node_of[rb];
        let size_left = if left < n { 1 } else { nodes[left - n].size };
        let size_right = if right < n { 1 } else { nodes[right - n].size };
        nodes.push(DendroNode {
            left,
            right,
            lambda,
            size: size_left + size_right,
        });
        parent[rb] = ra;
        node_of[ra] = n + nodes.len() - 1;
    }
    nodes
}

struct CondensedCluster {
    parent: Option<usize>,
    children: Vec<usize>,
    birth_lambda: f64,
    stability: f64,
    /// Points that exit this cluster individually, with their exit lambda.
    points: Vec<(usize, f64)>,
}

/// Walks the dendrogram top-down, keeping only splits where both sides reach
/// `min_cluster_size`; smaller sides fall out of the current cluster point by
/// point at the split lambda.
fn condense(dendrogram: &[DendroNode], n: usize, min_cluster_size: usize) -> Vec<CondensedCluster> {
    let mut clusters = vec![CondensedCluster {
        parent: None,
        children: Vec::new(),
        birth_lambda: 0.0,
        stability: 0.0,
        points: Vec::new(),
    }];
    if dendrogram.is_empty() {
        // Single point: it exits the root immediately.
        clusters[0].points.push((0, LAMBDA_CAP));
        return clusters;
    }
    let root = n + dendrogram.len() - 1;
    // (dendrogram node, condensed cluster owning it)
    let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
    while let Some((node, cluster)) = stack.pop() {
        if node < n {
            // A bare leaf only reaches here if the tree root is itself a leaf.
            clusters[cluster].points.push((node, LAMBDA_CAP));
            continue;
        }
        let d = &dendrogram[node - n];
        let left_size = if d.left < n {
            1
        } else {
            dendrogram[d.left - n].size
        };
        let right_size = if d.right < n {
            1
        } else {
            dendrogram[d.right - n].size
        };
        let birth = clusters[cluster].birth_lambda;

        if left_size >= min_cluster_size && right_size >= min_cluster_size {
            // Real split: the cluster dies here; every remaining point leaves.
            clusters[cluster].stability += d.size as f64 * (d.lambda - birth);
            for &child in &[d.left, d.right] {
                clusters.push(CondensedCluster {
                    parent: Some(cluster),
                    children: Vec::new(),
                    birth_lambda: d.lambda,
                    stability: 0.0,
                    points: Vec::new(),
                });
                let child_cluster = clusters.len() - 1;
                clusters[cluster].children.push(child_cluster);
                stack.push((child, child_cluster));
            }
        } else {
            // Spurious split: points of any undersized side fall out here.
            for (&side, &size) in [(&d.left, &left_size), (&d.right, &right_size)] {
                if size < min_cluster_size {
                    for leaf in collect_leaves(dendrogram, n, side) {
                        clusters[cluster].points.push((leaf, d.lambda));
                        clusters[cluster].stability += d.lambda - birth;
                    }
                } else {
                    stack.push((side, cluster));
                }
            }
        }
    }
    clusters
}

fn collect_leaves(dendrogram: &[DendroNode], n: usize, node: usize) -> Vec<usize> {
    let mut leaves = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            leaves.push(x);
        } else {
            stack.push(dendrogram[x - n].left);
            stack.push(dendrogram[x - n].right);
        }
    }
    leaves
}

/// Excess-of-mass selection: a cluster is kept when its own stability is at
/// least the total selected stability of its children. The root may be
/// selected, so a single coherent blob yields one cluster.
fn select_excess_of_mass(clusters: &[CondensedCluster]) -> Vec<bool> {
    let m = clusters.len();
    let mut selected = vec![false; m];
    let mut subtree_stability = vec![0.0; m];
    // Children always have larger indices, so reverse order is bottom-up.
    for i in (0..m).rev() {
        let child_sum: f64 = clusters[i]
            .children
            .iter()
            .map(|&c| subtree_stability[c])
            .sum();
        if clusters[i].children.is_empty() || clusters[i].stability >= child_sum {
            selected[i] = true;
            subtree_stability[i] = clusters[i].stability;
        } else {
            subtree_stability[i] = child_sum;
        }
    }
    // Keep only the shallowest selected cluster on each root-to-leaf path.
    let mut shadowed = vec![false; m];
    for i in 0..m {
        if let Some(p) = clusters[i].parent {
            shadowed[i] = shadowed[p] || selected[p];
        }
        if shadowed[i] {
            selected[i] = false;
        }
    }
    selected
}

fn label_points(clusters: &[CondensedCluster], selected: &[bool], n: usize) -> Vec<u32> {
    // Map each condensed cluster to its selected ancestor-or-self, if any.
    let mut owner: Vec<Option<usize>> = vec![None; clusters.len()];
    for i in 0..clusters.len() {
        if selected[i] {
            owner[i] = Some(i);
        } else if let Some(p) = clusters[i].parent {
            owner[i] = owner[p];
        }
    }
    let mut raw = vec![None; n];
    for (i, cluster) in clusters.iter().enumerate() {
        for &(point, _) in &cluster.points {
            raw[point] = owner[i];
        }
    }
    // Number clusters by their first member point.
    let mut ids: Vec<Option<u32>> = vec![None; clusters.len()];
    let mut next = 1u32;
    let mut labels = vec![0u32; n];
    for (point, &own) in raw.iter().enumerate() {
        if let Some(c) = own {
            let id = *ids[c].get_or_insert_with(|| {
                let v = next;
                next += 1;
                v
            });
            labels[point] = id;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::rng::SplitMix64;

    fn blob(rng: &mut SplitMix64, center: [f64; 2], sigma: f64, count: usize) -> Vec<[f64; 2]> {
        (0..count)
            .map(|_| {
                [
                    center[0] + sigma * rng.next_normal(),
                    center[1] + sigma * rng.next_normal(),
                ]
            })
            .collect()
    }

    #[test]
    fn empty_input_gives_no_labels() {
        assert!(cluster::<f64>(&[], 5).is_empty());
    }

    #[test]
    fn fewer_points_than_min_cluster_size_are_noise() {
        let pts = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert_eq!(cluster(&pts, 5), vec![0, 0, 0]);
    }

    #[test]
    fn two_blobs_form_two_clusters() {
        let mut rng = SplitMix64::new(1);
        let mut pts = blob(&mut rng, [10.0, 10.0], 0.5, 200);
        pts.extend(blob(&mut rng, [40.0, 40.0], 0.5, 200));
        let labels = cluster(&pts, 10);
        let first = labels[0];
        let second = labels[200];
        assert_ne!(first, 0);
        assert_ne!(second, 0);
        assert_ne!(first, second);
        let agree = labels[..200].iter().filter(|&&l| l == first).count()
            + labels[200..].iter().filter(|&&l| l == second).count();
        assert!(agree as f64 >= 0.99 * 400.0);
    }

    #[test]
    fn single_blob_forms_one_cluster() {
        let mut rng = SplitMix64::new(2);
        let pts = blob(&mut rng, [5.0, 5.0], 0.5, 150);
        let labels = cluster(&pts, 10);
        let cluster_id = labels[0];
        assert_ne!(cluster_id, 0);
        let members = labels.iter().filter(|&&l| l == cluster_id).count();
        assert!(members as f64 >= 0.99 * 150.0);
    }

    #[test]
    fn labels_are_deterministic() {
        let mut rng = SplitMix64::new(3);
        let mut pts = blob(&mut rng, [0.0, 0.0], 1.0, 60);
        pts.extend(blob(&mut rng, [30.0, 0.0], 1.0, 60));
        let a = cluster(&pts, 8);
        let b = cluster(&pts, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_points_do_not_break_clustering() {
        let mut pts = vec![[1.0, 1.0]; 30];
        pts.extend(vec![[9.0, 9.0]; 30]);
        let labels = cluster(&pts, 5);
        assert_ne!(labels[0], labels[30]);
        assert!(labels.iter().all(|&l| l != 0));
    }
}
