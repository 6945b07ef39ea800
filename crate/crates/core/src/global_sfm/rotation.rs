use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::angular_distance;
use crate::scene::{EdgeSource, ImageId, TwoViewEdge, ViewGraph};
use crate::{Result, Rotation, SfmError};

/// Settings for robust rotation averaging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationAveragingOptions {
    /// Random spanning trees tried besides the maximum-weight tree.
    pub spanning_trees: usize,
    /// Edges within this angle (radians) count as consistent with a tree.
    pub consistency_threshold: f64,
    /// Iterations with L1 weights before switching to Cauchy weights.
    pub l1_iterations: usize,
    pub max_iterations: usize,
    /// Cauchy scale in radians.
    pub cauchy_scale: f64,
    pub seed: u64,
}

impl Default for RotationAveragingOptions {
    fn default() -> Self {
        RotationAveragingOptions {
            spanning_trees: 20,
            consistency_threshold: 5f64.to_radians(),
            l1_iterations: 5,
            max_iterations: 40,
            cauchy_scale: 2f64.to_radians(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotationSolution {
    /// Absolute rotations of the largest connected component.
    pub rotations: BTreeMap<ImageId, Rotation>,
    /// Images outside the largest component.
    pub unregistered: Vec<ImageId>,
    /// Final robust weight of each edge, divided by the largest weight.
    pub edge_weights: BTreeMap<(ImageId, ImageId), f64>,
    pub iterations: usize,
}

/// Angle of `R_ij^T R_j R_i^T`.
pub fn rotation_discrepancy(edge: &TwoViewEdge, ri: &Rotation, rj: &Rotation) -> f64 {
    angular_distance(&edge.rotation, &(*rj * ri.inverse()))
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.0[ra.max(rb)] = ra.min(rb);
        true
    }
}

fn kruskal(n: usize, edges: &[(usize, usize)], order: &[usize]) -> Vec<usize> {
    let mut ds = DisjointSet((0..n).collect());
    order.iter().copied().filter(|&e| ds.union(edges[e].0, edges[e].1)).collect()
}

/// Propagates rotations from node 0 along the tree edges.
fn propagate(n: usize, pairs: &[(usize, usize)], rel: &[Rotation], tree: &[usize]) -> Vec<Rotation> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &e in tree {
        adj[pairs[e].0].push(e);
        adj[pairs[e].1].push(e);
    }
    let mut out: Vec<Option<Rotation>> = vec![None; n];
    out[0] = Some(Rotation::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(a) = queue.pop_front() {
        let ra = out[a].expect("visited");
        for &e in &adj[a] {
            let (i, j) = pairs[e];
            let (b, rb) = if i == a { (j, rel[e] * ra) } else { (i, rel[e].inverse() * ra) };
            if out[b].is_none() {
                out[b] = Some(rb);
                queue.push_back(b);
            }
        }
    }
    out.into_iter().map(|r| r.expect("tree spans component")).collect()
}

/// Robust rotation averaging. Initializes from the spanning tree (maximum
/// weight, or one of several random ones) agreeing with the most edges, then
/// runs iteratively reweighted Gauss-Newton on the tangent residuals
/// `log(R_ij^T R_j R_i^T)`. The smallest image id is held at the identity.
pub fn rotation_averaging(graph: &ViewGraph, options: &RotationAveragingOptions) -> Result<RotationSolution> {
    if graph.num_images() == 0 {
        return Err(SfmError::EmptyGraph);
    }
    let components = graph.components();
    let nodes: Vec<ImageId> = components[0].iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let unregistered: Vec<ImageId> = components[1..].iter().flatten().copied().collect();
    let index: HashMap<ImageId, usize> = nodes.iter().enumerate().map(|(k, id)| (*id, k)).collect();
    let edges: Vec<&TwoViewEdge> = graph.edges().filter(|e| index.contains_key(&e.i)).collect();
    let pairs: Vec<(usize, usize)> = edges.iter().map(|e| (index[&e.i], index[&e.j])).collect();
    let rel: Vec<Rotation> = edges.iter().map(|e| e.rotation).collect();
    let n = nodes.len();

    let consistent = |rot: &[Rotation]| {
        pairs
            .iter()
            .zip(&rel)
            .filter(|((i, j), r)| angular_distance(r, &(rot[*j] * rot[*i].inverse())) < options.consistency_threshold)
            .count()
    };
    let support = cycle_support(n, &pairs, &rel, options.consistency_threshold);
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| {
        let wa = (support[a], edge_strength(edges[a]));
        let wb = (support[b], edge_strength(edges[b]));
        wb.cmp(&wa).then(pairs[a].cmp(&pairs[b]))
    });
    let strength: Vec<f64> = edges.iter().map(|e| edge_strength(e) as f64).collect();
    let mut best = grow(n, &pairs, &rel, &support, &strength, options.consistency_threshold);
    let mut best_count = consistent(&best);
    let tree = propagate(n, &pairs, &rel, &kruskal(n, &pairs, &order));
    let tree_count = consistent(&tree);
    if tree_count > best_count {
        best = tree;
        best_count = tree_count;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    for _ in 0..options.spanning_trees {
        let keys: Vec<f64> = (0..edges.len()).map(|_| rng.random::<f64>()).collect();
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        let cand = propagate(n, &pairs, &rel, &kruskal(n, &pairs, &order));
        let count = consistent(&cand);
        if count > best_count {
            best = cand;
            best_count = count;
        }
    }

    let mut rot = best;
    let mut weights = vec![1.0; edges.len()];
    let mut iterations = 0;
    for iter in 0..options.max_iterations {
        iterations = iter + 1;
        let residuals: Vec<Vector3<f64>> = pairs
            .iter()
            .zip(&rel)
            .map(|(&(i, j), r)| (r.inverse() * rot[j] * rot[i].inverse()).log())
            .collect();
        for (w, e) in weights.iter_mut().zip(&residuals) {
            let a = e.norm();
            *w = if iter < options.l1_iterations {
                1.0 / a.max(1e-6)
            } else {
                1.0 / (1.0 + (a / options.cauchy_scale).powi(2))
            };
        }
        if n == 1 {
            break;
        }
        let dim = 3 * (n - 1);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (e, (&(i, j), r)) in pairs.iter().zip(&rel).enumerate() {
            let rt = r.matrix().transpose();
            let a = rot[j] * rot[i].inverse();
            let jj: Matrix3<f64> = rt;
            let ji: Matrix3<f64> = -rt * a.matrix();
            let blocks = [(i, ji), (j, jj)];
            let w = weights[e];
            for &(p, jp) in &blocks {
                if p == 0 {
                    continue;
                }
                let rp = 3 * (p - 1);
                let gp = jp.transpose() * residuals[e] * w;
                for k in 0..3 {
                    g[rp + k] += gp[k];
                }
                for &(q, jq) in &blocks {
                    if q == 0 {
                        continue;
                    }
                    let rq = 3 * (q - 1);
                    let hb = jp.transpose() * jq * w;
                    h.view_mut((rp, rq), (3, 3)).add_assign(&hb);
                }
            }
        }
        for k in 0..dim {
            h[(k, k)] += 1e-12;
        }
        let Some(chol) = h.cholesky() else {
            return Err(SfmError::Degenerate("rotation normal equations are singular".into()));
        };
        let step = chol.solve(&(-g));
        for p in 1..n {
            let d = Vector3::new(step[3 * (p - 1)], step[3 * (p - 1) + 1], step[3 * (p - 1) + 2]);
            rot[p] = Rotation::exp(&d) * rot[p];
        }
        if step.amax() < 1e-12 {
            break;
        }
    }
    let max_w = weights.iter().copied().fold(0.0, f64::max);
    let edge_weights = edges
        .iter()
        .zip(&weights)
        .map(|(e, w)| (e.key(), if max_w > 0.0 { w / max_w } else { 1.0 }))
        .collect();
    Ok(RotationSolution {
        rotations: nodes.iter().copied().zip(rot).collect(),
        unregistered,
        edge_weights,
        iterations,
    })
}

/// Greedy registration: repeatedly adds the node whose estimates from already
/// placed neighbors agree the most, breaking ties by cycle support and weight.
fn grow(n: usize, pairs: &[(usize, usize)], rel: &[Rotation], support: &[usize], strength: &[f64], threshold: f64) -> Vec<Rotation> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j)) in pairs.iter().enumerate() {
        adj[i].push(e);
        adj[j].push(e);
    }
    let estimate = |e: usize, from: usize, r_from: &Rotation| -> Rotation {
        if pairs[e].0 == from {
            rel[e] * *r_from
        } else {
            rel[e].inverse() * *r_from
        }
    };
    type Score = (usize, usize, f64);
    let better = |a: &Score, b: &Score| a.0.cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)).is_gt();
    let mut rot: Vec<Option<Rotation>> = vec![None; n];
    let evaluate = |k: usize, rot: &[Option<Rotation>]| -> Option<(Score, Rotation)> {
        let ests: Vec<(Rotation, usize, f64)> = adj[k]
            .iter()
            .filter_map(|&e| {
                let other = if pairs[e].0 == k { pairs[e].1 } else { pairs[e].0 };
                rot[other].map(|r| (estimate(e, other, &r), support[e], strength[e]))
            })
            .collect();
        let mut best: Option<(Score, Rotation)> = None;
        for (r, _, _) in &ests {
            let mut score: Score = (0, 0, 0.0);
            for (q, sup, w) in &ests {
                if angular_distance(r, q) < threshold {
                    score.0 += 1;
                    score.1 += sup;
                    score.2 += w;
                }
            }
            if best.as_ref().is_none_or(|(b, _)| better(&score, b)) {
                best = Some((score, *r));
            }
        }
        best
    };
    let start = (0..n)
        .max_by(|&a, &b| {
            let sa: usize = adj[a].iter().map(|&e| support[e]).sum();
            let sb: usize = adj[b].iter().map(|&e| support[e]).sum();
            sa.cmp(&sb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    rot[start] = Some(Rotation::identity());
    let mut pending: BTreeMap<usize, (Score, Rotation)> = BTreeMap::new();
    let refresh = |node: usize, rot: &[Option<Rotation>], pending: &mut BTreeMap<usize, (Score, Rotation)>| {
        for &e in &adj[node] {
            let other = if pairs[e].0 == node { pairs[e].1 } else { pairs[e].0 };
            if rot[other].is_none() {
                if let Some(v) = evaluate(other, rot) {
                    pending.insert(other, v);
                }
            }
        }
    };
    refresh(start, &rot, &mut pending);
    while !pending.is_empty() {
        let mut pick: Option<(usize, Score)> = None;
        for (&k, (score, _)) in &pending {
            if pick.as_ref().is_none_or(|(_, b)| better(score, b)) {
                pick = Some((k, *score));
            }
        }
        let (k, _) = pick.expect("non-empty");
        let (_, r) = pending.remove(&k).expect("present");
        rot[k] = Some(r);
        refresh(k, &rot, &mut pending);
    }
    let g = rot[0].expect("connected").inverse();
    rot.into_iter().map(|r| r.expect("connected") * g).collect()
}

/// Number of 3-cycles through each edge whose composed rotation is within
/// `threshold` of the identity.
fn cycle_support(n: usize, pairs: &[(usize, usize)], rel: &[Rotation], threshold: f64) -> Vec<usize> {
    let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(i, j)) in pairs.iter().enumerate() {
        lookup.insert((i, j), e);
        adj[i].push(j);
        adj[j].push(i);
    }
    // Rotation taking frame a to frame b along the edge between them.
    let step = |a: usize, b: usize| -> Rotation {
        match lookup.get(&(a, b)) {
            Some(&e) => rel[e],
            None => rel[lookup[&(b, a)]].inverse(),
        }
    };
    pairs
        .iter()
        .map(|&(i, j)| {
            adj[i]
                .iter()
                .filter(|&&k| k != j && (lookup.contains_key(&(j, k)) || lookup.contains_key(&(k, j))))
                .filter(|&&k| (step(k, i) * step(j, k) * step(i, j)).angle() < threshold)
                .count()
        })
        .collect()
}

fn edge_strength(edge: &TwoViewEdge) -> usize {
    match edge.source {
        EdgeSource::Visual => edge.weight(),
        EdgeSource::Sensor => usize::MAX,
    }
}

/// Removes visual edges whose rotation disagrees with the averaged rotations by
/// more than `threshold` radians, or that touch an image without a rotation.
pub fn filter_edges_by_rotation(graph: &ViewGraph, rotations: &BTreeMap<ImageId, Rotation>, threshold: f64) -> ViewGraph {
    let mut out = graph.clone();
    out.retain_edges(|e| {
        if e.source == EdgeSource::Sensor {
            return true;
        }
        match (rotations.get(&e.i), rotations.get(&e.j)) {
            (Some(ri), Some(rj)) => rotation_discrepancy(e, ri, rj) <= threshold,
            _ => false,
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_pose_graph, oracles, PoseGraphSpec};
    use crate::Camera;

    fn max_error(sol: &BTreeMap<ImageId, Rotation>, truth: &BTreeMap<ImageId, Rotation>) -> f64 {
        // Compare in the gauge of the first image.
        let first = *sol.keys().next().unwrap();
        let g = truth[&first];
        sol.iter()
            .map(|(id, r)| angular_distance(&(*r * g), &truth[id]))
            .fold(0.0, f64::max)
    }

    fn cam() -> Camera {
        Camera::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn rel_edge(i: ImageId, j: ImageId, r: Rotation) -> TwoViewEdge {
        TwoViewEdge::new(i, j, r, Vector3::x(), vec![(0, 0); 20], EdgeSource::Visual).unwrap()
    }

    #[test]
    fn two_nodes_are_exact() {
        let mut g = ViewGraph::new();
        g.add_image(0, cam());
        g.add_image(1, cam());
        let r01 = Rotation::exp(&Vector3::new(0.1, -0.2, 0.3));
        g.insert_edge(rel_edge(0, 1, r01)).unwrap();
        let sol = rotation_averaging(&g, &Default::default()).unwrap();
        assert!(angular_distance(&sol.rotations[&0], &Rotation::identity()) < 1e-12);
        assert!(angular_distance(&sol.rotations[&1], &r01) < 1e-12);
    }

    fn cycle(outlier: bool) -> (ViewGraph, BTreeMap<ImageId, Rotation>) {
        let truth: BTreeMap<ImageId, Rotation> = (0..4)
            .map(|k| (k, Rotation::exp(&Vector3::new(0.3 * k as f64, -0.1 * k as f64, 0.2))))
            .collect();
        let mut g = ViewGraph::new();
        for k in 0..4 {
            g.add_image(k, cam());
        }
        let mut pairs = vec![(0, 1), (1, 2), (2, 3), (0, 3)];
        if outlier {
            pairs.extend([(0, 2), (1, 3)]);
        }
        for (i, j) in pairs {
            let mut r = truth[&j] * truth[&i].inverse();
            if outlier && (i, j) == (0, 2) {
                r = Rotation::exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)) * r;
            }
            g.insert_edge(rel_edge(i, j, r)).unwrap();
        }
        (g, truth)
    }

    #[test]
    fn exact_cycle_matches_tree_oracle() {
        let (g, truth) = cycle(false);
        let sol = rotation_averaging(&g, &Default::default()).unwrap();
        assert!(max_error(&sol.rotations, &truth) < 1e-6);
        let oracle = oracles::spanning_tree_rotations(&g).unwrap();
        for (id, r) in &oracle {
            assert!(angular_distance(r, &sol.rotations[id]) < 1e-6);
        }
    }

    #[test]
    fn planted_outlier_is_suppressed() {
        let (g, truth) = cycle(true);
        let sol = rotation_averaging(&g, &Default::default()).unwrap();
        assert!(max_error(&sol.rotations, &truth) < 0.5f64.to_radians());
        let mut clean = g.clone();
        clean.remove_edge(0, 2);
        let oracle = oracles::spanning_tree_rotations(&clean).unwrap();
        for (id, r) in &oracle {
            assert!(angular_distance(r, &sol.rotations[id]) < 0.5f64.to_radians());
        }
        assert!(sol.edge_weights[&(0, 2)] < 0.1);
    }

    #[test]
    fn disconnected_nodes_are_reported() {
        let (mut g, _) = cycle(false);
        g.add_image(9, cam());
        let sol = rotation_averaging(&g, &Default::default()).unwrap();
        assert_eq!(sol.unregistered, vec![9]);
        assert!(!sol.rotations.contains_key(&9));
        assert!(rotation_averaging(&ViewGraph::new(), &Default::default()).is_err());
    }

    #[test]
    fn noisy_graph_with_outliers() {
        let spec = PoseGraphSpec {
            num_cameras: 60,
            ring_hops: 4,
            outlier_fraction: 0.3,
            rotation_noise_deg: 0.2,
            ..Default::default()
        };
        let pg = generate_pose_graph(&spec).unwrap();
        let truth: BTreeMap<_, _> = pg.poses.iter().map(|(k, p)| (*k, p.rotation)).collect();
        let sol = rotation_averaging(&pg.graph, &Default::default()).unwrap();
        let first = *sol.rotations.keys().next().unwrap();
        let mean = sol
            .rotations
            .iter()
            .map(|(id, r)| angular_distance(&(*r * truth[&first]), &truth[id]))
            .sum::<f64>()
            / sol.rotations.len() as f64;
        assert!(mean < 0.5f64.to_radians(), "mean error {}", mean.to_degrees());
        let filtered = filter_edges_by_rotation(&pg.graph, &sol.rotations, 5f64.to_radians());
        let caught = pg
            .outlier_edges
            .iter()
            .filter(|k| filtered.edge(k.0, k.1).is_none() || sol.edge_weights[k] < 0.1)
            .count();
        assert!(caught as f64 >= 0.95 * pg.outlier_edges.len() as f64);
    }

    #[test]
    fn filter_removes_exactly_the_perturbed_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let truth: BTreeMap<ImageId, Rotation> = (0..n)
            .map(|k| (k, Rotation::exp(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))))
            .collect();
        let mut g = ViewGraph::new();
        for k in 0..n {
            g.add_image(k, cam());
        }
        let mut perturbed = BTreeSet::new();
        while g.num_edges() < 100 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a == b || g.edge(a, b).is_some() {
                continue;
            }
            let (i, j) = (a.min(b), a.max(b));
            let mut r = truth[&j] * truth[&i].inverse();
            if perturbed.len() < 20 {
                let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                r = Rotation::exp(&(axis * 8f64.to_radians())) * r;
                perturbed.insert((i, j));
            }
            g.insert_edge(rel_edge(i, j, r)).unwrap();
        }
        let filtered = filter_edges_by_rotation(&g, &truth, 5f64.to_radians());
        let removed: BTreeSet<_> = g.edges().map(|e| e.key()).filter(|k| filtered.edge(k.0, k.1).is_none()).collect();
        assert_eq!(removed, perturbed);
        let twice = filter_edges_by_rotation(&filtered, &truth, 5f64.to_radians());
        assert_eq!(twice.num_edges(), filtered.num_edges());
    }
}
