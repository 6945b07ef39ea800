//! Track construction from pairwise matches and multi-view triangulation.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, Vector2, Vector3};

use crate::geometry::angle_between;
use crate::scene::{ImageId, KeypointIndex, KeypointSet, Observation, Track, ViewGraph};
use crate::{Camera, Pose};

type Node = (ImageId, KeypointIndex);

/// Groups matched keypoints into tracks. Edges are visited by descending match
/// count; a union that would place two keypoints of one image in the same
/// track is skipped.
pub fn build_tracks(graph: &ViewGraph) -> Vec<Vec<Node>> {
    let mut edges: Vec<_> = graph.edges().collect();
    edges.sort_by(|a, b| b.weight().cmp(&a.weight()).then(a.key().cmp(&b.key())));
    let mut id_of: HashMap<Node, usize> = HashMap::new();
    let mut parent: Vec<usize> = Vec::new();
    let mut members: Vec<BTreeMap<ImageId, KeypointIndex>> = Vec::new();
    let mut node = |n: Node, parent: &mut Vec<usize>, members: &mut Vec<BTreeMap<ImageId, KeypointIndex>>| -> usize {
        *id_of.entry(n).or_insert_with(|| {
            parent.push(parent.len());
            members.push(BTreeMap::from([(n.0, n.1)]));
            parent.len() - 1
        })
    };
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in edges {
        for &(a, b) in &e.matches {
            let na = node((e.i, a), &mut parent, &mut members);
            let nb = node((e.j, b), &mut parent, &mut members);
            let (ra, rb) = (find(&mut parent, na), find(&mut parent, nb));
            if ra == rb {
                continue;
            }
            let (big, small) = if members[ra].len() >= members[rb].len() { (ra, rb) } else { (rb, ra) };
            if members[small].keys().any(|img| members[big].contains_key(img)) {
                continue;
            }
            let moved = std::mem::take(&mut members[small]);
            members[big].extend(moved);
            parent[small] = big;
        }
    }
    let mut out: Vec<Vec<Node>> = (0..parent.len())
        .filter(|&k| parent[k] == k && members[k].len() >= 2)
        .map(|k| members[k].iter().map(|(&i, &kp)| (i, kp)).collect())
        .collect();
    out.sort();
    out
}

/// Linear triangulation from normalized image rays and poses.
pub fn triangulate_dlt(views: &[(Pose, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (pose, ray)) in views.iter().enumerate() {
        let p = pose.matrix3x4();
        let (x, y) = (ray.x / ray.z, ray.y / ray.z);
        for c in 0..4 {
            a[(2 * k, c)] = x * p[(2, c)] - p[(0, c)];
            a[(2 * k + 1, c)] = y * p[(2, c)] - p[(1, c)];
        }
    }
    // Smallest eigenvector of A^T A (4x4), cheaper than a tall SVD.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let k = (0..4).min_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]))?;
    let h = eig.eigenvectors.column(k);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Acceptance rule for triangulated points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangulationRule {
    /// Some pair of inlier rays must exceed this angle (radians).
    pub min_angle: f64,
    /// Observations reprojecting further than this (pixels) are dropped.
    pub max_error_px: f64,
}

/// One observation available for triangulation.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub image: ImageId,
    pub keypoint: KeypointIndex,
    pub pose: &'a Pose,
    pub camera: &'a Camera,
    pub pixel: Vector2<f64>,
}

fn reproj_error(v: &View, x: &Vector3<f64>) -> Option<f64> {
    let xc = v.pose.transform(x);
    (xc.z > 1e-9).then(|| (v.camera.pixel_of(&xc) - v.pixel).norm())
}

fn max_ray_angle(views: &[&View], x: &Vector3<f64>) -> f64 {
    let mut best: f64 = 0.0;
    for a in 0..views.len() {
        for b in a + 1..views.len() {
            let ra = x - views[a].pose.center();
            let rb = x - views[b].pose.center();
            best = best.max(angle_between(&ra, &rb));
        }
    }
    best
}

const LEAVE_ONE_OUT_LIMIT: usize = 8;

/// Index whose removal leaves the smallest worst-case error among the rest.
fn leave_one_out(live: &[&View]) -> Option<usize> {
    if live.len() < 3 {
        return None;
    }
    (0..live.len())
        .filter_map(|skip| {
            let rest: Vec<&View> = live.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, v)| *v).collect();
            let rays: Vec<(Pose, Vector3<f64>)> = rest.iter().map(|v| (*v.pose, v.camera.normalize(&v.pixel))).collect();
            let x = triangulate_dlt(&rays)?;
            let worst = rest.iter().map(|v| reproj_error(v, &x).unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
            Some((skip, worst))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Triangulates a track, dropping the worst observation while any error exceeds
/// the rule. Accepts when at least two observations survive, all surviving
/// depths are positive and the widest ray pair exceeds the angle threshold.
pub fn triangulate_views(views: &[View], rule: &TriangulationRule) -> Option<Track> {
    let mut active: Vec<bool> = vec![true; views.len()];
    loop {
        let live: Vec<&View> = views.iter().zip(&active).filter(|(_, a)| **a).map(|(v, _)| v).collect();
        if live.len() < 2 {
            return None;
        }
        let rays: Vec<(Pose, Vector3<f64>)> = live.iter().map(|v| (*v.pose, v.camera.normalize(&v.pixel))).collect();
        let x = triangulate_dlt(&rays)?;
        let errors: Vec<f64> = live.iter().map(|v| reproj_error(v, &x).unwrap_or(f64::INFINITY)).collect();
        let (worst, &worst_err) = errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        if worst_err > rule.max_error_px {
            let drop = if live.len() <= LEAVE_ONE_OUT_LIMIT { leave_one_out(&live).unwrap_or(worst) } else { worst };
            let target = live[drop].image;
            let pos = views.iter().position(|v| v.image == target).expect("present");
            active[pos] = false;
            continue;
        }
        if max_ray_angle(&live, &x) <= rule.min_angle {
            return None;
        }
        let observations = views
            .iter()
            .zip(&active)
            .map(|(v, a)| Observation {
                image: v.image,
                keypoint: v.keypoint,
                inlier: *a,
            })
            .collect();
        return Some(Track { point: x, observations });
    }
}

/// Builds [`View`]s for the registered observations of a track.
pub fn collect_views<'a>(
    observations: &[(ImageId, KeypointIndex)],
    poses: &'a BTreeMap<ImageId, Pose>,
    cameras: &'a BTreeMap<ImageId, Camera>,
    keypoints: &KeypointSet,
) -> Vec<View<'a>> {
    observations
        .iter()
        .filter_map(|&(image, keypoint)| {
            Some(View {
                image,
                keypoint,
                pose: poses.get(&image)?,
                camera: cameras.get(&image)?,
                pixel: *keypoints.get(image, keypoint)?,
            })
        })
        .collect()
}
