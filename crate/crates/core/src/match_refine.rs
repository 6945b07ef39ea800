//! Match filtering with epipolar geometry recovered from reconstructed poses.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{relative_pose, skew};
use crate::scene::{EdgeSource, ImageId, KeypointSet, TwoViewEdge, ViewGraph};
use crate::{Camera, Pose, Result, SfmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchRefineConfig {
    /// Largest accepted symmetric epipolar distance, pixels.
    pub max_epipolar_px: f64,
    /// Visual edges with fewer surviving matches are removed.
    pub min_edge_inliers: usize,
}

impl Default for MatchRefineConfig {
    fn default() -> Self {
        MatchRefineConfig {
            max_epipolar_px: 4.0,
            min_edge_inliers: 15,
        }
    }
}

impl MatchRefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_epipolar_px > 0.0) {
            return Err(SfmError::config("max_epipolar_px", "must be positive"));
        }
        Ok(())
    }
}

/// `E = [t_ij]x R_ij` so that `u_j^T E u_i = 0` for normalized keypoints.
pub fn essential_from_poses(pi: &Pose, pj: &Pose) -> Result<Matrix3<f64>> {
    let rel = relative_pose(pi, pj);
    let t = rel
        .direction
        .ok_or_else(|| SfmError::Degenerate("coincident camera centers".into()))?;
    Ok(skew(&t) * rel.rotation.matrix())
}

/// Pixel-space fundamental matrix `K_j^-T E K_i^-1`.
pub fn fundamental_from_essential(e: &Matrix3<f64>, camera_i: &Camera, camera_j: &Camera) -> Matrix3<f64> {
    camera_j.k_inverse().transpose() * e * camera_i.k_inverse()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarDistance {
    /// Sum of both point-to-line distances, pixels.
    pub distance: f64,
    /// One of the epipolar lines had no direction and contributed zero.
    pub degenerate: bool,
}

fn line_distance(line: &Vector3<f64>, p: &Vector2<f64>) -> Option<f64> {
    let norm = line.x.hypot(line.y);
    (norm > 1e-300 && norm.is_finite()).then(|| (line.x * p.x + line.y * p.y + line.z).abs() / norm)
}

/// Symmetric distance of `u_j` to the line `F u_i` and of `u_i` to `F^T u_j`.
pub fn epipolar_distance(f: &Matrix3<f64>, u_i: &Vector2<f64>, u_j: &Vector2<f64>) -> EpipolarDistance {
    let line_j = f * u_i.push(1.0);
    let line_i = f.transpose() * u_j.push(1.0);
    let dj = line_distance(&line_j, u_j);
    let di = line_distance(&line_i, u_i);
    EpipolarDistance {
        distance: dj.unwrap_or(0.0) + di.unwrap_or(0.0),
        degenerate: dj.is_none() || di.is_none(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRefinement {
    pub edge: TwoViewEdge,
    pub removed: Vec<(u32, u32)>,
    /// False when a visual edge fell below the inlier minimum.
    pub keep: bool,
}

/// Drops the matches of one edge whose symmetric epipolar distance exceeds the
/// threshold. Matches whose keypoints are missing are dropped as well.
pub fn refine_matches(
    edge: &TwoViewEdge,
    pi: &Pose,
    pj: &Pose,
    camera_i: &Camera,
    camera_j: &Camera,
    keypoints: &KeypointSet,
    config: &MatchRefineConfig,
) -> EdgeRefinement {
    let Ok(e) = essential_from_poses(pi, pj) else {
        return EdgeRefinement {
            edge: edge.clone(),
            removed: Vec::new(),
            keep: true,
        };
    };
    let f = fundamental_from_essential(&e, camera_i, camera_j);
    let (kept, removed): (Vec<(u32, u32)>, Vec<(u32, u32)>) = edge.matches.iter().partition(|&&(a, b)| {
        match (keypoints.get(edge.i, a), keypoints.get(edge.j, b)) {
            (Some(ua), Some(ub)) => epipolar_distance(&f, ua, ub).distance <= config.max_epipolar_px,
            _ => false,
        }
    });
    let keep = edge.source == EdgeSource::Sensor || kept.len() >= config.min_edge_inliers;
    let mut out = edge.clone();
    out.matches = kept;
    EdgeRefinement { edge: out, removed, keep }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchRefineReport {
    /// Removed matches per edge.
    pub removed: BTreeMap<(ImageId, ImageId), Vec<(u32, u32)>>,
    pub dropped_edges: Vec<(ImageId, ImageId)>,
    /// Edges left untouched because a pose was missing.
    pub skipped: Vec<(ImageId, ImageId)>,
}

impl MatchRefineReport {
    pub fn removed_count(&self) -> usize {
        self.removed.values().map(Vec::len).sum()
    }
}

/// Refines every edge of the graph in parallel.
pub fn refine_graph(
    graph: &ViewGraph,
    poses: &BTreeMap<ImageId, Pose>,
    keypoints: &KeypointSet,
    config: &MatchRefineConfig,
) -> (ViewGraph, MatchRefineReport) {
    let edges: Vec<&TwoViewEdge> = graph.edges().collect();
    let results: Vec<((ImageId, ImageId), Option<EdgeRefinement>)> = edges
        .par_iter()
        .map(|e| {
            let r = match (poses.get(&e.i), poses.get(&e.j), graph.camera(e.i), graph.camera(e.j)) {
                (Some(pi), Some(pj), Some(ci), Some(cj)) => Some(refine_matches(e, pi, pj, ci, cj, keypoints, config)),
                _ => None,
            };
            (e.key(), r)
        })
        .collect();
    let mut out = graph.clone();
    let mut report = MatchRefineReport::default();
    for (key, r) in results {
        let Some(r) = r else {
            report.skipped.push(key);
            continue;
        };
        if !r.removed.is_empty() {
            report.removed.insert(key, r.removed);
        }
        if r.keep {
            *out.edge_mut(key.0, key.1).expect("edge exists") = r.edge;
        } else {
            out.remove_edge(key.0, key.1);
            report.dropped_edges.push(key);
        }
    }
    (out, report)
}
