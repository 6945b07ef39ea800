//! Scene data model: view graph, keypoints, tracks and reconstructions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{Vector2, Vector3};

use crate::error::{Result, SfmError};
use crate::{Camera, Pose, Rotation, Sim3Transform};

pub type ImageId = u32;
pub type KeypointIndex = u32;

/// Origin of a view-graph edge's relative pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeSource {
    Visual,
    Sensor,
}

impl EdgeSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeSource::Visual => "visual",
            EdgeSource::Sensor => "sensor",
        }
    }
}

/// Two-view geometry between images `i < j`: `X_j = R_ij X_i + t_ij` with unit `t_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewEdge {
    pub i: ImageId,
    pub j: ImageId,
    pub rotation: Rotation,
    pub direction: Vector3<f64>,
    /// Keypoint index pairs `(in i, in j)`.
    pub matches: Vec<(KeypointIndex, KeypointIndex)>,
    pub source: EdgeSource,
}

impl TwoViewEdge {
    pub fn new(
        i: ImageId,
        j: ImageId,
        rotation: Rotation,
        direction: Vector3<f64>,
        matches: Vec<(KeypointIndex, KeypointIndex)>,
        source: EdgeSource,
    ) -> Result<Self> {
        if i >= j {
            return Err(SfmError::InvalidInput(format!("edge ({i}, {j}) must satisfy i < j")));
        }
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(SfmError::InvalidInput(format!("edge ({i}, {j}) has no translation direction")));
        }
        Ok(Self {
            i,
            j,
            rotation,
            direction: direction / norm,
            matches,
            source,
        })
    }

    pub fn key(&self) -> (ImageId, ImageId) {
        (self.i, self.j)
    }

    /// Inlier match count.
    pub fn weight(&self) -> usize {
        self.matches.len()
    }

    pub fn other(&self, image: ImageId) -> ImageId {
        if image == self.i {
            self.j
        } else {
            self.i
        }
    }
}

/// Ordered pair key for an unordered image pair.
pub fn pair_key(a: ImageId, b: ImageId) -> (ImageId, ImageId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Images (with their cameras) and two-view edges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewGraph {
    cameras: BTreeMap<ImageId, Camera>,
    edges: BTreeMap<(ImageId, ImageId), TwoViewEdge>,
}

impl ViewGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, id: ImageId, camera: Camera) {
        self.cameras.insert(id, camera);
    }

    /// Inserts or replaces the edge for the pair.
    pub fn insert_edge(&mut self, edge: TwoViewEdge) -> Result<()> {
        if !self.cameras.contains_key(&edge.i) || !self.cameras.contains_key(&edge.j) {
            return Err(SfmError::InvalidInput(format!(
                "edge ({}, {}) references an unknown image",
                edge.i, edge.j
            )));
        }
        self.edges.insert(edge.key(), edge);
        Ok(())
    }

    pub fn remove_edge(&mut self, a: ImageId, b: ImageId) -> Option<TwoViewEdge> {
        self.edges.remove(&pair_key(a, b))
    }

    pub fn edge(&self, a: ImageId, b: ImageId) -> Option<&TwoViewEdge> {
        self.edges.get(&pair_key(a, b))
    }

    pub fn edge_mut(&mut self, a: ImageId, b: ImageId) -> Option<&mut TwoViewEdge> {
        self.edges.get_mut(&pair_key(a, b))
    }

    pub fn edges(&self) -> impl Iterator<Item = &TwoViewEdge> {
        self.edges.values()
    }

    pub fn edges_mut(&mut self) -> impl Iterator<Item = &mut TwoViewEdge> {
        self.edges.values_mut()
    }

    pub fn images(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.cameras.keys().copied()
    }

    pub fn cameras(&self) -> &BTreeMap<ImageId, Camera> {
        &self.cameras
    }

    pub fn camera(&self, id: ImageId) -> Option<&Camera> {
        self.cameras.get(&id)
    }

    pub fn contains_image(&self, id: ImageId) -> bool {
        self.cameras.contains_key(&id)
    }

    pub fn num_images(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn retain_edges(&mut self, mut keep: impl FnMut(&TwoViewEdge) -> bool) {
        self.edges.retain(|_, e| keep(e));
    }

    /// Neighbor lists, each sorted by image id.
    pub fn adjacency(&self) -> BTreeMap<ImageId, Vec<ImageId>> {
        let mut adj: BTreeMap<ImageId, Vec<ImageId>> =
            self.cameras.keys().map(|&id| (id, Vec::new())).collect();
        for e in self.edges.values() {
            adj.entry(e.i).or_default().push(e.j);
            adj.entry(e.j).or_default().push(e.i);
        }
        for list in adj.values_mut() {
            list.sort_unstable();
        }
        adj
    }

    /// Connected components, largest first (ties by smallest id).
    pub fn components(&self) -> Vec<Vec<ImageId>> {
        let adj = self.adjacency();
        let mut seen = BTreeSet::new();
        let mut comps = Vec::new();
        for &start in adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(n) = queue.pop_front() {
                for &m in &adj[&n] {
                    if seen.insert(m) {
                        comp.push(m);
                        queue.push_back(m);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }

    /// Sub-graph induced by `nodes`.
    pub fn induced(&self, nodes: &BTreeSet<ImageId>) -> ViewGraph {
        let cameras = self
            .cameras
            .iter()
            .filter(|(id, _)| nodes.contains(id))
            .map(|(&id, &c)| (id, c))
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|(k, _)| nodes.contains(&k.0) && nodes.contains(&k.1))
            .map(|(&k, e)| (k, e.clone()))
            .collect();
        ViewGraph { cameras, edges }
    }
}

/// Pixel keypoints per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointSet {
    points: BTreeMap<ImageId, Vec<Vector2<f64>>>,
}

impl KeypointSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: ImageId, keypoints: Vec<Vector2<f64>>) {
        self.points.insert(image, keypoints);
    }

    pub fn image(&self, image: ImageId) -> &[Vector2<f64>] {
        self.points.get(&image).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn image_mut(&mut self, image: ImageId) -> &mut Vec<Vector2<f64>> {
        self.points.entry(image).or_default()
    }

    pub fn get(&self, image: ImageId, index: KeypointIndex) -> Option<&Vector2<f64>> {
        self.points.get(&image).and_then(|v| v.get(index as usize))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ImageId, &Vec<Vector2<f64>>)> {
        self.points.iter().map(|(&k, v)| (k, v))
    }

    /// Normalized coordinates `K^-1 [u, 1]`.
    pub fn normalized(&self, image: ImageId, index: KeypointIndex, camera: &Camera) -> Option<Vector3<f64>> {
        self.get(image, index).map(|u| camera.normalize(u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub image: ImageId,
    pub keypoint: KeypointIndex,
    pub inlier: bool,
}

impl Observation {
    pub fn new(image: ImageId, keypoint: KeypointIndex) -> Self {
        Self {
            image,
            keypoint,
            inlier: true,
        }
    }
}

/// 3D point with its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub point: Vector3<f64>,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn inlier_observations(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(|o| o.inlier)
    }

    pub fn inlier_count(&self) -> usize {
        self.inlier_observations().count()
    }

    /// At least two observations and no image observed twice.
    pub fn is_valid(&self) -> bool {
        let mut images = BTreeSet::new();
        self.observations.len() >= 2 && self.observations.iter().all(|o| images.insert(o.image))
    }
}

/// Reference frame of a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Global,
    Partition(usize),
}

/// Registered poses and tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub poses: BTreeMap<ImageId, Pose>,
    pub tracks: Vec<Track>,
    pub frame: Frame,
}

impl Reconstruction {
    pub fn new(frame: Frame) -> Self {
        Self {
            poses: BTreeMap::new(),
            tracks: Vec::new(),
            frame,
        }
    }

    pub fn num_registered(&self) -> usize {
        self.poses.len()
    }

    pub fn is_registered(&self, image: ImageId) -> bool {
        self.poses.contains_key(&image)
    }

    pub fn centers(&self) -> BTreeMap<ImageId, Vector3<f64>> {
        self.poses.iter().map(|(&id, p)| (id, p.center())).collect()
    }

    /// Maps poses and points into a new world frame.
    pub fn transform(&mut self, sim: &Sim3Transform) {
        for pose in self.poses.values_mut() {
            *pose = sim.transform_pose(pose);
        }
        for t in &mut self.tracks {
            t.point = sim.apply(&t.point);
        }
    }

    /// Marks observations of unregistered images as outliers.
    pub fn enforce_registration(&mut self) {
        let poses = &self.poses;
        for t in &mut self.tracks {
            for o in &mut t.observations {
                if !poses.contains_key(&o.image) {
                    o.inlier = false;
                }
            }
        }
    }

    /// Tracks with at least two inlier observations; others are dropped.
    pub fn prune_tracks(&mut self) {
        self.tracks.retain(|t| t.inlier_count() >= 2);
    }

    pub fn observation_count(&self, image: ImageId) -> usize {
        self.tracks
            .iter()
            .flat_map(|t| t.inlier_observations())
            .filter(|o| o.image == image)
            .count()
    }

    /// Every inlier observation references a registered image.
    pub fn check_invariants(&self) -> bool {
        self.tracks
            .iter()
            .all(|t| t.observations.iter().all(|o| !o.inlier || self.poses.contains_key(&o.image)))
    }
}

/// Fused relative pose between consecutive frames, in metric units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPrior {
    pub i: ImageId,
    pub j: ImageId,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    /// Time between the two frames, milliseconds.
    pub dt_ms: f64,
}

impl SensorPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt_ms >= 0.0) {
            return Err(SfmError::InvalidInput(format!("prior ({}, {}) has negative dt", self.i, self.j)));
        }
        if self.rotation.orthonormality_error() > 1e-6 {
            return Err(SfmError::InvalidInput(format!(
                "prior ({}, {}) rotation is not orthonormal",
                self.i, self.j
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> Camera {
        Camera::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn edge_requires_known_endpoints() {
        let mut g = ViewGraph::new();
        g.add_image(0, cam());
        let e = TwoViewEdge::new(0, 1, Rotation::identity(), Vector3::x(), vec![], EdgeSource::Visual).unwrap();
        assert!(g.insert_edge(e.clone()).is_err());
        g.add_image(1, cam());
        g.insert_edge(e).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert!(g.edge(1, 0).is_some());
    }

    #[test]
    fn edge_direction_is_normalized() {
        let e = TwoViewEdge::new(2, 5, Rotation::identity(), Vector3::new(0.0, 3.0, 4.0), vec![(0, 0)], EdgeSource::Visual)
            .unwrap();
        assert!((e.direction.norm() - 1.0).abs() < 1e-12);
        assert_eq!(e.weight(), 1);
        assert!(TwoViewEdge::new(5, 2, Rotation::identity(), Vector3::x(), vec![], EdgeSource::Visual).is_err());
    }

    #[test]
    fn components_sorted_by_size() {
        let mut g = ViewGraph::new();
        for id in 0..5 {
            g.add_image(id, cam());
        }
        for (a, b) in [(0, 1), (3, 4), (2, 3)] {
            g.insert_edge(TwoViewEdge::new(a, b, Rotation::identity(), Vector3::x(), vec![], EdgeSource::Visual).unwrap())
                .unwrap();
        }
        assert_eq!(g.components(), vec![vec![2, 3, 4], vec![0, 1]]);
    }

    #[test]
    fn track_validity() {
        let t = Track {
            point: Vector3::zeros(),
            observations: vec![Observation::new(0, 1), Observation::new(0, 2)],
        };
        assert!(!t.is_valid());
    }
}
