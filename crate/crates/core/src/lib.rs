//! Coarse-to-fine structure-from-motion.
//!
//! A sensor-augmented global solve produces coarse poses, which are used to
//! clean matches, partition the view graph, regularize per-partition
//! incremental reconstructions and finally anchor their merge.

pub mod align;
pub mod bundle;
pub mod error;
pub mod geometry;
pub mod global_sfm;
pub mod incremental;
pub mod linalg;
pub mod match_refine;
pub mod partition;
pub mod pipeline;
pub mod resection;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod triangulation;

pub use error::{Result, SfmError, Stage};
pub use geometry::{
    angle_between, angular_distance, chordal_distance, left_jacobian_inverse, project, right_jacobian_inverse, relative_pose, sim3_compose, skew, vee,
    PinholeCamera, Projection, RelativePose, Sim3, SE3, SO3,
};
pub use scalar::Real;
pub use scene::{
    EdgeSource, Frame, ImageId, KeypointIndex, KeypointSet, Observation, Reconstruction, SensorPrior, Track,
    TwoViewEdge, ViewGraph,
};

pub type Rotation = SO3<f64>;
pub type Pose = SE3<f64>;
pub type Sim3Transform = Sim3<f64>;
pub type Camera = PinholeCamera<f64>;

pub type Rotation32 = SO3<f32>;
pub type Pose32 = SE3<f32>;
pub type Sim3Transform32 = Sim3<f32>;
pub type Camera32 = PinholeCamera<f32>;
