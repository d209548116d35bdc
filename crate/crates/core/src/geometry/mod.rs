//! Poses, cameras, projection, ray maps and action arithmetic.

mod action;
mod camera;
mod raymap;
mod rig;
mod rotation;

pub use action::{
    delta_action, interpolate_action, interpolate_frame, ActionFrame, ActionState, ActionTrajectory, ArmId,
    DeltaAction, Pose6D,
};
pub use camera::{project, CameraExtrinsics, CameraKind, CameraModel, Projection, MIN_DEPTH};
pub use raymap::{compute_ray_map, RayMap};
pub use rig::{CameraRig, CameraView};
pub use rotation::{matrix_to_rpy, rpy_to_matrix, wrap_angle, RigidTransform, Rpy, RpyDecomposition};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point behind camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("point outside fisheye field (theta {theta})")]
    OutOfField { theta: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("openness {0} outside [0, 1]")]
    OpennessOutOfRange(f64),
    #[error("interpolation parameter {0} outside [0, 1]")]
    InterpolationOutOfRange(f64),
    #[error("action states belong to different arms")]
    ArmMismatch,
    #[error("no state for arm {0:?} in action frame")]
    MissingArm(ArmId),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}
