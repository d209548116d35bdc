//! End-effector action states, trajectories and their deltas.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::rotation::{rpy_to_matrix, wrap_angle, RigidTransform, Rpy};
use super::GeometryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ArmId {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub position: Vector3<f64>,
    pub rpy: Rpy,
}

impl Default for Pose6D {
    fn default() -> Self {
        Self { position: Vector3::zeros(), rpy: Rpy::ZERO }
    }
}

impl Pose6D {
    pub fn new(position: Vector3<f64>, rpy: Rpy) -> Self {
        Self { position, rpy }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite()) && self.rpy.is_finite()
    }

    /// EEF frame expressed in the world frame.
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(rpy_to_matrix(self.rpy), self.position)
    }
}

/// One arm's end-effector pose plus gripper openness (1 = fully open).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionState {
    pub arm: ArmId,
    pub pose: Pose6D,
    pub openness: f64,
}

impl ActionState {
    pub fn new(arm: ArmId, position: Vector3<f64>, rpy: Rpy, openness: f64) -> Self {
        Self { arm, pose: Pose6D::new(position, rpy), openness }
    }

    /// `[x, y, z, roll, pitch, yaw, openness]`
    pub fn to_vector(&self) -> [f64; 7] {
        let p = &self.pose.position;
        let r = &self.pose.rpy;
        [p.x, p.y, p.z, r.roll, r.pitch, r.yaw, self.openness]
    }

    pub fn from_vector(arm: ArmId, v: [f64; 7]) -> Self {
        Self::new(arm, Vector3::new(v[0], v[1], v[2]), Rpy::new(v[3], v[4], v[5]), v[6])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.pose.is_finite() || !self.openness.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if !(0.0..=1.0).contains(&self.openness) {
            return Err(GeometryError::OpennessOutOfRange(self.openness));
        }
        Ok(())
    }
}

/// The per-frame action: one state per arm (one or two arms).
pub type ActionFrame = Vec<ActionState>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTrajectory {
    frames: Vec<ActionFrame>,
    timestamps: Vec<f64>,
}

impl ActionTrajectory {
    pub fn new(frames: Vec<ActionFrame>, timestamps: Vec<f64>) -> Result<Self, GeometryError> {
        let t = Self { frames, timestamps };
        t.validate()?;
        Ok(t)
    }

    /// Uniformly timed trajectory starting at t = 0.
    pub fn with_rate(frames: Vec<ActionFrame>, hz: f64) -> Result<Self, GeometryError> {
        let timestamps = (0..frames.len()).map(|i| i as f64 / hz).collect();
        Self::new(frames, timestamps)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.frames.is_empty() {
            return Err(GeometryError::InvalidTrajectory("empty trajectory".into()));
        }
        if self.frames.len() != self.timestamps.len() {
            return Err(GeometryError::InvalidTrajectory(format!(
                "{} frames but {} timestamps",
                self.frames.len(),
                self.timestamps.len()
            )));
        }
        let arms: Vec<ArmId> = self.frames[0].iter().map(|s| s.arm).collect();
        if arms.is_empty() || arms.len() > 2 {
            return Err(GeometryError::InvalidTrajectory(format!("{} arms per frame", arms.len())));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let these: Vec<ArmId> = f.iter().map(|s| s.arm).collect();
            if these != arms {
                return Err(GeometryError::InvalidTrajectory(format!("arm set changes at frame {i}")));
            }
            for s in f {
                s.validate()?;
            }
        }
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(GeometryError::InvalidTrajectory(format!(
                    "timestamps not strictly increasing at {}",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> &[ActionFrame] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn arm_count(&self) -> usize {
        self.frames[0].len()
    }

    /// Openness series of the given arm slot.
    pub fn openness(&self, arm_slot: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f[arm_slot].openness).collect()
    }

    /// Frames and timestamps in `[start, end]` (inclusive).
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, GeometryError> {
        if start > end || end >= self.len() {
            return Err(GeometryError::InvalidTrajectory(format!(
                "slice [{start}, {end}] out of range for length {}",
                self.len()
            )));
        }
        Self::new(self.frames[start..=end].to_vec(), self.timestamps[start..=end].to_vec())
    }

    pub fn into_parts(self) -> (Vec<ActionFrame>, Vec<f64>) {
        (self.frames, self.timestamps)
    }
}

/// Difference between consecutive action states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaAction {
    pub d_position: Vector3<f64>,
    pub d_rpy: [f64; 3],
    pub d_openness: f64,
}

impl DeltaAction {
    pub fn to_vector(&self) -> [f64; 7] {
        let p = &self.d_position;
        [p.x, p.y, p.z, self.d_rpy[0], self.d_rpy[1], self.d_rpy[2], self.d_openness]
    }

    /// Unweighted sum of squares over position (m), rpy (rad) and openness.
    pub fn norm_squared(&self) -> f64 {
        self.to_vector().iter().map(|v| v * v).sum()
    }
}

/// `current - previous`, rpy components wrapped to `(-pi, pi]`.
pub fn delta_action(current: &ActionState, previous: &ActionState) -> Result<DeltaAction, GeometryError> {
    if current.arm != previous.arm {
        return Err(GeometryError::ArmMismatch);
    }
    let c = current.pose.rpy.as_array();
    let p = previous.pose.rpy.as_array();
    Ok(DeltaAction {
        d_position: current.pose.position - previous.pose.position,
        d_rpy: [wrap_angle(c[0] - p[0]), wrap_angle(c[1] - p[1]), wrap_angle(c[2] - p[2])],
        d_openness: current.openness - previous.openness,
    })
}

/// Position and openness linear in `s`; each rpy component moves along its
/// shortest wrapped arc. Endpoints are returned exactly.
pub fn interpolate_action(a0: &ActionState, a1: &ActionState, s: f64) -> Result<ActionState, GeometryError> {
    if a0.arm != a1.arm {
        return Err(GeometryError::ArmMismatch);
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(GeometryError::InterpolationOutOfRange(s));
    }
    if s == 0.0 {
        return Ok(*a0);
    }
    if s == 1.0 {
        return Ok(*a1);
    }
    let lerp = |x: f64, y: f64| x + s * (y - x);
    let r0 = a0.pose.rpy.as_array();
    let r1 = a1.pose.rpy.as_array();
    let mut rpy = [0.0; 3];
    for i in 0..3 {
        rpy[i] = wrap_angle(r0[i] + s * wrap_angle(r1[i] - r0[i]));
    }
    let p0 = &a0.pose.position;
    let p1 = &a1.pose.position;
    Ok(ActionState {
        arm: a0.arm,
        pose: Pose6D::new(
            Vector3::new(lerp(p0.x, p1.x), lerp(p0.y, p1.y), lerp(p0.z, p1.z)),
            Rpy::from_array(rpy),
        ),
        openness: lerp(a0.openness, a1.openness),
    })
}

/// Interpolates every arm of a frame.
pub fn interpolate_frame(f0: &ActionFrame, f1: &ActionFrame, s: f64) -> Result<ActionFrame, GeometryError> {
    if f0.len() != f1.len() {
        return Err(GeometryError::ArmMismatch);
    }
    f0.iter().zip(f1).map(|(a, b)| interpolate_action(a, b, s)).collect()
}
