//! Roll/pitch/yaw conventions and rigid transforms.
//!
//! Orientation is intrinsic Z-Y-X: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    // rem_euclid can land exactly on -pi after the subtraction above
    if w <= -PI {
        w += TAU;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Rpy {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Rpy {
    pub const ZERO: Rpy = Rpy { roll: 0.0, pitch: 0.0, yaw: 0.0 };

    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn wrapped(&self) -> Self {
        Self::new(wrap_angle(self.roll), wrap_angle(self.pitch), wrap_angle(self.yaw))
    }

    pub fn is_finite(&self) -> bool {
        self.roll.is_finite() && self.pitch.is_finite() && self.yaw.is_finite()
    }
}

pub fn rpy_to_matrix(rpy: Rpy) -> Matrix3<f64> {
    let (sr, cr) = rpy.roll.sin_cos();
    let (sp, cp) = rpy.pitch.sin_cos();
    let (sy, cy) = rpy.yaw.sin_cos();
    Matrix3::new(
        cy * cp,
        cy * sp * sr - sy * cr,
        cy * sp * cr + sy * sr,
        sy * cp,
        sy * sp * sr + cy * cr,
        sy * sp * cr - cy * sr,
        -sp,
        cp * sr,
        cp * cr,
    )
}

/// Result of decomposing a rotation matrix into roll/pitch/yaw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpyDecomposition {
    pub rpy: Rpy,
    /// Set when pitch is at +-pi/2 and roll was pinned to zero.
    pub gimbal_degenerate: bool,
}

const GIMBAL_EPS: f64 = 1e-9;

pub fn matrix_to_rpy(r: &Matrix3<f64>) -> RpyDecomposition {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let cp = (r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt();
    if cp < GIMBAL_EPS {
        // roll and yaw are coupled; report the roll = 0 member of the family
        let pitch = if sp > 0.0 { PI / 2.0 } else { -PI / 2.0 };
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        return RpyDecomposition {
            rpy: Rpy::new(0.0, pitch, wrap_angle(yaw)),
            gimbal_degenerate: true,
        };
    }
    let pitch = sp.atan2(cp);
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    RpyDecomposition {
        rpy: Rpy::new(wrap_angle(roll), pitch, wrap_angle(yaw)),
        gimbal_degenerate: false,
    }
}

/// Rigid transform mapping points from a child frame into a parent frame:
/// `p_parent = rotation * p_child + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn from_rpy(translation: Vector3<f64>, rpy: Rpy) -> Self {
        Self { rotation: rpy_to_matrix(rpy), translation }
    }

    /// Camera-style look-at: +z towards `target`, +x to the right and +y down in the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, world_up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&world_up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::y());
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self { rotation: Matrix3::from_columns(&[x, y, z]), translation: eye }
    }

    pub fn compose(&self, child: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * child.rotation,
            translation: self.rotation * child.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Max absolute deviation of `R^T R` from identity, and the determinant.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_valid(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() < 1e-9
            && self.rotation.determinant() > 0.0
    }
}
