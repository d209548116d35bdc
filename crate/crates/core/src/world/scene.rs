use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{WorldError, WorldRules, WorldState};
use crate::geometry::{
    ActionState, ArmId, CameraExtrinsics, CameraModel, CameraRig, CameraView, RigidTransform, Rpy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Sphere,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub shape: ObjectShape,
    pub half_extent: f64,
    pub color: [u8; 3],
    pub position: Vector3<f64>,
    pub yaw: f64,
    /// Offset from the gripper while held.
    pub attached: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn centered(center: Vector3<f64>, half: Vector3<f64>) -> Self {
        Self { min: center - half, max: center + half }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| !(self.min[i] < self.max[i]))
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_strict(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }

    pub fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub target: String,
    pub goal: Aabb,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    pub height: f64,
    pub color: [u8; 3],
}

/// Everything needed to build and render a world instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub background: [u8; 3],
    pub table: TableSpec,
    pub objects: Vec<WorldObject>,
    pub gripper_start: ActionState,
    pub task: TaskSpec,
    pub rules: WorldRules,
    pub rig: CameraRig,
}

/// Gripper pointing straight down (approach axis = world -z).
pub fn downward() -> Rpy {
    Rpy::new(std::f64::consts::PI, 0.0, 0.0)
}

/// Static head pinhole camera plus a wrist camera behind the gripper,
/// both 80x128.
pub fn default_rig() -> CameraRig {
    let head = RigidTransform::look_at(
        Vector3::new(0.0, -0.42, 0.46),
        Vector3::new(0.0, 0.04, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
    );
    CameraRig {
        views: vec![
            CameraView {
                name: "head".into(),
                camera: CameraModel::pinhole(128, 80, 110.0, 110.0, 63.5, 39.5),
                extrinsics: CameraExtrinsics::Static(head),
            },
            CameraView {
                name: "wrist".into(),
                camera: CameraModel::pinhole(128, 80, 70.0, 70.0, 63.5, 39.5),
                extrinsics: CameraExtrinsics::Wrist {
                    arm: ArmId::Left,
                    offset: RigidTransform::from_translation(Vector3::new(0.0, 0.0, -0.08)),
                },
            },
        ],
    }
}

/// Optional fisheye side view.
pub fn head_left_fisheye() -> CameraView {
    CameraView {
        name: "head_left".into(),
        camera: CameraModel::fisheye(128, 80, 45.0, 63.5, 39.5, 1.6),
        extrinsics: CameraExtrinsics::Static(RigidTransform::look_at(
            Vector3::new(-0.45, -0.35, 0.5),
            Vector3::new(0.0, 0.05, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        )),
    }
}

impl Default for SceneConfig {
    fn default() -> Self {
        let cube = WorldObject {
            id: "cube".into(),
            shape: ObjectShape::Box,
            half_extent: 0.04,
            color: [210, 50, 40],
            position: Vector3::new(-0.12, 0.08, 0.04),
            yaw: 0.3,
            attached: None,
        };
        let ball = WorldObject {
            id: "ball".into(),
            shape: ObjectShape::Sphere,
            half_extent: 0.035,
            color: [50, 100, 210],
            position: Vector3::new(0.17, 0.18, 0.035),
            yaw: 0.0,
            attached: None,
        };
        Self {
            background: [28, 30, 38],
            table: TableSpec { center: [0.0, 0.06], half_size: [0.36, 0.26], height: 0.0, color: [150, 112, 74] },
            objects: vec![cube, ball],
            gripper_start: ActionState::new(ArmId::Left, Vector3::new(0.0, -0.02, 0.20), downward(), 1.0),
            task: TaskSpec {
                id: "pick_place_cube".into(),
                target: "cube".into(),
                goal: Aabb::centered(Vector3::new(0.13, -0.06, 0.06), Vector3::new(0.07, 0.07, 0.06)),
                description: "put the red cube into the goal area".into(),
            },
            rules: WorldRules::default(),
            rig: default_rig(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.task.goal.is_empty() {
            return Err(WorldError::InvalidScene("goal region is empty".into()));
        }
        if !self.objects.iter().any(|o| o.id == self.task.target) {
            return Err(WorldError::UnknownObject(self.task.target.clone()));
        }
        let mut ids: Vec<&str> = self.objects.iter().map(|o| o.id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(WorldError::InvalidScene("duplicate object id".into()));
        }
        if self.objects.iter().any(|o| o.half_extent <= 0.0 || !o.position.iter().all(|v| v.is_finite())) {
            return Err(WorldError::InvalidScene("object extent or position invalid".into()));
        }
        self.rig.validate().map_err(|e| WorldError::InvalidScene(e.to_string()))?;
        Ok(())
    }

    /// Objects resting on the table, gripper at its start pose.
    pub fn initial_state(&self) -> WorldState {
        let mut objects = self.objects.clone();
        for o in objects.iter_mut() {
            o.position.z = self.table.height + o.half_extent;
            o.attached = None;
        }
        WorldState { gripper: self.gripper_start, objects, table_height: self.table.height }
    }

    /// Default scene with object placements and goal jittered by `seed`.
    pub fn randomized(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::default();
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        s.objects[0].position.x = u(-0.20, -0.04);
        s.objects[0].position.y = u(0.0, 0.16);
        s.objects[0].yaw = u(-0.8, 0.8);
        s.objects[1].position.x = u(0.10, 0.24);
        s.objects[1].position.y = u(0.12, 0.24);
        let g = Vector3::new(u(0.06, 0.20), u(-0.12, 0.0), 0.06);
        s.task.goal = Aabb::centered(g, Vector3::new(0.07, 0.07, 0.06));
        s
    }
}
