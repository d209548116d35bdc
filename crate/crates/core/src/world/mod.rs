//! Deterministic tabletop world: one floating gripper, resting or attached
//! objects, and flat-shaded multi-camera rendering.
//!
//! Physics is kinematic. Each step teleports the gripper to the commanded
//! pose; closing the gripper (openness crossing below the grip threshold)
//! attaches the nearest object within the grasp radius, opening it drops
//! the attached object straight down to its support height.

mod oracle;
mod policy;
mod render;
mod scene;

pub use oracle::OracleBackend;
pub use policy::{plan_pick_place, NoiseLevel, Observation, Policy, PolicyError, ScriptedPolicy, ZeroPolicy, EMPTY_GRASP_OFFSET, MAX_STEP_M, MAX_STEP_OPEN};
pub use render::{render, render_views};
pub use scene::{default_rig, downward, head_left_fisheye, Aabb, ObjectShape, SceneConfig, TableSpec, TaskSpec, WorldObject};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ActionState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("unknown object id {0}")]
    UnknownObject(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("non-finite action")]
    NonFiniteAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: ActionState,
    pub objects: Vec<WorldObject>,
    pub table_height: f64,
}

impl WorldState {
    pub fn object(&self, id: &str) -> Result<&WorldObject, WorldError> {
        self.objects.iter().find(|o| o.id == id).ok_or_else(|| WorldError::UnknownObject(id.to_string()))
    }

    pub fn attached(&self) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.attached.is_some())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("world state serialises");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Kinematic rule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldRules {
    pub grasp_radius: f64,
    pub grip_threshold: f64,
    pub workspace: Aabb,
}

impl Default for WorldRules {
    fn default() -> Self {
        Self {
            grasp_radius: 0.02,
            grip_threshold: 0.5,
            workspace: Aabb::new(Vector3::new(-0.4, -0.3, 0.0), Vector3::new(0.4, 0.4, 0.6)),
        }
    }
}

/// Applies one commanded action.
pub fn step(state: &WorldState, action: &ActionState, rules: &WorldRules) -> Result<WorldState, WorldError> {
    if !action.pose.is_finite() || !action.openness.is_finite() {
        return Err(WorldError::NonFiniteAction);
    }
    let mut next = state.clone();
    let mut cmd = *action;
    cmd.pose.position = rules.workspace.clamp(&cmd.pose.position);
    cmd.openness = cmd.openness.clamp(0.0, 1.0);
    let prev_open = state.gripper.openness;
    next.gripper = cmd;
    let g = cmd.pose.position;

    let th = rules.grip_threshold;
    let closing = prev_open >= th && cmd.openness < th;
    let opening = prev_open < th && cmd.openness >= th;
    // release happens before the arm moves on
    if opening {
        let table = next.table_height;
        for o in next.objects.iter_mut() {
            if o.attached.take().is_some() {
                o.position.z = table + o.half_extent;
            }
        }
    }
    for o in next.objects.iter_mut() {
        if let Some(offset) = o.attached {
            o.position = g + offset;
        }
    }
    if closing && next.attached().is_none() {
        let nearest = next
            .objects
            .iter_mut()
            .map(|o| ((o.position - g).norm(), o))
            .filter(|(d, _)| *d <= rules.grasp_radius)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.id.cmp(&b.1.id)));
        if let Some((_, o)) = nearest {
            o.attached = Some(o.position - g);
        }
    }
    Ok(next)
}

/// True iff the target's center is strictly inside the goal region and the
/// object is not held.
pub fn success(state: &WorldState, task: &TaskSpec) -> Result<bool, WorldError> {
    let o = state.object(&task.target)?;
    Ok(o.attached.is_none() && task.goal.contains_strict(&o.position))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ArmId, Rpy};

    fn state_with_object_at(z: f64) -> WorldState {
        WorldState {
            gripper: ActionState::new(ArmId::Left, Vector3::new(0.0, 0.0, 0.10), Rpy::ZERO, 1.0),
            objects: vec![WorldObject {
                id: "cube".into(),
                shape: ObjectShape::Box,
                half_extent: 0.03,
                color: [200, 40, 40],
                position: Vector3::new(0.0, 0.0, z),
                yaw: 0.0,
                attached: None,
            }],
            table_height: 0.0,
        }
    }

    fn cmd(x: f64, open: f64) -> ActionState {
        ActionState::new(ArmId::Left, Vector3::new(x, 0.0, 0.10), Rpy::ZERO, open)
    }

    #[test]
    fn closing_within_radius_attaches() {
        let s = step(&state_with_object_at(0.105), &cmd(0.0, 0.1), &WorldRules::default()).unwrap();
        assert!(s.objects[0].attached.is_some());
    }

    #[test]
    fn closing_out_of_radius_does_not_attach() {
        let s = step(&state_with_object_at(0.15), &cmd(0.0, 0.1), &WorldRules::default()).unwrap();
        assert!(s.objects[0].attached.is_none());
    }

    #[test]
    fn carry_and_drop() {
        let rules = WorldRules::default();
        let s = step(&state_with_object_at(0.105), &cmd(0.0, 0.1), &rules).unwrap();
        let s = step(&s, &cmd(0.1, 0.1), &rules).unwrap();
        assert!((s.objects[0].position.x - 0.1).abs() < 1e-15);
        let s = step(&s, &cmd(0.1, 1.0), &rules).unwrap();
        let o = &s.objects[0];
        assert!(o.attached.is_none());
        assert!((o.position.x - 0.1).abs() < 1e-15);
        assert_eq!(o.position.z, 0.03);
    }

    #[test]
    fn opening_while_moving_releases_in_place() {
        let rules = WorldRules::default();
        let s = step(&state_with_object_at(0.105), &cmd(0.0, 0.1), &rules).unwrap();
        let s = step(&s, &cmd(0.05, 0.6), &rules).unwrap();
        let o = &s.objects[0];
        assert!(o.attached.is_none());
        assert_eq!(o.position.x, 0.0);
        assert_eq!(o.position.z, 0.03);
    }

    #[test]
    fn success_rules() {
        let task = TaskSpec {
            id: "t".into(),
            target: "cube".into(),
            goal: Aabb::new(Vector3::new(-0.05, -0.05, 0.0), Vector3::new(0.05, 0.05, 0.1)),
            description: String::new(),
        };
        let mut s = state_with_object_at(0.03);
        assert!(success(&s, &task).unwrap());
        s.objects[0].attached = Some(Vector3::zeros());
        assert!(!success(&s, &task).unwrap());
        s.objects[0].attached = None;
        s.objects[0].position.x = 0.05 + 1e-9;
        assert!(!success(&s, &task).unwrap());
        s.objects[0].position.x = 0.05;
        assert!(!success(&s, &task).unwrap());
        let bad = TaskSpec { target: "nope".into(), ..task };
        assert!(matches!(success(&s, &bad), Err(WorldError::UnknownObject(_))));
    }

    #[test]
    fn hash_tracks_state() {
        let a = state_with_object_at(0.03);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.gripper.openness = 0.9;
        assert_ne!(a.hash(), b.hash());
    }
}
