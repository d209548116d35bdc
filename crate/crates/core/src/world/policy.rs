use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::scene::SceneConfig;
use super::{WorldRules, WorldState};
use crate::geometry::{interpolate_action, ActionFrame, ActionState, GeometryError};
use crate::image::RgbImage;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("unreachable waypoint: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("policy failure: {0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    /// Isotropic Gaussian jitter (meters) on the grasp and release points.
    Gaussian(f64),
    /// Grasp point shifted sideways far beyond the grasp radius.
    EmptyGrasp,
}

impl NoiseLevel {
    pub fn label(&self) -> String {
        match self {
            NoiseLevel::Gaussian(s) => format!("sigma_{s}"),
            NoiseLevel::EmptyGrasp => "empty_grasp".into(),
        }
    }
}

/// What a policy sees before emitting a chunk: the last frame of each view
/// and the last commanded action.
pub struct Observation<'a> {
    pub frames: &'a [RgbImage],
    pub action: &'a ActionFrame,
}

pub trait Policy: Send {
    fn id(&self) -> String;
    fn next_chunk(&mut self, obs: &Observation) -> Result<Vec<ActionFrame>, PolicyError>;
}

/// Repeats the current action: every delta is zero.
pub struct ZeroPolicy {
    pub chunk: usize,
}

impl Policy for ZeroPolicy {
    fn id(&self) -> String {
        "zero".into()
    }

    fn next_chunk(&mut self, obs: &Observation) -> Result<Vec<ActionFrame>, PolicyError> {
        Ok(vec![obs.action.clone(); self.chunk])
    }
}

pub const MAX_STEP_M: f64 = 0.02;
pub const MAX_STEP_OPEN: f64 = 0.25;
pub const EMPTY_GRASP_OFFSET: f64 = 0.06;
const CLEARANCE: f64 = 0.16;

fn segment(from: &ActionState, to: &ActionState, out: &mut Vec<ActionState>) -> Result<(), GeometryError> {
    let d = (to.pose.position - from.pose.position).norm();
    let n = ((d / MAX_STEP_M).ceil() as usize)
        .max(((to.openness - from.openness).abs() / MAX_STEP_OPEN).ceil() as usize)
        .max(1);
    for i in 1..=n {
        out.push(interpolate_action(from, to, i as f64 / n as f64)?);
    }
    Ok(())
}

/// Per-frame pick-and-place plan from `state` (start frame excluded):
/// above target, descend, close, lift, home, release in goal, retreat.
pub fn plan_pick_place(
    state: &WorldState,
    scene: &SceneConfig,
    noise: NoiseLevel,
    seed: u64,
) -> Result<Vec<ActionState>, PolicyError> {
    let rules: &WorldRules = &scene.rules;
    let target = state.object(&scene.task.target).map_err(|e| PolicyError::Unreachable(e.to_string()))?;
    let p = target.position;
    let goal = scene.task.goal.center();
    let place_nominal = Vector3::new(goal.x, goal.y, p.z + 0.01);
    let lift_z = p.z + CLEARANCE;
    for (name, w) in [("target", p), ("goal", place_nominal), ("lift", Vector3::new(p.x, p.y, lift_z))] {
        if !rules.workspace.contains(&w) {
            return Err(PolicyError::Unreachable(format!("{name} at {:?} outside workspace", w.as_slice())));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (j_grasp, j_place) = match noise {
        NoiseLevel::Gaussian(s) if s > 0.0 => {
            let n = Normal::new(0.0, s).map_err(|e| PolicyError::Other(e.to_string()))?;
            let mut v = || Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
            (v(), v())
        }
        NoiseLevel::Gaussian(_) => (Vector3::zeros(), Vector3::zeros()),
        NoiseLevel::EmptyGrasp => (Vector3::new(EMPTY_GRASP_OFFSET, 0.0, 0.0), Vector3::zeros()),
    };
    let grasp = rules.workspace.clamp(&(p + j_grasp));
    let place = rules.workspace.clamp(&(place_nominal + j_place));

    let start = state.gripper;
    let at = |pos: Vector3<f64>, open: f64| {
        let mut a = start;
        a.pose.position = rules.workspace.clamp(&pos);
        a.openness = open;
        a
    };
    let waypoints = [
        at(Vector3::new(grasp.x, grasp.y, lift_z), 1.0),
        at(grasp, 1.0),
        at(grasp, 0.0),
        at(Vector3::new(grasp.x, grasp.y, lift_z), 0.0),
        at(start.pose.position, 0.0),
        at(place, 0.0),
        at(place, 1.0),
        at(Vector3::new(place.x, place.y, lift_z), 1.0),
    ];
    let mut frames = Vec::new();
    let mut prev = start;
    for w in waypoints {
        segment(&prev, &w, &mut frames)?;
        prev = w;
    }
    Ok(frames)
}

/// Open-loop scripted pick-and-place: the plan is fixed at construction and
/// replayed in chunks of `chunk`; once exhausted the last action is held.
pub struct ScriptedPolicy {
    plan: Vec<ActionState>,
    cursor: usize,
    chunk: usize,
    noise: NoiseLevel,
    seed: u64,
}

impl ScriptedPolicy {
    pub fn new(scene: &SceneConfig, state: &WorldState, noise: NoiseLevel, seed: u64, chunk: usize) -> Result<Self, PolicyError> {
        let plan = plan_pick_place(state, scene, noise, seed)?;
        Ok(Self { plan, cursor: 0, chunk, noise, seed })
    }

    pub fn plan(&self) -> &[ActionState] {
        &self.plan
    }
}

impl Policy for ScriptedPolicy {
    fn id(&self) -> String {
        format!("scripted_{}_seed{}", self.noise.label(), self.seed)
    }

    fn next_chunk(&mut self, obs: &Observation) -> Result<Vec<ActionFrame>, PolicyError> {
        let hold = self.plan.last().copied().or_else(|| obs.action.first().copied());
        let Some(hold) = hold else {
            return Err(PolicyError::Other("empty observation action".into()));
        };
        let out = (0..self.chunk)
            .map(|k| vec![self.plan.get(self.cursor + k).copied().unwrap_or(hold)])
            .collect();
        self.cursor += self.chunk;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{step, success};

    fn run(noise: NoiseLevel, seed: u64) -> (Vec<WorldState>, SceneConfig) {
        let scene = SceneConfig::default();
        let mut s = scene.initial_state();
        let plan = plan_pick_place(&s, &scene, noise, seed).unwrap();
        let mut states = vec![s.clone()];
        for a in &plan {
            s = step(&s, a, &scene.rules).unwrap();
            states.push(s.clone());
        }
        (states, scene)
    }

    #[test]
    fn noiseless_plan_succeeds() {
        let (states, scene) = run(NoiseLevel::Gaussian(0.0), 0);
        assert!(success(states.last().unwrap(), &scene.task).unwrap());
        assert!(states.iter().any(|s| s.attached().is_some()));
    }

    #[test]
    fn plan_respects_step_bounds() {
        let scene = SceneConfig::default();
        let s = scene.initial_state();
        let plan = plan_pick_place(&s, &scene, NoiseLevel::Gaussian(0.03), 7).unwrap();
        let mut prev = s.gripper;
        for a in &plan {
            assert!((a.pose.position - prev.pose.position).norm() <= MAX_STEP_M + 1e-12);
            assert!((a.openness - prev.openness).abs() <= MAX_STEP_OPEN + 1e-12);
            prev = *a;
        }
    }

    #[test]
    fn empty_grasp_never_attaches() {
        let (states, scene) = run(NoiseLevel::EmptyGrasp, 0);
        let p0 = states[0].object("cube").unwrap().position;
        for s in &states {
            assert!(s.attached().is_none());
            assert_eq!(s.object("cube").unwrap().position, p0);
        }
        assert!(!success(states.last().unwrap(), &scene.task).unwrap());
    }

    #[test]
    fn unreachable_goal_is_reported() {
        let mut scene = SceneConfig::default();
        scene.task.goal.min.x = 2.0;
        scene.task.goal.max.x = 2.2;
        let s = scene.initial_state();
        assert!(matches!(
            plan_pick_place(&s, &scene, NoiseLevel::Gaussian(0.0), 0),
            Err(PolicyError::Unreachable(_))
        ));
    }

    #[test]
    fn chunks_hold_after_plan() {
        let scene = SceneConfig::default();
        let s = scene.initial_state();
        let mut p = ScriptedPolicy::new(&scene, &s, NoiseLevel::Gaussian(0.0), 0, 16).unwrap();
        let n = p.plan().len();
        let last = *p.plan().last().unwrap();
        let a = vec![s.gripper];
        let obs = Observation { frames: &[], action: &a };
        let mut all = Vec::new();
        for _ in 0..(n / 16 + 2) {
            all.extend(p.next_chunk(&obs).unwrap());
        }
        assert!(all[n..].iter().all(|f| f[0] == last));
    }
}
