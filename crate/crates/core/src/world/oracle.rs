use super::render::render_views;
use super::scene::SceneConfig;
use super::{step, WorldState};
use crate::backend::{BackendError, ChunkFrames, ChunkRequest, WorldModelBackend};
use crate::geometry::{ActionFrame, CameraRig, GeometryError};
use crate::image::RgbImage;

/// Ground-truth backend: steps the simulator through the requested actions
/// and renders every view.
pub struct OracleBackend {
    scene: SceneConfig,
    rig: CameraRig,
    state: WorldState,
    id: String,
}

impl OracleBackend {
    pub fn new(scene: SceneConfig, rig: CameraRig) -> Self {
        let state = scene.initial_state();
        Self::from_state(scene, rig, state)
    }

    pub fn from_state(scene: SceneConfig, rig: CameraRig, state: WorldState) -> Self {
        Self { scene, rig, state, id: "oracle".into() }
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    /// Current frame of every view.
    pub fn observe(&self) -> Result<Vec<RgbImage>, GeometryError> {
        render_views(&self.state, &self.scene, &self.rig)
    }

    pub fn apply(&mut self, frame: &ActionFrame) -> Result<(), BackendError> {
        let arm = self.state.gripper.arm;
        let a = frame
            .iter()
            .find(|a| a.arm == arm)
            .ok_or(BackendError::Geometry(GeometryError::MissingArm(arm)))?;
        self.state = step(&self.state, a, &self.scene.rules)?;
        Ok(())
    }
}

impl WorldModelBackend for OracleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn rig(&self) -> &CameraRig {
        &self.rig
    }

    fn generate(&mut self, request: &ChunkRequest) -> Result<ChunkFrames, BackendError> {
        let current = self.observe()?;
        if request.condition_frames.len() != current.len() {
            return Err(BackendError::InvalidRequest(format!(
                "expected {} condition views, got {}",
                current.len(),
                request.condition_frames.len()
            )));
        }
        for (v, (a, b)) in current.iter().zip(request.condition_frames).enumerate() {
            if a.sha256() != b.sha256() {
                return Err(BackendError::Desync { view: v });
            }
        }
        let mut out: ChunkFrames = vec![Vec::with_capacity(request.actions.len()); self.rig.len()];
        for frame in request.actions {
            self.apply(frame)?;
            for (v, img) in self.observe()?.into_iter().enumerate() {
                out[v].push(img);
            }
        }
        Ok(out)
    }

    fn ground_truth(&self) -> Option<&WorldState> {
        Some(&self.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::SparseMemory;

    #[test]
    fn zero_action_chunk_is_static() {
        let scene = SceneConfig::default();
        let mut b = OracleBackend::new(scene.clone(), scene.rig.clone());
        let cond = b.observe().unwrap();
        let a = vec![b.state().gripper];
        let actions = vec![a.clone(); 16];
        let mem = SparseMemory::new(4);
        let out = b
            .generate(&ChunkRequest { condition_frames: &cond, condition_action: &a, actions: &actions, memory: &mem })
            .unwrap();
        assert_eq!(out.len(), 2);
        for (v, frames) in out.iter().enumerate() {
            assert_eq!(frames.len(), 16);
            assert!(frames.iter().all(|f| *f == cond[v]));
        }
    }

    #[test]
    fn desync_detected() {
        let scene = SceneConfig::default();
        let mut b = OracleBackend::new(scene.clone(), scene.rig.clone());
        let mut cond = b.observe().unwrap();
        cond[1].put(0, 0, [1, 2, 3]);
        let a = vec![b.state().gripper];
        let mem = SparseMemory::new(4);
        let r = b.generate(&ChunkRequest { condition_frames: &cond, condition_action: &a, actions: &[a.clone()], memory: &mem });
        assert!(matches!(r, Err(BackendError::Desync { view: 1 })));
    }
}
