//! The world-model backend interface shared by the oracle simulator and the
//! learned diffusion model, plus the sparse memory carried between chunks.

use thiserror::Error;

use crate::geometry::{ActionFrame, CameraRig, GeometryError};
use crate::image::RgbImage;
use crate::world::{WorldError, WorldState};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend state out of sync with condition frames (view {view})")]
    Desync { view: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("model failure: {0}")]
    Model(String),
}

/// Generated frames indexed `[view][frame]`.
pub type ChunkFrames = Vec<Vec<RgbImage>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// One frame per view.
    pub frames: Vec<RgbImage>,
    pub action: ActionFrame,
}

/// Frames retained from the previous chunk at evenly strided indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

impl SparseMemory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    /// For chunk size 16 and capacity 4: 3, 7, 11, 15.
    pub fn strided_indices(chunk: usize, capacity: usize) -> Vec<usize> {
        (1..=capacity).map(|i| i * chunk / capacity - 1).collect()
    }

    /// Replaces the contents with the strided frames of a finished chunk.
    pub fn update(&mut self, frames: &ChunkFrames, actions: &[ActionFrame]) {
        let k = actions.len();
        self.entries = Self::strided_indices(k, self.capacity.min(k))
            .into_iter()
            .map(|i| MemoryEntry { frames: frames.iter().map(|v| v[i].clone()).collect(), action: actions[i].clone() })
            .collect();
    }
}

/// Inputs for one chunk of generation.
pub struct ChunkRequest<'a> {
    /// Current observation, one frame per view.
    pub condition_frames: &'a [RgbImage],
    pub condition_action: &'a ActionFrame,
    /// Next K actions.
    pub actions: &'a [ActionFrame],
    pub memory: &'a SparseMemory,
}

pub trait WorldModelBackend: Send {
    fn id(&self) -> &str;

    fn rig(&self) -> &CameraRig;

    /// Returns exactly `actions.len()` frames for every rig view.
    fn generate(&mut self, request: &ChunkRequest) -> Result<ChunkFrames, BackendError>;

    /// The simulated true state, when the backend has one.
    fn ground_truth(&self) -> Option<&WorldState> {
        None
    }
}
