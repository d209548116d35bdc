//! Chunk-wise autoregressive generation with sparse memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChunkFrames, ChunkRequest, SparseMemory, WorldModelBackend};
use crate::geometry::ActionFrame;
use crate::image::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub chunk: usize,
    pub memory: usize,
    pub sampler_steps: usize,
    pub guidance: f64,
    pub max_chunks: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self::single_view()
    }
}

impl RolloutConfig {
    pub fn single_view() -> Self {
        Self { chunk: 16, memory: 4, sampler_steps: 16, guidance: 1.0, max_chunks: 30 }
    }

    pub fn multi_view() -> Self {
        Self { max_chunks: 10, ..Self::single_view() }
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.chunk < self.memory || self.chunk == 0 {
            return Err(RolloutError::Config(format!("chunk {} smaller than memory {}", self.chunk, self.memory)));
        }
        if self.max_chunks == 0 {
            return Err(RolloutError::Config("max_chunks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("action stream has {got} frames, need at least {need}")]
    TooFewActions { got: usize, need: usize },
    #[error("backend failed at chunk {chunk}: {source}")]
    Backend { chunk: usize, source: BackendError },
}

/// Inputs and outputs of one generated chunk.
#[derive(Debug, Clone)]
pub struct ChunkTrace {
    pub index: usize,
    pub condition_frames: Vec<RgbImage>,
    pub condition_action: ActionFrame,
    pub actions: Vec<ActionFrame>,
    pub memory_before: SparseMemory,
    pub frames: ChunkFrames,
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    pub chunks: Vec<ChunkTrace>,
    pub memory: SparseMemory,
}

impl RolloutOutput {
    /// All generated frames of `view` in order.
    pub fn video(&self, view: usize) -> Vec<&RgbImage> {
        self.chunks.iter().flat_map(|c| c.frames[view].iter()).collect()
    }
}

/// State carried between chunks; usable step by step (interactive
/// sessions) or driven to completion by [`rollout_chunks`].
#[derive(Debug, Clone)]
pub struct ChunkLoop {
    pub condition_frames: Vec<RgbImage>,
    pub condition_action: ActionFrame,
    pub memory: SparseMemory,
    pub chunk_index: usize,
}

impl ChunkLoop {
    pub fn new(init_frames: Vec<RgbImage>, init_action: ActionFrame, memory: usize) -> Self {
        Self { condition_frames: init_frames, condition_action: init_action, memory: SparseMemory::new(memory), chunk_index: 0 }
    }

    /// Generates one chunk and advances condition frames and memory.
    pub fn step(&mut self, backend: &mut dyn WorldModelBackend, actions: &[ActionFrame]) -> Result<ChunkTrace, RolloutError> {
        let index = self.chunk_index;
        let request = ChunkRequest {
            condition_frames: &self.condition_frames,
            condition_action: &self.condition_action,
            actions,
            memory: &self.memory,
        };
        let frames = backend.generate(&request).map_err(|source| RolloutError::Backend { chunk: index, source })?;
        if frames.len() != self.condition_frames.len() || frames.iter().any(|v| v.len() != actions.len()) {
            return Err(RolloutError::Backend {
                chunk: index,
                source: BackendError::Model("backend returned wrong frame count".into()),
            });
        }
        let trace = ChunkTrace {
            index,
            condition_frames: std::mem::take(&mut self.condition_frames),
            condition_action: self.condition_action.clone(),
            actions: actions.to_vec(),
            memory_before: self.memory.clone(),
            frames,
        };
        self.memory.update(&trace.frames, actions);
        self.condition_frames = trace.frames.iter().map(|v| v.last().unwrap().clone()).collect();
        self.condition_action = actions.last().unwrap().clone();
        self.chunk_index += 1;
        Ok(trace)
    }
}

/// Consumes the action stream `chunk` frames at a time until it runs out
/// or `max_chunks` chunks have been generated.
pub fn rollout_chunks(
    backend: &mut dyn WorldModelBackend,
    init_frames: Vec<RgbImage>,
    init_action: ActionFrame,
    actions: &[ActionFrame],
    config: &RolloutConfig,
) -> Result<RolloutOutput, RolloutError> {
    config.validate()?;
    if actions.len() < config.chunk {
        return Err(RolloutError::TooFewActions { got: actions.len(), need: config.chunk });
    }
    let mut lp = ChunkLoop::new(init_frames, init_action, config.memory);
    let mut chunks = Vec::new();
    for block in actions.chunks_exact(config.chunk).take(config.max_chunks) {
        chunks.push(lp.step(backend, block)?);
    }
    Ok(RolloutOutput { chunks, memory: lp.memory })
}
