//! Action-conditioned multi-view world model at desk scale.
//!
//! The crate renders end-effector actions into spatial condition maps,
//! encodes frames into a compact latent space, trains and samples a small
//! v-predicting video denoiser, rolls it out chunk by chunk, and uses any
//! [`backend::WorldModelBackend`] as a data engine or as a closed-loop
//! policy evaluator. A deterministic tabletop world serves as the
//! ground-truth backend.

pub mod geometry;
pub mod nn;
pub mod codec;
pub mod image;
pub mod action_map;
pub mod raster;
pub mod backend;
pub mod world;
pub mod conditioning;
pub mod diffusion;
pub mod learned;
pub mod rollout;
pub mod trajectory_engine;
pub mod eval_harness;
pub mod store;
