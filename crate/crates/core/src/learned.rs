//! Learned diffusion backend, synthetic training corpus, training loop and
//! held-out evaluation against the copy-condition-frame baseline.

use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_map::GlyphStyle;
use crate::backend::{BackendError, ChunkFrames, ChunkRequest, SparseMemory, WorldModelBackend};
use crate::codec::{Latent, LatentCodec, LATENT_CHANNELS};
use crate::conditioning::{from_model_space, ChunkCondition, ConditionBuilder};
use crate::diffusion::{sample_chunk, train_step, DenoiserConfig, DiffusionConfig, DiffusionError, NoiseSchedule, TinyDenoiser, TrainExample};
use crate::geometry::{ActionFrame, CameraRig};
use crate::image::{Frame, RgbImage};
use crate::nn::{Adam, AdamConfig};
use crate::world::{plan_pick_place, render_views, step, success, NoiseLevel, SceneConfig, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedConfig {
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub codec_seed: u64,
    pub memory_slots: usize,
    /// Multiplier applied to the latent residual before diffusion.
    pub residual_scale: f64,
    pub lr: f64,
    pub batch: usize,
    /// Spatial frames per training sample (all K deltas are always kept).
    pub frames_per_sample: usize,
    pub cond_dropout: f64,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            codec_seed: 7,
            memory_slots: 4,
            residual_scale: 12.0,
            lr: 2e-3,
            batch: 4,
            frames_per_sample: 4,
            cond_dropout: 0.1,
            chunk: 16,
            seed: 0,
        }
    }
}

impl LearnedConfig {
    pub fn builder(&self, rig: CameraRig) -> ConditionBuilder {
        ConditionBuilder { codec: LatentCodec::new(self.codec_seed), glyph: GlyphStyle::default(), rig, memory_slots: self.memory_slots }
    }
}

/// One simulated episode: `frames[t][view]` is the observation after
/// `actions[t]`; `actions[0]` is the initial gripper state.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene: SceneConfig,
    pub noise: NoiseLevel,
    pub frames: Vec<Vec<RgbImage>>,
    pub actions: Vec<ActionFrame>,
    pub states: Vec<WorldState>,
    pub succeeded: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Simulates a scripted episode and pads it by holding the last action
/// until it has at least `min_len` frames.
pub fn simulate_episode(scene: &SceneConfig, rig: &CameraRig, noise: NoiseLevel, seed: u64, min_len: usize) -> Result<Episode, BackendError> {
    let mut state = scene.initial_state();
    let plan = plan_pick_place(&state, scene, noise, seed).map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
    let mut frames = vec![render_views(&state, scene, rig)?];
    let mut actions = vec![vec![state.gripper]];
    let mut states = vec![state.clone()];
    let hold = *plan.last().unwrap_or(&state.gripper);
    let total = plan.len().max(min_len.saturating_sub(1));
    for i in 0..total {
        let a = plan.get(i).copied().unwrap_or(hold);
        state = step(&state, &a, &scene.rules)?;
        frames.push(render_views(&state, scene, rig)?);
        actions.push(vec![a]);
        states.push(state.clone());
    }
    let succeeded = success(&state, &scene.task)?;
    Ok(Episode { scene: scene.clone(), noise, frames, actions, states, succeeded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub episodes: usize,
    /// Fraction of episodes scripted as empty grasps.
    pub failure_fraction: f64,
    /// Gaussian waypoint jitter for the remaining episodes.
    pub sigma: f64,
    pub min_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { episodes: 48, failure_fraction: 0.3, sigma: 0.005, min_len: 65, seed: 0 }
    }
}

/// Randomized pick-and-place episodes; failures are empty grasps placed at
/// evenly spread indices.
pub fn build_corpus(config: &CorpusConfig, rig: &CameraRig) -> Result<Vec<Episode>, BackendError> {
    let n_fail = (config.episodes as f64 * config.failure_fraction).round() as usize;
    let mut out = Vec::with_capacity(config.episodes);
    for i in 0..config.episodes {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let fail = n_fail > 0 && (i * n_fail) / config.episodes != ((i + 1) * n_fail) / config.episodes;
        let noise = if fail { NoiseLevel::EmptyGrasp } else { NoiseLevel::Gaussian(config.sigma) };
        let scene = SceneConfig::randomized(seed);
        out.push(simulate_episode(&scene, rig, noise, seed, config.min_len)?);
    }
    Ok(out)
}

pub fn failure_rate(corpus: &[Episode]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    corpus.iter().filter(|e| !e.succeeded).count() as f64 / corpus.len() as f64
}

/// A training or evaluation chunk: condition at `start`, targets at
/// `start + 1 ..= start + chunk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

pub fn windows(corpus: &[Episode], chunk: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (e, ep) in corpus.iter().enumerate() {
        let mut s = 0;
        while s + chunk < ep.len() {
            out.push(Window { episode: e, start: s });
            s += stride.max(1);
        }
    }
    out
}

/// Memory as it would stand after generating the chunk ending at `start`.
pub fn window_memory(ep: &Episode, start: usize, chunk: usize, slots: usize) -> SparseMemory {
    let mut memory = SparseMemory::new(slots);
    if start >= chunk && slots > 0 {
        let views = ep.frames[0].len();
        let frames: ChunkFrames = (0..views)
            .map(|v| (start + 1 - chunk..=start).map(|t| ep.frames[t][v].clone()).collect())
            .collect();
        memory.update(&frames, &ep.actions[start + 1 - chunk..=start]);
    }
    memory
}

/// Condition and scaled residual targets for a window.
pub fn window_example(
    builder: &ConditionBuilder,
    ep: &Episode,
    w: Window,
    chunk: usize,
    residual_scale: f64,
) -> Result<(ChunkCondition, Vec<f64>), BackendError> {
    let s = w.start;
    let memory = window_memory(ep, s, chunk, builder.memory_slots);
    let cond = builder.build(&ep.frames[s], &ep.actions[s], &ep.actions[s + 1..=s + chunk], &memory).map_err(model_err)?;
    let mut z0 = Vec::with_capacity(cond.spatial.len() / 15 * LATENT_CHANNELS);
    for v in 0..builder.rig.len() {
        let c = builder.encode_frame(&ep.frames[s][v]).map_err(model_err)?;
        for k in 1..=chunk {
            let x = builder.encode_frame(&ep.frames[s + k][v]).map_err(model_err)?;
            z0.extend(x.iter().zip(&c).map(|(a, b)| residual_scale * (a - b)));
        }
    }
    Ok((cond, z0))
}

fn model_err(e: impl std::fmt::Display) -> BackendError {
    BackendError::Model(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub max_steps: usize,
    pub max_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub seconds: f64,
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Trains `model` on random windows of `corpus` with random frame subsets;
/// the learning rate follows a cosine decay to 5% over the budget.
pub fn train_model(
    model: &mut TinyDenoiser,
    config: &LearnedConfig,
    builder: &ConditionBuilder,
    corpus: &[Episode],
    budget: TrainBudget,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport, BackendError> {
    let schedule = config.diffusion.schedule().map_err(model_err)?;
    let pool = windows(corpus, config.chunk, 1);
    if pool.is_empty() {
        return Err(BackendError::InvalidRequest("corpus has no complete chunk window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1);
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() }, &model.params);
    let start = Instant::now();
    let deadline = Duration::from_secs_f64(budget.max_seconds);
    let mut losses = Vec::new();
    let per = config.frames_per_sample.clamp(1, config.chunk);
    let n_lat = builder.latent_shape().0 * builder.latent_shape().1 * LATENT_CHANNELS;
    while losses.len() < budget.max_steps && start.elapsed() < deadline {
        let mut batch = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let w = pool[rng.random_range(0..pool.len())];
            let (cond, z0) = window_example(builder, &corpus[w.episode], w, config.chunk, config.residual_scale)?;
            let mut picks = sample_indices(&mut rng, config.chunk, per).into_vec();
            picks.sort_unstable();
            let mut cond = cond.select_frames(&picks);
            let mut z = Vec::with_capacity(cond.views * per * n_lat);
            for v in 0..cond.views {
                for &k in &picks {
                    let off = (v * config.chunk + k) * n_lat;
                    z.extend_from_slice(&z0[off..off + n_lat]);
                }
            }
            if rng.random::<f64>() < config.cond_dropout {
                cond.drop_in_place();
            }
            batch.push(TrainExample::draw(cond, z, &schedule, &mut rng));
        }
        let progress = (losses.len() as f64 / budget.max_steps as f64).max(start.elapsed().as_secs_f64() / budget.max_seconds).min(1.0);
        adam.config.lr = config.lr * (0.05 + 0.475 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let stats = train_step(model, &mut adam, &batch, &schedule).map_err(model_err)?;
        on_step(losses.len(), stats.loss);
        losses.push(stats.loss);
    }
    Ok(TrainReport { steps: losses.len(), seconds: start.elapsed().as_secs_f64(), losses })
}

/// Diffusion world model over the codec latent, predicting the residual
/// from the condition frame.
pub struct LearnedBackend {
    pub model: TinyDenoiser,
    pub config: LearnedConfig,
    builder: ConditionBuilder,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    id: String,
}

impl LearnedBackend {
    pub fn new(model: TinyDenoiser, config: LearnedConfig, rig: CameraRig) -> Result<Self, DiffusionError> {
        let schedule = config.diffusion.schedule()?;
        let builder = config.builder(rig);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        Ok(Self { model, config, builder, schedule, rng, id: "learned".into() })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn builder(&self) -> &ConditionBuilder {
        &self.builder
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Decoded, unquantized frames `[view][k]`.
    pub fn predict_frames(&mut self, request: &ChunkRequest) -> Result<Vec<Vec<Frame>>, BackendError> {
        let cond = self
            .builder
            .build(request.condition_frames, request.condition_action, request.actions, request.memory)
            .map_err(model_err)?;
        let d = &self.config.diffusion;
        let z = sample_chunk(&self.model, &cond, &self.schedule, d.sampler_steps, d.guidance, &mut self.rng).map_err(model_err)?;
        let (h, w) = self.builder.latent_shape();
        let n_lat = h * w * LATENT_CHANNELS;
        let k_frames = request.actions.len();
        let mut out = Vec::with_capacity(cond.views);
        for v in 0..cond.views {
            let c = self.builder.encode_frame(&request.condition_frames[v]).map_err(model_err)?;
            let mut frames = Vec::with_capacity(k_frames);
            for k in 0..k_frames {
                let off = (v * k_frames + k) * n_lat;
                let lat: Vec<f64> = z[off..off + n_lat].iter().zip(&c).map(|(r, c)| c + r / self.config.residual_scale).collect();
                let latent: Latent = from_model_space(&lat, h, w);
                frames.push(self.builder.codec.decode(&latent).map_err(model_err)?);
            }
            out.push(frames);
        }
        Ok(out)
    }
}

impl WorldModelBackend for LearnedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn rig(&self) -> &CameraRig {
        &self.builder.rig
    }

    fn generate(&mut self, request: &ChunkRequest) -> Result<ChunkFrames, BackendError> {
        if request.condition_frames.len() != self.builder.rig.len() {
            return Err(BackendError::InvalidRequest(format!(
                "{} condition frames for {} views",
                request.condition_frames.len(),
                self.builder.rig.len()
            )));
        }
        Ok(self.predict_frames(request)?.into_iter().map(|v| v.into_iter().map(|f| f.to_rgb()).collect()).collect())
    }

    fn ground_truth(&self) -> Option<&WorldState> {
        None
    }
}

/// Per-pixel MAE of model and copy baseline on frames whose ground truth
/// differs from the condition frame. Ground truth, model output and
/// baseline are all compared after the codec round trip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub model: f64,
    pub baseline: f64,
    pub frames: usize,
}

impl MaeReport {
    /// Relative MAE reduction of the model over the baseline.
    pub fn improvement(&self) -> f64 {
        1.0 - self.model / self.baseline
    }
}

fn codec_roundtrip(codec: &LatentCodec, img: &RgbImage) -> Result<Frame, BackendError> {
    let l = codec.encode(&img.to_frame()).map_err(model_err)?;
    codec.decode(&l).map_err(model_err)
}

/// Per-window model MAE on motion frames, with the paired baseline MAE.
pub fn evaluate_windows(backend: &mut LearnedBackend, corpus: &[Episode], wins: &[Window]) -> Result<Vec<MaeReport>, BackendError> {
    let chunk = backend.config.chunk;
    let mut out = Vec::with_capacity(wins.len());
    for &w in wins {
        let ep = &corpus[w.episode];
        let s = w.start;
        let memory = window_memory(ep, s, chunk, backend.builder.memory_slots);
        let req = ChunkRequest {
            condition_frames: &ep.frames[s],
            condition_action: &ep.actions[s],
            actions: &ep.actions[s + 1..=s + chunk],
            memory: &memory,
        };
        let pred = backend.predict_frames(&req)?;
        let codec = &backend.builder.codec;
        let mut r = MaeReport { model: 0.0, baseline: 0.0, frames: 0 };
        for (v, pv) in pred.iter().enumerate() {
            let base = codec_roundtrip(codec, &ep.frames[s][v])?;
            for (k, p) in pv.iter().enumerate() {
                let gt_img = &ep.frames[s + 1 + k][v];
                if *gt_img == ep.frames[s][v] {
                    continue;
                }
                let gt = codec_roundtrip(codec, gt_img)?;
                r.model += p.mean_abs_diff(&gt);
                r.baseline += base.mean_abs_diff(&gt);
                r.frames += 1;
            }
        }
        if r.frames > 0 {
            r.model /= r.frames as f64;
            r.baseline /= r.frames as f64;
        }
        out.push(r);
    }
    Ok(out)
}

/// Frame-weighted aggregate of per-window reports.
pub fn aggregate_mae(reports: &[MaeReport]) -> MaeReport {
    let frames: usize = reports.iter().map(|r| r.frames).sum();
    let f = frames.max(1) as f64;
    MaeReport {
        model: reports.iter().map(|r| r.model * r.frames as f64).sum::<f64>() / f,
        baseline: reports.iter().map(|r| r.baseline * r.frames as f64).sum::<f64>() / f,
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::default_rig;

    fn head_rig() -> CameraRig {
        CameraRig { views: vec![default_rig().views[0].clone()] }
    }

    fn tiny_config() -> LearnedConfig {
        LearnedConfig {
            denoiser: DenoiserConfig { c_base: 8, ctx_dim: 16, delta_tokens: 4, attn_dim: 8, time_dim: 16, ..Default::default() },
            diffusion: DiffusionConfig { sampler_steps: 2, ..Default::default() },
            batch: 1,
            frames_per_sample: 2,
            ..Default::default()
        }
    }

    #[test]
    fn corpus_has_requested_failures() {
        let rig = head_rig();
        let corpus = build_corpus(&CorpusConfig { episodes: 10, failure_fraction: 0.3, ..Default::default() }, &rig).unwrap();
        assert_eq!(corpus.iter().filter(|e| e.noise == NoiseLevel::EmptyGrasp).count(), 3);
        assert!(failure_rate(&corpus) >= 0.3);
        for ep in &corpus {
            assert!(ep.len() >= 65);
            assert_eq!(ep.frames.len(), ep.actions.len());
            if ep.noise == NoiseLevel::EmptyGrasp {
                assert!(!ep.succeeded);
            }
        }
    }

    #[test]
    fn window_memory_is_previous_chunk() {
        let rig = head_rig();
        let ep = simulate_episode(&SceneConfig::default(), &rig, NoiseLevel::Gaussian(0.0), 0, 40).unwrap();
        assert!(window_memory(&ep, 10, 16, 4).is_empty());
        let m = window_memory(&ep, 20, 16, 4);
        let got: Vec<&RgbImage> = m.entries().iter().map(|e| &e.frames[0]).collect();
        for (g, t) in got.iter().zip([8, 12, 16, 20]) {
            assert_eq!(**g, ep.frames[t][0]);
        }
    }

    #[test]
    fn training_runs_and_generates() {
        let rig = head_rig();
        let config = tiny_config();
        let builder = config.builder(rig.clone());
        let corpus = build_corpus(&CorpusConfig { episodes: 2, failure_fraction: 0.5, ..Default::default() }, &rig).unwrap();
        let mut model = TinyDenoiser::new(config.denoiser.clone());
        let report = train_model(&mut model, &config, &builder, &corpus, TrainBudget { max_steps: 3, max_seconds: 60.0 }, |_, _| {}).unwrap();
        assert_eq!(report.steps, 3);
        assert!(report.losses.iter().all(|l| l.is_finite()));
        let mut backend = LearnedBackend::new(model, config, rig).unwrap();
        let ep = &corpus[0];
        let memory = SparseMemory::new(4);
        let req = ChunkRequest { condition_frames: &ep.frames[0], condition_action: &ep.actions[0], actions: &ep.actions[1..17], memory: &memory };
        let out = backend.generate(&req).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 16);
        assert!(backend.ground_truth().is_none());
    }
}
