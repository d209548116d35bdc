//! Data engine: contact-phase detection, fetch/grasp/home segmentation,
//! spatial augmentation of the fetch phase, reversed-sequence generation
//! through a world-model backend, and dataset emission.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, ChunkRequest, SparseMemory, WorldModelBackend};
use crate::geometry::{interpolate_action, wrap_angle, ActionFrame, ActionTrajectory, CameraRig, GeometryError, Rpy};
use crate::image::RgbImage;
use crate::learned::simulate_episode;
use crate::world::{Aabb, NoiseLevel, OracleBackend, SceneConfig, WorldRules, MAX_STEP_M};

pub const DEFAULT_CLOSE: f64 = 0.5;
pub const DEFAULT_OPEN: f64 = 0.9;
const STEP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("series has {0} frames, need at least 3")]
    TooShort(usize),
    #[error("thresholds must satisfy close < open (close {close}, open {open})")]
    Thresholds { close: f64, open: f64 },
    #[error("no gripper closure found")]
    NoContact,
    #[error("gripper closes at frame {t_b} and never reopens")]
    OpenEnded { t_b: usize },
    #[error("invalid phase: {0}")]
    InvalidPhase(String),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("sample {sample}: no valid perturbation after {retries} draws")]
    Exhausted { sample: usize, retries: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Encode { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContactPhase {
    pub t_b: usize,
    pub t_e: usize,
}

/// `t_b` is the first frame below `close` after the series has been at or
/// above `open`; `t_e` is the first frame after `t_b` back at or above
/// `open`. Values between the thresholds never change state.
pub fn detect_contact_phase(openness: &[f64], close: f64, open: f64) -> Result<ContactPhase, EngineError> {
    if openness.len() < 3 {
        return Err(EngineError::TooShort(openness.len()));
    }
    if !(close < open) {
        return Err(EngineError::Thresholds { close, open });
    }
    let mut armed = false;
    let mut t_b = None;
    for (i, &o) in openness.iter().enumerate() {
        match t_b {
            None if armed && o < close => t_b = Some(i),
            None if o >= open => armed = true,
            Some(b) if o >= open => return Ok(ContactPhase { t_b: b, t_e: i }),
            _ => {}
        }
    }
    match t_b {
        Some(t_b) => Err(EngineError::OpenEnded { t_b }),
        None => Err(EngineError::NoContact),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segments {
    pub fetch: ActionTrajectory,
    pub grasp: ActionTrajectory,
    pub home: ActionTrajectory,
}

/// Fetch `[0, t_b]`, grasp `[t_b, t_e]`, home `[t_e, end]`; boundary frames
/// appear in both neighbouring segments.
pub fn segment_phases(traj: &ActionTrajectory, phase: ContactPhase) -> Result<Segments, EngineError> {
    if !(0 < phase.t_b && phase.t_b < phase.t_e && phase.t_e < traj.len()) {
        return Err(EngineError::InvalidPhase(format!("{phase:?} for length {}", traj.len())));
    }
    Ok(Segments {
        fetch: traj.slice(0, phase.t_b)?,
        grasp: traj.slice(phase.t_b, phase.t_e)?,
        home: traj.slice(phase.t_e, traj.len() - 1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    /// Look-back frames N.
    pub n_back: usize,
    pub position_bounds: [f64; 3],
    pub rpy_bounds: [f64; 3],
    pub samples: usize,
    pub seed: u64,
    pub workspace: Aabb,
    pub max_step_m: f64,
    pub max_retries: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            n_back: 10,
            position_bounds: [0.05; 3],
            rpy_bounds: [0.0, 0.0, 0.1],
            samples: 3,
            seed: 0,
            workspace: WorldRules::default().workspace,
            max_step_m: MAX_STEP_M,
            max_retries: 200,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_back < 2 {
            return Err(EngineError::InvalidSpec(format!("n_back {} < 2", self.n_back)));
        }
        if self.position_bounds.iter().chain(&self.rpy_bounds).any(|b| !(*b >= 0.0)) {
            return Err(EngineError::InvalidSpec("bounds must be non-negative".into()));
        }
        if !(self.max_step_m > 0.0) {
            return Err(EngineError::InvalidSpec("max_step_m must be positive".into()));
        }
        Ok(())
    }

    /// Seed of the generator used for `sample` of seed trajectory `seed_index`.
    pub fn sample_seed(&self, seed_index: usize, sample: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((seed_index as u64).to_le_bytes());
        h.update((sample as u64).to_le_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }
}

/// One augmented trajectory: a new fetch from a perturbed start into the
/// unchanged contact frame, followed by the seed's remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedFetch {
    pub sample: usize,
    pub rng_seed: u64,
    /// Index of the new start frame in the seed trajectory (`t_b - N`).
    pub start: usize,
    /// Frames `a'_{t_b-N} ..= a_{t_b}`.
    pub fetch: Vec<ActionFrame>,
    pub trajectory: ActionTrajectory,
}

impl AugmentedFetch {
    /// Contact phase of the augmented trajectory.
    pub fn phase(&self, seed_phase: ContactPhase) -> ContactPhase {
        ContactPhase { t_b: seed_phase.t_b - self.start, t_e: seed_phase.t_e - self.start }
    }

    /// The fetch actions in reverse order, starting at `a_{t_b}`.
    pub fn reversed(&self) -> Vec<ActionFrame> {
        self.fetch.iter().rev().cloned().collect()
    }
}

/// Largest per-step position change over all arms.
pub fn max_step_delta(frames: &[ActionFrame]) -> f64 {
    frames
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b.pose.position - a.pose.position).norm()))
        .fold(0.0, f64::max)
}

pub fn kinematically_valid(frames: &[ActionFrame], max_step_m: f64) -> bool {
    max_step_delta(frames) <= max_step_m + STEP_TOLERANCE
}

/// Perturbs `a_{t_b-N}` uniformly within the spec bounds and re-interpolates
/// towards the untouched `a_{t_b}`, keeping the seed's openness profile.
/// Draws that leave the workspace or break the step bound are redrawn.
pub fn augment_fetch(
    traj: &ActionTrajectory,
    phase: ContactPhase,
    spec: &AugmentationSpec,
    seed_index: usize,
) -> Result<Vec<AugmentedFetch>, EngineError> {
    spec.validate()?;
    if phase.t_b < spec.n_back {
        return Err(EngineError::InvalidPhase(format!("t_b {} < N {}", phase.t_b, spec.n_back)));
    }
    if !(phase.t_b < phase.t_e && phase.t_e < traj.len()) {
        return Err(EngineError::InvalidPhase(format!("{phase:?} for length {}", traj.len())));
    }
    let n = spec.n_back;
    let start = phase.t_b - n;
    let frames = traj.frames();
    let end = &frames[phase.t_b];
    let mut out = Vec::with_capacity(spec.samples);
    for sample in 0..spec.samples {
        let rng_seed = spec.sample_seed(seed_index, sample);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut accepted = None;
        for _ in 0..spec.max_retries.max(1) {
            let new_start: ActionFrame = frames[start].iter().map(|a| perturb(a, spec, &mut rng)).collect();
            let mut fetch = Vec::with_capacity(n + 1);
            for i in 0..=n {
                if i == n {
                    fetch.push(end.clone());
                    break;
                }
                let s = i as f64 / n as f64;
                let mut f = Vec::with_capacity(end.len());
                for (arm, (a0, a1)) in new_start.iter().zip(end).enumerate() {
                    let mut a = interpolate_action(a0, a1, s)?;
                    a.openness = frames[start + i][arm].openness;
                    f.push(a);
                }
                fetch.push(f);
            }
            let inside = fetch.iter().flatten().all(|a| spec.workspace.contains(&a.pose.position));
            let mut full = fetch.clone();
            full.extend_from_slice(&frames[phase.t_b + 1..]);
            if inside && kinematically_valid(&full, spec.max_step_m) {
                accepted = Some((fetch, full));
                break;
            }
        }
        let Some((fetch, full)) = accepted else {
            return Err(EngineError::Exhausted { sample, retries: spec.max_retries });
        };
        let trajectory = ActionTrajectory::new(full, traj.timestamps()[start..].to_vec())?;
        out.push(AugmentedFetch { sample, rng_seed, start, fetch, trajectory });
    }
    Ok(out)
}

fn uniform(rng: &mut impl Rng, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        rng.random_range(-b..=b)
    }
}

fn perturb(a: &crate::geometry::ActionState, spec: &AugmentationSpec, rng: &mut impl Rng) -> crate::geometry::ActionState {
    let mut out = *a;
    let b = spec.position_bounds;
    out.pose.position += Vector3::new(uniform(rng, b[0]), uniform(rng, b[1]), uniform(rng, b[2]));
    let r = out.pose.rpy.as_array();
    let rb = spec.rpy_bounds;
    out.pose.rpy = Rpy::new(
        wrap_angle(r[0] + uniform(rng, rb[0])),
        wrap_angle(r[1] + uniform(rng, rb[1])),
        wrap_angle(r[2] + uniform(rng, rb[2])),
    );
    out
}

/// Feeds `O_{t_b}` and the reversed action sequence `a_{t_b}, ..., a'_{t_b-N}`
/// to the backend and reverses the generated frames. Returns `[i][view]`
/// with frame `i` belonging to `a_{t_b-N+i}`; the last entry is `O_{t_b}`.
pub fn generate_reversed(
    o_tb: &[RgbImage],
    reversed_actions: &[ActionFrame],
    backend: &mut dyn WorldModelBackend,
) -> Result<Vec<Vec<RgbImage>>, EngineError> {
    if reversed_actions.len() < 2 {
        return Err(EngineError::InvalidPhase("reversed sequence needs at least two actions".into()));
    }
    let memory = SparseMemory::new(0);
    let request = ChunkRequest {
        condition_frames: o_tb,
        condition_action: &reversed_actions[0],
        actions: &reversed_actions[1..],
        memory: &memory,
    };
    let generated = backend.generate(&request)?;
    let k = reversed_actions.len() - 1;
    let mut out: Vec<Vec<RgbImage>> = (0..k).rev().map(|i| generated.iter().map(|v| v[i].clone()).collect()).collect();
    out.push(o_tb.to_vec());
    Ok(out)
}

/// A recorded seed: actions plus optional observations `[t][view]`.
#[derive(Debug, Clone)]
pub struct SeedRecord {
    pub id: String,
    pub trajectory: ActionTrajectory,
    pub frames: Option<Vec<Vec<RgbImage>>>,
    pub views: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AugmentedRecord {
    pub id: String,
    pub seed_id: String,
    pub augmentation: AugmentedFetch,
    pub phase: ContactPhase,
    pub frames: Option<Vec<Vec<RgbImage>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed_id: Option<String>,
    pub sample: Option<usize>,
    pub rng_seed: Option<u64>,
    pub contact: Option<ContactPhase>,
    pub trajectory: String,
    pub frames: Option<String>,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: AugmentationSpec,
    pub views: Vec<String>,
    pub seeds: Vec<ManifestEntry>,
    pub augmented: Vec<ManifestEntry>,
}

/// Writes `trajectories/*.json`, `frames/<id>/<view>/<idx>.png` and
/// `manifest.json` under `root`.
pub fn emit_dataset(
    seeds: &[SeedRecord],
    augmented: &[AugmentedRecord],
    spec: &AugmentationSpec,
    root: &Path,
) -> Result<Manifest, EngineError> {
    let traj_dir = root.join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(io_err(&traj_dir))?;
    let views = seeds.first().map(|s| s.views.clone()).unwrap_or_default();
    let mut manifest = Manifest { spec: spec.clone(), views: views.clone(), seeds: vec![], augmented: vec![] };
    for s in seeds {
        let trajectory = write_trajectory(root, &s.id, &s.trajectory)?;
        let frames = s.frames.as_ref().map(|f| write_frames(root, &s.id, &views, f)).transpose()?;
        manifest.seeds.push(ManifestEntry {
            id: s.id.clone(),
            seed_id: None,
            sample: None,
            rng_seed: None,
            contact: None,
            trajectory,
            frames,
            length: s.trajectory.len(),
        });
    }
    for a in augmented {
        let trajectory = write_trajectory(root, &a.id, &a.augmentation.trajectory)?;
        let frames = a.frames.as_ref().map(|f| write_frames(root, &a.id, &views, f)).transpose()?;
        manifest.augmented.push(ManifestEntry {
            id: a.id.clone(),
            seed_id: Some(a.seed_id.clone()),
            sample: Some(a.augmentation.sample),
            rng_seed: Some(a.augmentation.rng_seed),
            contact: Some(a.phase),
            trajectory,
            frames,
            length: a.augmentation.trajectory.len(),
        });
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| EngineError::Encode { path: path.clone(), message: e.to_string() })?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

fn write_trajectory(root: &Path, id: &str, traj: &ActionTrajectory) -> Result<String, EngineError> {
    let rel = format!("trajectories/{id}.json");
    let path = root.join(&rel);
    let json = serde_json::to_vec_pretty(traj).map_err(|e| EngineError::Encode { path: path.clone(), message: e.to_string() })?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(rel)
}

fn write_frames(root: &Path, id: &str, views: &[String], frames: &[Vec<RgbImage>]) -> Result<String, EngineError> {
    let rel = format!("frames/{id}");
    for (v, name) in views.iter().enumerate() {
        let dir = root.join(&rel).join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (i, f) in frames.iter().enumerate() {
            let path = dir.join(format!("{i:04}.png"));
            let bytes = f[v].to_png_bytes().map_err(|e| EngineError::Encode { path: path.clone(), message: e.to_string() })?;
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
    }
    Ok(rel)
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, EngineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Synthetic seeds and their augmentations from the scripted world.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub seeds: Vec<SeedRecord>,
    pub augmented: Vec<AugmentedRecord>,
    /// Seed contact phases, parallel to `seeds`.
    pub phases: Vec<ContactPhase>,
}

/// Records `seeds` noiseless scripted episodes in randomized scenes,
/// augments each fetch phase and renders the new fetch frames by reversed
/// generation through the oracle backend.
pub fn synthesize_dataset(seeds: usize, spec: &AugmentationSpec, rig: &CameraRig, hz: f64) -> Result<SyntheticDataset, EngineError> {
    let mut out = SyntheticDataset { seeds: vec![], augmented: vec![], phases: vec![] };
    let views: Vec<String> = rig.views.iter().map(|v| v.name.clone()).collect();
    for i in 0..seeds {
        let scene_seed = spec.seed.wrapping_add(i as u64);
        let scene = SceneConfig::randomized(scene_seed);
        let ep = simulate_episode(&scene, rig, NoiseLevel::Gaussian(0.0), scene_seed, 0)?;
        let traj = ActionTrajectory::with_rate(ep.actions.clone(), hz)?;
        let openness = traj.openness(0);
        let phase = detect_contact_phase(&openness, DEFAULT_CLOSE, DEFAULT_OPEN)?;
        let id = format!("seed_{i:03}");
        for aug in augment_fetch(&traj, phase, spec, i)? {
            let mut oracle = OracleBackend::from_state(scene.clone(), rig.clone(), ep.states[phase.t_b].clone());
            let mut frames = generate_reversed(&ep.frames[phase.t_b], &aug.reversed(), &mut oracle)?;
            frames.extend_from_slice(&ep.frames[phase.t_b + 1..]);
            out.augmented.push(AugmentedRecord {
                id: format!("{id}_aug{:02}", aug.sample),
                seed_id: id.clone(),
                phase: aug.phase(phase),
                augmentation: aug,
                frames: Some(frames),
            });
        }
        out.seeds.push(SeedRecord { id, trajectory: traj, frames: Some(ep.frames), views: views.clone() });
        out.phases.push(phase);
    }
    Ok(out)
}
