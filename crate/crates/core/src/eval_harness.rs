//! Closed-loop policy evaluation through a world-model backend: episode
//! loop with threshold termination, automatic adjudication, majority-vote
//! success rates and backend consistency reports.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{ChunkFrames, WorldModelBackend};
use crate::geometry::{delta_action, ActionFrame, CameraRig, GeometryError};
use crate::image::RgbImage;
use crate::rollout::ChunkLoop;
use crate::world::{success, NoiseLevel, Observation, OracleBackend, Policy, SceneConfig, ScriptedPolicy, TaskSpec, WorldState};

pub const DEFAULT_EPS_TERM: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("rollout {0} has no ground truth; it needs human verdicts")]
    NotAdjudicable(String),
    #[error("no episodes to aggregate")]
    NoEpisodes,
    #[error("rollout {0} has no verdicts")]
    MissingVerdicts(String),
    #[error("evaluator {evaluator} already labelled rollout {rollout}")]
    DuplicateVerdict { rollout: String, evaluator: String },
    #[error("task sets differ: {0}")]
    TaskMismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum Termination {
    Threshold,
    MaxChunks,
    BackendError(String),
    PolicyError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedChunk {
    pub index: usize,
    pub actions: Vec<ActionFrame>,
    /// SHA-256 of each generated frame, `[view][k]`.
    pub frame_hashes: Vec<Vec<String>>,
    pub mean_delta_norm: f64,
    #[serde(skip)]
    pub frames: ChunkFrames,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub per_chunk_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub id: String,
    pub episode_id: String,
    pub task_id: String,
    pub backend_id: String,
    pub policy_id: String,
    pub chunk_size: usize,
    pub max_chunks: usize,
    pub views: Vec<String>,
    pub chunks: Vec<RecordedChunk>,
    pub termination: Termination,
    pub timing: Timing,
    /// Final simulator state when the backend exposes one.
    pub final_state: Option<WorldState>,
}

impl RolloutRecord {
    pub fn frame_count(&self) -> usize {
        self.chunks.iter().map(|c| c.frame_hashes.iter().map(Vec::len).sum::<usize>()).sum()
    }

    /// Hash over everything except wall-clock timing.
    pub fn content_hash(&self) -> String {
        let mut r = self.clone();
        r.timing = Timing::default();
        hex::encode(Sha256::digest(serde_json::to_vec(&r).expect("record serialises")))
    }

    pub fn last_frames(&self) -> Option<Vec<&RgbImage>> {
        let c = self.chunks.last()?;
        c.frames.iter().map(|v| v.last()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub chunk: usize,
    pub memory: usize,
    pub eps_term: f64,
    pub max_chunks: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { chunk: 16, memory: 4, eps_term: DEFAULT_EPS_TERM, max_chunks: 30 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.eps_term > 0.0) {
            return Err(EvalError::Config("eps_term must be positive".into()));
        }
        if self.chunk == 0 || self.max_chunks == 0 || self.memory > self.chunk {
            return Err(EvalError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Mean over the chunk's steps of the delta-action norm (sqrt of the
/// unweighted sum of squares, summed over arms), starting from `previous`.
pub fn mean_delta_norm(previous: &ActionFrame, chunk: &[ActionFrame]) -> Result<f64, GeometryError> {
    if chunk.is_empty() {
        return Ok(0.0);
    }
    let mut prev = previous;
    let mut total = 0.0;
    for f in chunk {
        if f.len() != prev.len() {
            return Err(GeometryError::ArmMismatch);
        }
        let mut sq = 0.0;
        for (a, b) in f.iter().zip(prev) {
            sq += delta_action(a, b)?.norm_squared();
        }
        total += sq.sqrt();
        prev = f;
    }
    Ok(total / chunk.len() as f64)
}

/// Policy ↔ backend loop. The policy sees the last generated frame of each
/// view; the episode stops after the first chunk whose mean delta norm is
/// below `eps_term`, at `max_chunks`, or on the first error.
pub fn run_episode(
    episode_id: &str,
    policy: &mut dyn Policy,
    backend: &mut dyn WorldModelBackend,
    init_frames: Vec<RgbImage>,
    init_action: ActionFrame,
    task: &TaskSpec,
    config: &EpisodeConfig,
) -> Result<RolloutRecord, EvalError> {
    config.validate()?;
    let start = Instant::now();
    let views: Vec<String> = backend.rig().views.iter().map(|v| v.name.clone()).collect();
    let mut record = RolloutRecord {
        id: format!("{episode_id}__{}__{}", backend.id(), policy.id()),
        episode_id: episode_id.into(),
        task_id: task.id.clone(),
        backend_id: backend.id().into(),
        policy_id: policy.id(),
        chunk_size: config.chunk,
        max_chunks: config.max_chunks,
        views,
        chunks: vec![],
        termination: Termination::MaxChunks,
        timing: Timing::default(),
        final_state: None,
    };
    let mut lp = ChunkLoop::new(init_frames, init_action, config.memory);
    loop {
        let t0 = Instant::now();
        let obs = Observation { frames: &lp.condition_frames, action: &lp.condition_action };
        let actions = match policy.next_chunk(&obs) {
            Ok(a) if a.len() == config.chunk => a,
            Ok(a) => {
                record.termination = Termination::PolicyError(format!("policy returned {} actions, expected {}", a.len(), config.chunk));
                break;
            }
            Err(e) => {
                record.termination = Termination::PolicyError(e.to_string());
                break;
            }
        };
        let norm = mean_delta_norm(&lp.condition_action, &actions)?;
        let trace = match lp.step(backend, &actions) {
            Ok(t) => t,
            Err(e) => {
                record.termination = Termination::BackendError(e.to_string());
                break;
            }
        };
        record.chunks.push(RecordedChunk {
            index: trace.index,
            actions: trace.actions,
            frame_hashes: trace.frames.iter().map(|v| v.iter().map(RgbImage::sha256).collect()).collect(),
            mean_delta_norm: norm,
            frames: trace.frames,
        });
        record.timing.per_chunk_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if norm < config.eps_term {
            record.termination = Termination::Threshold;
            break;
        }
        if record.chunks.len() >= config.max_chunks {
            record.termination = Termination::MaxChunks;
            break;
        }
    }
    record.final_state = backend.ground_truth().cloned();
    record.timing.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub rollout_id: String,
    pub evaluator: String,
    pub label: Label,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn now_epoch() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Labels a record from the final simulator state it carries.
pub fn adjudicate_auto(record: &RolloutRecord, task: &TaskSpec) -> Result<Verdict, EvalError> {
    let state = record.final_state.as_ref().ok_or_else(|| EvalError::NotAdjudicable(record.id.clone()))?;
    let ok = success(state, task).map_err(|e| EvalError::Other(e.to_string()))?;
    Ok(Verdict {
        rollout_id: record.id.clone(),
        evaluator: "auto".into(),
        label: if ok { Label::Success } else { Label::Failure },
        timestamp: now_epoch(),
    })
}

/// Strict majority of success labels; ties count as failure.
pub fn majority(labels: &[Label]) -> Label {
    let s = labels.iter().filter(|l| **l == Label::Success).count();
    if 2 * s > labels.len() {
        Label::Success
    } else {
        Label::Failure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrSummary {
    pub episodes: usize,
    pub successes: usize,
    pub sr: f64,
}

/// Success rate over `rollouts`, each labelled by majority vote of its
/// verdicts.
pub fn aggregate_sr(rollouts: &[String], verdicts: &[Verdict]) -> Result<SrSummary, EvalError> {
    if rollouts.is_empty() {
        return Err(EvalError::NoEpisodes);
    }
    let mut by: HashMap<&str, Vec<Label>> = HashMap::new();
    for v in verdicts {
        by.entry(v.rollout_id.as_str()).or_default().push(v.label);
    }
    let mut successes = 0;
    for r in rollouts {
        let labels = by.get(r.as_str()).ok_or_else(|| EvalError::MissingVerdicts(r.clone()))?;
        if majority(labels) == Label::Success {
            successes += 1;
        }
    }
    Ok(SrSummary { episodes: rollouts.len(), successes, sr: successes as f64 / rollouts.len() as f64 })
}

/// Rejects a second verdict from the same evaluator on the same rollout.
pub fn check_unique(existing: &[Verdict], v: &Verdict) -> Result<(), EvalError> {
    if existing.iter().any(|e| e.rollout_id == v.rollout_id && e.evaluator == v.evaluator) {
        return Err(EvalError::DuplicateVerdict { rollout: v.rollout_id.clone(), evaluator: v.evaluator.clone() });
    }
    Ok(())
}

/// Average ranks (1-based), ties share the mean rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with average ranks. Identical inputs give 1.0 even
/// when constant; otherwise a constant input has no defined correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    if a == b {
        return Some(1.0);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// A scripted policy checkpoint, identified by its noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub id: String,
    pub noise: NoiseLevel,
}

/// A task: a family of scenes drawn from `scene_seed + episode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCase {
    pub id: String,
    pub scene_seed: u64,
    pub randomize: bool,
}

impl TaskCase {
    pub fn scene(&self, episode: usize) -> SceneConfig {
        let mut s = if self.randomize { SceneConfig::randomized(self.scene_seed.wrapping_add(episode as u64)) } else { SceneConfig::default() };
        s.task.id = self.id.clone();
        s
    }
}

pub type BackendFactory<'a> = dyn Fn(&SceneConfig, &CameraRig) -> Result<Box<dyn WorldModelBackend>, EvalError> + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrCell {
    pub task: String,
    pub policy: String,
    pub oracle: SrSummary,
    pub candidate: SrSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub oracle_id: String,
    pub candidate_id: String,
    pub episodes: usize,
    pub cells: Vec<SrCell>,
    pub tasks: Vec<String>,
    pub policies: Vec<String>,
    pub task_sr_oracle: Vec<f64>,
    pub task_sr_candidate: Vec<f64>,
    pub policy_sr_oracle: Vec<f64>,
    pub policy_sr_candidate: Vec<f64>,
    pub task_ranks_oracle: Vec<f64>,
    pub task_ranks_candidate: Vec<f64>,
    pub policy_ranks_oracle: Vec<f64>,
    pub policy_ranks_candidate: Vec<f64>,
    pub spearman_tasks: Option<f64>,
    pub spearman_policies: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub episodes: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
}

/// Runs every policy on every task with both backends on the same episode
/// seeds and reports paired success rates and rank correlations.
pub fn compare_backends(
    policies: &[PolicySpec],
    oracle_tasks: &[TaskCase],
    candidate_tasks: &[TaskCase],
    rig: &CameraRig,
    oracle: &BackendFactory,
    candidate: &BackendFactory,
    config: &CompareConfig,
) -> Result<ConsistencyReport, EvalError> {
    if oracle_tasks != candidate_tasks {
        let a: Vec<&str> = oracle_tasks.iter().map(|t| t.id.as_str()).collect();
        let b: Vec<&str> = candidate_tasks.iter().map(|t| t.id.as_str()).collect();
        return Err(EvalError::TaskMismatch(format!("{a:?} vs {b:?}")));
    }
    if policies.is_empty() || oracle_tasks.is_empty() || config.episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let mut cells = Vec::new();
    let (mut oracle_id, mut cand_id) = (String::new(), String::new());
    for task in oracle_tasks {
        for p in policies {
            let mut sums = [Vec::new(), Vec::new()];
            for (side, factory) in [oracle, candidate].into_iter().enumerate() {
                let mut rollouts = Vec::new();
                let mut verdicts = Vec::new();
                for e in 0..config.episodes {
                    let scene = task.scene(e);
                    let mut backend = factory(&scene, rig)?;
                    if side == 0 {
                        oracle_id = backend.id().into();
                    } else {
                        cand_id = backend.id().into();
                    }
                    let state = scene.initial_state();
                    let init = crate::world::render_views(&state, &scene, rig)?;
                    let seed = config.seed.wrapping_mul(7919).wrapping_add(e as u64);
                    let mut policy = ScriptedPolicy::new(&scene, &state, p.noise, seed, config.episode.chunk)
                        .map_err(|err| EvalError::Other(err.to_string()))?;
                    let rec = run_episode(&format!("{}_{}_{e}", task.id, p.id), &mut policy, backend.as_mut(), init, vec![state.gripper], &scene.task, &config.episode)?;
                    verdicts.push(adjudicate_auto(&rec, &scene.task)?);
                    rollouts.push(rec.id);
                }
                sums[side].push(aggregate_sr(&rollouts, &verdicts)?);
            }
            cells.push(SrCell { task: task.id.clone(), policy: p.id.clone(), oracle: sums[0][0], candidate: sums[1][0] });
        }
    }
    let tasks: Vec<String> = oracle_tasks.iter().map(|t| t.id.clone()).collect();
    let pols: Vec<String> = policies.iter().map(|p| p.id.clone()).collect();
    let mean = |f: &dyn Fn(&SrCell) -> bool, cand: bool| -> f64 {
        let sel: Vec<&SrCell> = cells.iter().filter(|c| f(c)).collect();
        sel.iter().map(|c| if cand { c.candidate.sr } else { c.oracle.sr }).sum::<f64>() / sel.len() as f64
    };
    let task_o: Vec<f64> = tasks.iter().map(|t| mean(&|c: &SrCell| &c.task == t, false)).collect();
    let task_c: Vec<f64> = tasks.iter().map(|t| mean(&|c: &SrCell| &c.task == t, true)).collect();
    let pol_o: Vec<f64> = pols.iter().map(|p| mean(&|c: &SrCell| &c.policy == p, false)).collect();
    let pol_c: Vec<f64> = pols.iter().map(|p| mean(&|c: &SrCell| &c.policy == p, true)).collect();
    Ok(ConsistencyReport {
        oracle_id,
        candidate_id: cand_id,
        episodes: config.episodes,
        cells,
        spearman_tasks: spearman(&task_o, &task_c),
        spearman_policies: spearman(&pol_o, &pol_c),
        task_ranks_oracle: ranks(&task_o),
        task_ranks_candidate: ranks(&task_c),
        policy_ranks_oracle: ranks(&pol_o),
        policy_ranks_candidate: ranks(&pol_c),
        task_sr_oracle: task_o,
        task_sr_candidate: task_c,
        policy_sr_oracle: pol_o,
        policy_sr_candidate: pol_c,
        tasks,
        policies: pols,
    })
}

/// Backend factory for the ground-truth simulator.
pub fn oracle_factory(scene: &SceneConfig, rig: &CameraRig) -> Result<Box<dyn WorldModelBackend>, EvalError> {
    Ok(Box::new(OracleBackend::new(scene.clone(), rig.clone())))
}

/// Per-(policy, task) success rates from records and their verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub task: String,
    pub backend: String,
    pub summary: SrSummary,
    pub unlabelled: usize,
}

/// Groups records by (policy, task, backend); rollouts without any verdict
/// are reported as unlabelled and left out of the rate.
pub fn summary_table(records: &[RolloutRecord], verdicts: &[Verdict]) -> Vec<SummaryRow> {
    let labelled: std::collections::HashSet<&str> = verdicts.iter().map(|v| v.rollout_id.as_str()).collect();
    let mut groups: BTreeMap<(String, String, String), (Vec<String>, usize)> = BTreeMap::new();
    for r in records {
        let g = groups.entry((r.policy_id.clone(), r.task_id.clone(), r.backend_id.clone())).or_default();
        if labelled.contains(r.id.as_str()) {
            g.0.push(r.id.clone());
        } else {
            g.1 += 1;
        }
    }
    groups
        .into_iter()
        .map(|((policy, task, backend), (ids, unlabelled))| SummaryRow {
            policy,
            task,
            backend,
            summary: aggregate_sr(&ids, verdicts).unwrap_or(SrSummary { episodes: 0, successes: 0, sr: 0.0 }),
            unlabelled,
        })
        .collect()
}
