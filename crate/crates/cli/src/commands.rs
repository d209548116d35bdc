//! Subcommand definitions and their implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde_json::{json, Value};

use acwm::action_map::{render_action_map_sequence, GlyphStyle};
use acwm::backend::WorldModelBackend;
use acwm::eval_harness::{
    adjudicate_auto, aggregate_sr, compare_backends, oracle_factory, run_episode, summary_table, CompareConfig, EvalError, PolicySpec, TaskCase,
};
use acwm::geometry::{compute_ray_map, ActionTrajectory, CameraRig, RayMap};
use acwm::image::RgbImage;
use acwm::learned::{aggregate_mae, build_corpus, evaluate_windows, failure_rate, simulate_episode, train_model, windows, CorpusConfig, LearnedBackend, LearnedConfig};
use acwm::diffusion::TinyDenoiser;
use acwm::store::{load_checkpoint, save_checkpoint, RolloutStore};
use acwm::trajectory_engine::{detect_contact_phase, emit_dataset, segment_phases, synthesize_dataset, DEFAULT_CLOSE, DEFAULT_OPEN};
use acwm::world::{default_rig, plan_pick_place, Aabb, NoiseLevel, OracleBackend, Policy, SceneConfig, ScriptedPolicy, ZeroPolicy};

use crate::config::AppConfig;
use crate::error::{invalid, runtime, CliError};
use crate::policies::RandomWalkPolicy;
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "acwm", version, about = "Action-conditioned multi-view world model toolkit")]
pub struct Cli {
    /// JSON config file with partial overrides (see README)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Oracle,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    RandomWalk,
    Scripted,
    Zero,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run scripted episodes in randomized scenes and record them
    Simulate {
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        /// Gaussian grasp/release jitter in meters
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Shift every grasp well beyond the grasp radius
        #[arg(long)]
        empty_grasp: bool,
        #[arg(long, value_delimiter = ',', default_value = "head,wrist")]
        views: Vec<String>,
    },
    /// Write action-map and ray-map PNGs for a trajectory
    RenderMaps {
        /// Trajectory JSON; defaults to the scripted plan in the default scene
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "head,wrist")]
        views: Vec<String>,
    },
    /// Print the contact phase of a trajectory
    Segment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CLOSE)]
        close: f64,
        #[arg(long, default_value_t = DEFAULT_OPEN)]
        open: f64,
        /// Also print inclusive fetch/grasp/home index ranges
        #[arg(long)]
        phases: bool,
    },
    /// Build an augmented dataset from scripted seed episodes
    Augment {
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        n_back: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "head,wrist")]
        views: Vec<String>,
    },
    /// Train the tiny denoiser on a synthetic corpus and save a checkpoint
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        failure_fraction: Option<f64>,
        /// Report held-out MAE against the copy baseline after training
        #[arg(long)]
        eval: bool,
    },
    /// Run one closed-loop rollout and store its record
    Rollout {
        #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
        backend: BackendKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Maximum number of chunks
        #[arg(long, default_value_t = 30)]
        chunks: usize,
        #[arg(long, value_enum, default_value_t = PolicyKind::RandomWalk)]
        policy: PolicyKind,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        /// Use a randomized scene drawn from --seed instead of the default scene
        #[arg(long)]
        randomize: bool,
        #[arg(long, value_delimiter = ',', default_value = "head,wrist")]
        views: Vec<String>,
    },
    /// Success rates of noise-graded scripted policies on one backend
    Evaluate {
        #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
        backend: BackendKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Store frame PNGs with each record
        #[arg(long)]
        save_frames: bool,
        #[arg(long, value_delimiter = ',', default_value = "head")]
        views: Vec<String>,
    },
    /// Rank consistency between the oracle and a candidate backend
    Compare {
        #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
        candidate: BackendKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1000,2000")]
        task_seeds: Vec<u64>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "head")]
        views: Vec<String>,
    },
    /// HTTP service for interactive stepping and adjudication
    Serve {
        #[arg(long, env = "PORT", default_value_t = 8080)]
        port: u16,
        /// Rollout store root; defaults to --out
        #[arg(long)]
        store: Option<PathBuf>,
        /// Checkpoint directory enabling the learned backend
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<Value, CliError> {
    let config = AppConfig::load(cli.config.as_deref())?;
    let ctx = Ctx { config, seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Simulate { episodes, sigma, empty_grasp, views } => ctx.simulate(episodes, sigma, empty_grasp, &views),
        Command::RenderMaps { input, views } => ctx.render_maps(input.as_deref(), &views),
        Command::Segment { input, close, open, phases } => segment(&input, close, open, phases),
        Command::Augment { samples, seeds, n_back, views } => ctx.augment(samples, seeds, n_back, &views),
        Command::Train { steps, seconds, episodes, failure_fraction, eval } => ctx.train(steps, seconds, episodes, failure_fraction, eval),
        Command::Rollout { backend, checkpoint, chunks, policy, sigma, randomize, views } => {
            ctx.rollout(backend, checkpoint.as_deref(), chunks, policy, sigma, randomize, &views)
        }
        Command::Evaluate { backend, checkpoint, sigmas, episodes, save_frames, views } => {
            ctx.evaluate(backend, checkpoint.as_deref(), &sigmas, episodes, save_frames, &views)
        }
        Command::Compare { candidate, checkpoint, sigmas, task_seeds, episodes, views } => {
            ctx.compare(candidate, checkpoint.as_deref(), &sigmas, &task_seeds, episodes, &views)
        }
        Command::Serve { port, store, checkpoint } => {
            let store = store.unwrap_or(ctx.out.clone());
            let model = checkpoint.as_deref().map(load_model).transpose()?;
            let state = server::AppState::new(&store, model, ctx.config.episode).map_err(runtime)?;
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(server::serve(state, port)).map_err(runtime)?;
            Ok(json!({"stopped": true}))
        }
    }
}

struct Ctx {
    config: AppConfig,
    seed: u64,
    out: PathBuf,
}

fn rig_for(views: &[String]) -> Result<CameraRig, CliError> {
    let rig = default_rig().select(views).map_err(invalid)?;
    rig.validate().map_err(invalid)?;
    Ok(rig)
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn write_png(p: &Path, img: &RgbImage) -> Result<(), CliError> {
    fs::write(p, img.to_png_bytes().map_err(runtime)?).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

fn write_json(p: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(v).map_err(runtime)?;
    fs::write(p, bytes).map_err(|e| runtime(format!("{}: {e}", p.display())))
}

pub fn read_trajectory(path: &Path) -> Result<ActionTrajectory, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let t: ActionTrajectory = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    t.validate().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(t)
}

pub fn load_model(dir: &Path) -> Result<(TinyDenoiser, LearnedConfig), CliError> {
    let (model, manifest) = load_checkpoint(dir).map_err(|e| invalid(format!("checkpoint {}: {e}", dir.display())))?;
    Ok((model, manifest.config))
}

fn segment(input: &Path, close: f64, open: f64, phases: bool) -> Result<Value, CliError> {
    let traj = read_trajectory(input)?;
    let phase = detect_contact_phase(&traj.openness(0), close, open).map_err(invalid)?;
    let mut v = json!({"t_b": phase.t_b, "t_e": phase.t_e});
    if phases {
        let s = segment_phases(&traj, phase).map_err(invalid)?;
        let (f, g) = (s.fetch.len() - 1, s.grasp.len() - 1);
        v["segments"] = json!({"fetch": [0, f], "grasp": [f, f + g], "home": [f + g, f + g + s.home.len() - 1]});
    }
    Ok(v)
}

/// Ray directions as RGB, `(d + 1) / 2`.
fn ray_image(m: &RayMap) -> RgbImage {
    let mut img = RgbImage::new(m.width, m.height);
    for i in 0..m.height {
        for j in 0..m.width {
            let d = m.directions[i * m.width + j];
            let c = |x: f64| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            img.put(j as i64, i as i64, [c(d.x), c(d.y), c(d.z)]);
        }
    }
    img
}

type LearnedFactory = dyn Fn(&SceneConfig, &CameraRig) -> Result<Box<dyn WorldModelBackend>, EvalError> + Sync;

fn learned_factory(model: TinyDenoiser, config: LearnedConfig, seed: u64) -> Arc<LearnedFactory> {
    Arc::new(move |_scene: &SceneConfig, rig: &CameraRig| {
        let mut b = LearnedBackend::new(model.clone(), config.clone(), rig.clone()).map_err(|e| EvalError::Other(e.to_string()))?.with_id("learned");
        b.reseed(seed);
        Ok(Box::new(b) as Box<dyn WorldModelBackend>)
    })
}

impl Ctx {
    fn require_model(&self, backend: BackendKind, checkpoint: Option<&Path>) -> Result<Option<(TinyDenoiser, LearnedConfig)>, CliError> {
        match (backend, checkpoint) {
            (BackendKind::Oracle, _) => Ok(None),
            (BackendKind::Learned, Some(p)) => load_model(p).map(Some),
            (BackendKind::Learned, None) => Err(invalid("--checkpoint is required for the learned backend")),
        }
    }

    fn make_backend(
        &self,
        model: &Option<(TinyDenoiser, LearnedConfig)>,
        scene: &SceneConfig,
        rig: &CameraRig,
    ) -> Result<Box<dyn WorldModelBackend>, CliError> {
        match model {
            None => Ok(Box::new(OracleBackend::new(scene.clone(), rig.clone()))),
            Some((m, c)) => learned_factory(m.clone(), c.clone(), self.seed)(scene, rig).map_err(runtime),
        }
    }

    fn simulate(&self, episodes: usize, sigma: f64, empty_grasp: bool, views: &[String]) -> Result<Value, CliError> {
        if !(sigma >= 0.0) {
            return Err(invalid("--sigma must be non-negative"));
        }
        let rig = rig_for(views)?;
        let noise = if empty_grasp { NoiseLevel::EmptyGrasp } else { NoiseLevel::Gaussian(sigma) };
        let root = self.out.join("episodes");
        let mut rows = Vec::new();
        for e in 0..episodes {
            let scene_seed = self.seed.wrapping_add(e as u64);
            let scene = SceneConfig::randomized(scene_seed);
            let ep = simulate_episode(&scene, &rig, noise, scene_seed, 0).map_err(runtime)?;
            let id = format!("episode_{e:04}");
            let dir = root.join(&id);
            let traj = ActionTrajectory::with_rate(ep.actions.clone(), 10.0).map_err(runtime)?;
            mkdir(&dir)?;
            write_json(&dir.join("trajectory.json"), &traj)?;
            write_json(&dir.join("scene.json"), &scene)?;
            write_json(&dir.join("final_state.json"), ep.states.last().unwrap())?;
            for (v, view) in rig.views.iter().enumerate() {
                let vdir = dir.join(&view.name);
                mkdir(&vdir)?;
                for (t, f) in ep.frames.iter().enumerate() {
                    write_png(&vdir.join(format!("{t:04}.png")), &f[v])?;
                }
            }
            rows.push(json!({"id": id, "scene_seed": scene_seed, "frames": ep.len(), "success": ep.succeeded}));
        }
        let successes = rows.iter().filter(|r| r["success"] == true).count();
        let summary = json!({"episodes": rows, "noise": noise.label(), "successes": successes, "dir": root});
        mkdir(&root)?;
        write_json(&root.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn render_maps(&self, input: Option<&Path>, views: &[String]) -> Result<Value, CliError> {
        let rig = rig_for(views)?;
        let traj = match input {
            Some(p) => read_trajectory(p)?,
            None => {
                let scene = SceneConfig::default();
                let plan = plan_pick_place(&scene.initial_state(), &scene, NoiseLevel::Gaussian(0.0), self.seed).map_err(runtime)?;
                ActionTrajectory::with_rate(plan.into_iter().map(|a| vec![a]).collect(), 10.0).map_err(runtime)?
            }
        };
        let maps = render_action_map_sequence(&traj, &rig, &GlyphStyle::default()).map_err(invalid)?;
        let root = self.out.join("maps");
        let first = &traj.frames()[0];
        let anchor = rig.views[0].extrinsics.camera_to_world(Some(first)).map_err(invalid)?;
        for (v, view) in rig.views.iter().enumerate() {
            let dir = root.join(&view.name);
            mkdir(&dir)?;
            for (t, img) in maps[v].iter().enumerate() {
                write_png(&dir.join(format!("action_{t:04}.png")), img)?;
            }
            let c2w = view.extrinsics.camera_to_world(Some(first)).map_err(invalid)?;
            let m = compute_ray_map(&view.camera, &c2w, &anchor, view.camera.height / 8, view.camera.width / 8);
            write_png(&dir.join("rays_direction.png"), &ray_image(&m))?;
        }
        Ok(json!({"frames": traj.len(), "views": views, "dir": root}))
    }

    fn augment(&self, samples: usize, seeds: usize, n_back: Option<usize>, views: &[String]) -> Result<Value, CliError> {
        let rig = rig_for(views)?;
        let mut spec = self.config.augmentation.clone();
        spec.samples = samples;
        spec.seed = self.seed;
        if let Some(n) = n_back {
            spec.n_back = n;
        }
        spec.validate().map_err(invalid)?;
        if seeds == 0 {
            return Err(invalid("--seeds must be positive"));
        }
        let ds = synthesize_dataset(seeds, &spec, &rig, 10.0).map_err(runtime)?;
        let root = self.out.join("dataset");
        let manifest = emit_dataset(&ds.seeds, &ds.augmented, &spec, &root).map_err(runtime)?;
        Ok(json!({
            "seeds": manifest.seeds.len(),
            "augmented": manifest.augmented.len(),
            "manifest": root.join("manifest.json"),
        }))
    }

    fn train(&self, steps: Option<usize>, seconds: Option<f64>, episodes: Option<usize>, failure_fraction: Option<f64>, eval: bool) -> Result<Value, CliError> {
        let mut lc = self.config.learned.clone();
        lc.seed = self.seed;
        let mut cc: CorpusConfig = self.config.corpus.clone();
        cc.seed = self.seed;
        if let Some(e) = episodes {
            cc.episodes = e;
        }
        if let Some(f) = failure_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid("--failure-fraction must be in [0, 1]"));
            }
            cc.failure_fraction = f;
        }
        let mut budget = self.config.budget;
        if let Some(s) = steps {
            budget.max_steps = s;
        }
        if let Some(s) = seconds {
            budget.max_seconds = s;
        }
        if budget.max_steps == 0 || !(budget.max_seconds > 0.0) || cc.episodes == 0 {
            return Err(invalid("training needs positive steps, seconds and episodes"));
        }
        let rig = CameraRig { views: vec![default_rig().views[0].clone()] };
        let corpus = build_corpus(&cc, &rig).map_err(runtime)?;
        let fr = failure_rate(&corpus);
        log::info!("corpus: {} episodes, failure rate {fr:.2}", corpus.len());
        let builder = lc.builder(rig.clone());
        let mut model = TinyDenoiser::new(lc.denoiser.clone());
        let report = train_model(&mut model, &lc, &builder, &corpus, budget, |step, loss| {
            if step % 100 == 0 {
                log::info!("step {step} loss {loss:.5}");
            }
        })
        .map_err(runtime)?;
        let mut notes = json!({
            "steps": report.steps,
            "seconds": report.seconds,
            "tail_loss": report.tail_loss(100),
            "corpus": cc,
            "failure_rate": fr,
        });
        if eval {
            let held = build_corpus(&CorpusConfig { episodes: 8, seed: 99, ..cc.clone() }, &rig).map_err(runtime)?;
            let wins = windows(&held, lc.chunk, lc.chunk);
            let mut backend = LearnedBackend::new(model.clone(), lc.clone(), rig).map_err(runtime)?;
            backend.reseed(self.seed);
            let r = aggregate_mae(&evaluate_windows(&mut backend, &held, &wins).map_err(runtime)?);
            notes["eval"] = json!({"mae": r.model, "baseline_mae": r.baseline, "frames": r.frames, "improvement": r.improvement()});
        }
        let dir = self.out.join("checkpoint");
        save_checkpoint(&dir, &model, &lc, notes.clone()).map_err(runtime)?;
        notes["checkpoint"] = json!(dir);
        Ok(notes)
    }

    #[allow(clippy::too_many_arguments)]
    fn rollout(
        &self,
        backend: BackendKind,
        checkpoint: Option<&Path>,
        chunks: usize,
        policy: PolicyKind,
        sigma: f64,
        randomize: bool,
        views: &[String],
    ) -> Result<Value, CliError> {
        let rig = rig_for(views)?;
        let model = self.require_model(backend, checkpoint)?;
        let mut cfg = self.config.episode;
        cfg.max_chunks = chunks;
        cfg.validate().map_err(invalid)?;
        if !(sigma >= 0.0) {
            return Err(invalid("--sigma must be non-negative"));
        }
        let scene = if randomize { SceneConfig::randomized(self.seed) } else { SceneConfig::default() };
        let s0 = scene.initial_state();
        let mut pol: Box<dyn Policy> = match policy {
            PolicyKind::RandomWalk => {
                let bounds = Aabb::new(Vector3::new(-0.3, -0.2, 0.05), Vector3::new(0.3, 0.3, 0.35));
                Box::new(RandomWalkPolicy::new(self.seed, cfg.chunk, bounds))
            }
            PolicyKind::Scripted => Box::new(ScriptedPolicy::new(&scene, &s0, NoiseLevel::Gaussian(sigma), self.seed, cfg.chunk).map_err(invalid)?),
            PolicyKind::Zero => Box::new(ZeroPolicy { chunk: cfg.chunk }),
        };
        let mut be = self.make_backend(&model, &scene, &rig)?;
        let init = OracleBackend::new(scene.clone(), rig.clone()).observe().map_err(runtime)?;
        let episode_id = format!("rollout_s{}", self.seed);
        let record = run_episode(&episode_id, pol.as_mut(), be.as_mut(), init, vec![s0.gripper], &scene.task, &cfg).map_err(runtime)?;
        let store = RolloutStore::open(&self.out).map_err(runtime)?;
        let dir = store.save(&record).map_err(runtime)?;
        let auto = adjudicate_auto(&record, &scene.task).ok().map(|v| v.label);
        Ok(json!({
            "id": record.id,
            "chunks": record.chunks.len(),
            "frames": record.frame_count(),
            "termination": record.termination,
            "auto_label": auto,
            "content_hash": record.content_hash(),
            "record": dir.join("record.json"),
        }))
    }

    fn evaluate(
        &self,
        backend: BackendKind,
        checkpoint: Option<&Path>,
        sigmas: &[f64],
        episodes: usize,
        save_frames: bool,
        views: &[String],
    ) -> Result<Value, CliError> {
        let rig = rig_for(views)?;
        let model = self.require_model(backend, checkpoint)?;
        let cfg = self.config.episode;
        if episodes == 0 || sigmas.is_empty() || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("need episodes > 0 and non-negative sigmas"));
        }
        let store = RolloutStore::open(&self.out).map_err(runtime)?;
        let existing = store.verdicts().map_err(runtime)?;
        let task = TaskCase { id: "pick_place".into(), scene_seed: 10_000 + self.seed, randomize: true };
        let mut per_policy = Vec::new();
        for &sigma in sigmas {
            let spec = PolicySpec { id: NoiseLevel::Gaussian(sigma).label(), noise: NoiseLevel::Gaussian(sigma) };
            let mut ids = Vec::new();
            let mut verdicts = Vec::new();
            for e in 0..episodes {
                let scene = task.scene(e);
                let s0 = scene.initial_state();
                let mut pol = ScriptedPolicy::new(&scene, &s0, spec.noise, self.seed.wrapping_mul(1_000_003).wrapping_add(e as u64), cfg.chunk).map_err(runtime)?;
                let mut be = self.make_backend(&model, &scene, &rig)?;
                let init = OracleBackend::new(scene.clone(), rig.clone()).observe().map_err(runtime)?;
                let mut r = run_episode(&format!("eval_{}_{e:04}", spec.id), &mut pol, be.as_mut(), init, vec![s0.gripper], &scene.task, &cfg).map_err(runtime)?;
                if !save_frames {
                    r.chunks.iter_mut().for_each(|c| c.frames.clear());
                }
                store.save(&r).map_err(runtime)?;
                if let Ok(v) = adjudicate_auto(&r, &scene.task) {
                    if !existing.iter().any(|x| x.rollout_id == v.rollout_id && x.evaluator == v.evaluator) {
                        store.add_verdict(&v).map_err(runtime)?;
                    }
                    verdicts.push(v);
                }
                ids.push(r.id);
            }
            let sr = if verdicts.is_empty() { None } else { Some(aggregate_sr(&ids, &verdicts).map_err(runtime)?) };
            per_policy.push(json!({"policy": spec.id, "sigma": sigma, "episodes": ids.len(), "auto": sr}));
        }
        let rows = summary_table(&store.list().map_err(runtime)?, &store.verdicts().map_err(runtime)?);
        let report = json!({"backend": format!("{backend:?}").to_lowercase(), "policies": per_policy, "summary": rows});
        write_json(&self.out.join("report.json"), &report)?;
        Ok(report)
    }

    fn compare(
        &self,
        candidate: BackendKind,
        checkpoint: Option<&Path>,
        sigmas: &[f64],
        task_seeds: &[u64],
        episodes: usize,
        views: &[String],
    ) -> Result<Value, CliError> {
        let rig = rig_for(views)?;
        let model = self.require_model(candidate, checkpoint)?;
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("sigmas must be non-negative"));
        }
        let policies: Vec<PolicySpec> =
            sigmas.iter().map(|&s| PolicySpec { id: NoiseLevel::Gaussian(s).label(), noise: NoiseLevel::Gaussian(s) }).collect();
        let tasks: Vec<TaskCase> =
            task_seeds.iter().map(|&s| TaskCase { id: format!("pick_place_{s}"), scene_seed: s, randomize: true }).collect();
        let config = CompareConfig { episodes, seed: self.seed, episode: self.config.episode };
        let report = match model {
            None => compare_backends(&policies, &tasks, &tasks, &rig, &oracle_factory, &oracle_factory, &config),
            Some((m, c)) => {
                let f = learned_factory(m, c, self.seed);
                compare_backends(&policies, &tasks, &tasks, &rig, &oracle_factory, f.as_ref(), &config)
            }
        }
        .map_err(|e| match e {
            EvalError::NoEpisodes | EvalError::TaskMismatch(_) | EvalError::Config(_) => invalid(e),
            other => runtime(other),
        })?;
        mkdir(&self.out)?;
        write_json(&self.out.join("compare.json"), &report)?;
        serde_json::to_value(&report).map_err(runtime)
    }
}
