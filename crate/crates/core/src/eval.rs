//! Closed-loop evaluation: temporal ensembling, batched rollouts, mode
//! statistics, the regression baseline and the ablation grid.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, Env, Episode, Observation, Task};
use crate::error::{Error, Result};
use crate::nn::Variant;
use crate::policy::{Checkpoint, HeadKind, ObsBatch, PolicyConfig, PolicyNet, TokenizerKind};
use crate::schedule::{ddim_step, ddim_timesteps, gaussian, DiffusionState, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::tensor::Tensor;
use crate::training::{config_for_dataset, train, LogRecord, TrainConfig};

pub const DEFAULT_ENSEMBLE_DECAY: f64 = 0.1;
/// Bounds for the clean-sample estimate inside DDIM, in normalised action units.
pub const ACTION_CLIP: (f64, f64) = (-1.0, 1.0);
/// Rows of the fork2d arena where the agent passes the obstacle.
pub const PASSAGE_BAND: (f64, f64) = (0.4, 0.6);
/// Largest number of environments stepped through one forward pass.
pub const ROLLOUT_BATCH: usize = 25;

/// Recent chunk predictions with their emission steps.
#[derive(Clone, Debug)]
pub struct EnsembleBuffer {
    decay: f64,
    horizon: usize,
    action_dim: usize,
    chunks: VecDeque<(usize, Vec<f64>)>,
}

impl EnsembleBuffer {
    pub fn new(decay: f64, horizon: usize, action_dim: usize) -> Result<Self> {
        if !(decay >= 0.0 && decay.is_finite()) {
            return Err(Error::invalid(format!("ensemble decay must be finite and non-negative, got {decay}")));
        }
        if horizon == 0 || action_dim == 0 {
            return Err(Error::invalid("ensemble horizon and action_dim must be positive"));
        }
        Ok(EnsembleBuffer { decay, horizon, action_dim, chunks: VecDeque::new() })
    }

    /// Adds an `H × A` chunk emitted at step `t` and forgets chunks that end before `t`.
    pub fn push(&mut self, t: usize, chunk: Vec<f64>) -> Result<()> {
        if chunk.len() != self.horizon * self.action_dim {
            return Err(Error::ShapeMismatch { expected: vec![self.horizon, self.action_dim], got: vec![chunk.len()] });
        }
        if self.chunks.back().is_some_and(|(s, _)| *s > t) {
            return Err(Error::invalid(format!("chunk at step {t} is older than the newest buffered one")));
        }
        self.chunks.retain(|(s, _)| s + self.horizon > t);
        self.chunks.push_back((t, chunk));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Normalised weights of the chunks covering `t`, newest first, as
    /// `(emission step, weight)`.
    pub fn weights(&self, t: usize) -> Vec<(usize, f64)> {
        let covering: Vec<usize> =
            self.chunks.iter().rev().map(|(s, _)| *s).filter(|&s| s <= t && t < s + self.horizon).collect();
        let raw: Vec<f64> = (0..covering.len()).map(|i| (-self.decay * i as f64).exp()).collect();
        let total: f64 = raw.iter().sum();
        covering.into_iter().zip(raw).map(|(s, w)| (s, w / total)).collect()
    }
}

/// Convex combination of every buffered prediction for step `t`; the `i`-th
/// most recent carries weight `exp(−m·i)` before normalisation.
pub fn temporal_ensemble(buffer: &EnsembleBuffer, t: usize) -> Result<Vec<f64>> {
    let weights = buffer.weights(t);
    if weights.is_empty() {
        return Err(Error::invalid(format!("no buffered chunk covers step {t}")));
    }
    let a = buffer.action_dim;
    let row = |s: usize| {
        let chunk = &buffer.chunks.iter().rev().find(|(e, _)| *e == s).expect("weighted chunk is buffered").1;
        &chunk[(t - s) * a..(t - s + 1) * a]
    };
    // Offsets from the newest prediction, so agreeing predictions reproduce it exactly.
    let newest = row(weights[0].0);
    let mut out = newest.to_vec();
    for &(s, w) in &weights[1..] {
        for ((o, v), n) in out.iter_mut().zip(row(s)).zip(newest) {
            *o += w * (v - n);
        }
    }
    Ok(out)
}

/// One chunk request from an environment at step `t`.
pub struct PlanRequest<'a> {
    pub obs: &'a Observation,
    pub goal: usize,
    pub env_seed: u64,
    pub t: usize,
}

/// Anything that maps observations to action chunks in environment units.
pub trait Planner {
    fn horizon(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// One flattened `H × A` chunk per request.
    fn plan(&mut self, requests: &[PlanRequest]) -> Result<Vec<Vec<f64>>>;
}

/// Seed of the initial DDIM draw for one environment at one step.
pub fn chunk_seed(sample_seed: u64, env_seed: u64, t: usize) -> u64 {
    let mut z = sample_seed ^ env_seed.rotate_left(29) ^ (t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutOptions {
    pub ddim_steps: usize,
    /// Replan every step and blend overlapping chunks; otherwise execute each chunk open-loop.
    pub ensemble: bool,
    pub decay: f64,
    pub sample_seed: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { ddim_steps: 10, ensemble: true, decay: DEFAULT_ENSEMBLE_DECAY, sample_seed: 0 }
    }
}

/// Samples chunks from a checkpoint: DDIM for diffusion heads, a single
/// forward pass for regression heads.
pub struct CheckpointPlanner<'a> {
    ckpt: &'a Checkpoint,
    sched: NoiseSchedule,
    ddim: Vec<usize>,
    sample_seed: u64,
}

impl<'a> CheckpointPlanner<'a> {
    pub fn new(ckpt: &'a Checkpoint, ddim_steps: usize, sample_seed: u64) -> Result<Self> {
        let cfg = &ckpt.net.config;
        let sched = NoiseSchedule::cosine(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
        let ddim = match cfg.head {
            HeadKind::Diffusion => ddim_timesteps(cfg.diffusion_steps, ddim_steps)?,
            HeadKind::Regression => Vec::new(),
        };
        Ok(CheckpointPlanner { ckpt, sched, ddim, sample_seed })
    }

    fn sample(&self, net: &PolicyNet<f32>, obs: &ObsBatch, requests: &[PlanRequest]) -> Result<Tensor<f64>> {
        let cfg = &net.config;
        let (h, a) = (cfg.horizon, cfg.action_dim);
        let enc = net.encode(obs)?;
        let mut x = Vec::with_capacity(requests.len() * h * a);
        for r in requests {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(self.sample_seed, r.env_seed, r.t));
            x.extend(gaussian(&mut rng, h, a).data);
        }
        let mut state = DiffusionState { x: Tensor::from_vec(&[requests.len() * h, a], x), k: self.ddim[0] };
        for pair in self.ddim.windows(2) {
            let ks = vec![pair[0]; requests.len()];
            let eps = net.predict_epsilon_encoded(&enc, &state.x.cast(), &ks)?.cast();
            state = ddim_step(&state, &eps, pair[1], &self.sched, Some(ACTION_CLIP))?;
        }
        Ok(state.x)
    }
}

impl Planner for CheckpointPlanner<'_> {
    fn horizon(&self) -> usize {
        self.ckpt.net.config.horizon
    }

    fn action_dim(&self) -> usize {
        self.ckpt.net.config.action_dim
    }

    fn plan(&mut self, requests: &[PlanRequest]) -> Result<Vec<Vec<f64>>> {
        let net = &self.ckpt.net;
        let obs: Vec<&Observation> = requests.iter().map(|r| r.obs).collect();
        let goals: Vec<usize> = requests.iter().map(|r| r.goal).collect();
        let batch = ObsBatch::from_observations(&obs, &goals, &self.ckpt.stats);
        let chunks: Vec<f32> = match net.config.head {
            HeadKind::Diffusion => self.sample(net, &batch, requests)?.data.iter().map(|&v| v as f32).collect(),
            HeadKind::Regression => net.predict_chunk(&batch)?.data,
        };
        let n = self.horizon() * self.action_dim();
        Ok(chunks
            .chunks(n)
            .map(|c| self.ckpt.stats.denormalize_actions(c).into_iter().map(f64::from).collect())
            .collect())
    }
}

/// One closed-loop episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub env_seed: u64,
    pub goal: usize,
    /// Agent or gripper position before every step, then the final position.
    pub positions: Vec<[f64; 2]>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
}

impl Trajectory {
    /// Expert demonstration in trajectory form; positions come from proprio.
    pub fn from_episode(ep: &Episode, proprio_dim: usize) -> Self {
        let a = ep.actions.len() / ep.len.max(1);
        Trajectory {
            env_seed: 0,
            goal: ep.goal,
            positions: ep.proprio.chunks(proprio_dim).map(|p| [p[0] as f64, p[1] as f64]).collect(),
            actions: ep.actions.chunks(a.max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
            success: ep.success,
        }
    }
}

enum Pending {
    Ensemble(EnsembleBuffer),
    Queue(VecDeque<Vec<f64>>),
}

/// Steps one environment per `(env_seed, goal)` pair until all are done,
/// batching chunk requests across environments.
pub fn run_episodes<P: Planner>(
    planner: &mut P,
    task: Task,
    starts: &[(u64, usize)],
    ensemble: Option<f64>,
) -> Result<Vec<Trajectory>> {
    let (h, a) = (planner.horizon(), planner.action_dim());
    if a != task.action_dim() {
        return Err(Error::Config(format!("policy emits {a}-d actions but {task} expects {}", task.action_dim())));
    }
    let mut envs = starts.iter().map(|&(seed, goal)| Env::reset(task, seed, goal)).collect::<Result<Vec<_>>>()?;
    let mut pending = starts
        .iter()
        .map(|_| match ensemble {
            Some(m) => EnsembleBuffer::new(m, h, a).map(Pending::Ensemble),
            None => Ok(Pending::Queue(VecDeque::new())),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trajs: Vec<Trajectory> = starts
        .iter()
        .zip(&envs)
        .map(|(&(env_seed, goal), env)| Trajectory {
            env_seed,
            goal,
            positions: vec![env.position()],
            actions: Vec::new(),
            success: false,
        })
        .collect();
    loop {
        let active: Vec<usize> = (0..envs.len()).filter(|&i| !envs[i].done()).collect();
        if active.is_empty() {
            break;
        }
        let needs: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| match &pending[i] {
                Pending::Ensemble(_) => true,
                Pending::Queue(q) => q.is_empty(),
            })
            .collect();
        if !needs.is_empty() {
            let obs: Vec<Observation> = needs.iter().map(|&i| envs[i].observe()).collect();
            let requests: Vec<PlanRequest> = needs
                .iter()
                .zip(&obs)
                .map(|(&i, o)| PlanRequest { obs: o, goal: starts[i].1, env_seed: starts[i].0, t: envs[i].steps() })
                .collect();
            let chunks = planner.plan(&requests)?;
            if chunks.len() != needs.len() {
                return Err(Error::ShapeMismatch { expected: vec![needs.len()], got: vec![chunks.len()] });
            }
            for (&i, chunk) in needs.iter().zip(chunks) {
                let t = envs[i].steps();
                match &mut pending[i] {
                    Pending::Ensemble(buf) => buf.push(t, chunk)?,
                    Pending::Queue(q) => {
                        if chunk.len() != h * a {
                            return Err(Error::ShapeMismatch { expected: vec![h, a], got: vec![chunk.len()] });
                        }
                        q.extend(chunk.chunks(a).map(<[f64]>::to_vec));
                    }
                }
            }
        }
        for &i in &active {
            let action = match &mut pending[i] {
                Pending::Ensemble(buf) => temporal_ensemble(buf, envs[i].steps())?,
                Pending::Queue(q) => q.pop_front().expect("queue refilled above"),
            };
            envs[i].step(&action)?;
            trajs[i].actions.push(action);
            trajs[i].positions.push(envs[i].position());
        }
    }
    for (t, env) in trajs.iter_mut().zip(&envs) {
        t.success = env.success();
    }
    Ok(trajs)
}

fn check_task(ckpt: &Checkpoint, task: Task) -> Result<()> {
    let cfg = &ckpt.net.config;
    if cfg.action_dim != task.action_dim() || cfg.proprio_dim != task.proprio_dim() || cfg.goal_vocab < task.goal_vocab()
    {
        return Err(Error::Config(format!(
            "checkpoint (action_dim {}, proprio_dim {}, {} goals) does not fit {task}",
            cfg.action_dim, cfg.proprio_dim, cfg.goal_vocab
        )));
    }
    Ok(())
}

/// Single closed-loop episode from a checkpoint.
pub fn rollout(ckpt: &Checkpoint, task: Task, env_seed: u64, goal: usize, opts: &RolloutOptions) -> Result<Trajectory> {
    check_task(ckpt, task)?;
    let mut planner = CheckpointPlanner::new(ckpt, opts.ddim_steps, opts.sample_seed)?;
    let ensemble = opts.ensemble.then_some(opts.decay);
    Ok(run_episodes(&mut planner, task, &[(env_seed, goal)], ensemble)?.remove(0))
}

/// Success fraction with its binomial standard error.
pub fn success_rate(trajs: &[Trajectory]) -> (f64, f64) {
    if trajs.is_empty() {
        return (0.0, 0.0);
    }
    let n = trajs.len() as f64;
    let p = trajs.iter().filter(|t| t.success).count() as f64 / n;
    (p, (p * (1.0 - p) / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub left: f64,
    pub right: f64,
    pub successes: usize,
    /// No successful episode to classify; both fractions are then zero.
    pub empty: bool,
}

/// Side taken by a fork2d trajectory: the sign of its mean x inside the passage band.
pub fn passage_side(traj: &Trajectory) -> Option<f64> {
    let xs: Vec<f64> =
        traj.positions.iter().filter(|p| (PASSAGE_BAND.0..=PASSAGE_BAND.1).contains(&p[1])).map(|p| p[0]).collect();
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Left/right split of successful episodes, as fractions of all successes.
pub fn mode_coverage(trajs: &[Trajectory]) -> ModeCoverage {
    let wins: Vec<&Trajectory> = trajs.iter().filter(|t| t.success).collect();
    if wins.is_empty() {
        return ModeCoverage { left: 0.0, right: 0.0, successes: 0, empty: true };
    }
    let sides: Vec<f64> = wins.iter().filter_map(|t| passage_side(t)).collect();
    let n = wins.len() as f64;
    ModeCoverage {
        left: sides.iter().filter(|&&x| x < 0.0).count() as f64 / n,
        right: sides.iter().filter(|&&x| x > 0.0).count() as f64 / n,
        successes: wins.len(),
        empty: false,
    }
}

/// x-velocity of the action taken at the start state, which is the fork2d
/// decision point: the expert modes already point in opposite directions there.
pub fn decision_velocity(traj: &Trajectory) -> Option<f64> {
    traj.actions.first().map(|a| a[0])
}

/// Aggregate of many seeded rollouts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub task: Task,
    pub n_rollouts: usize,
    pub success: f64,
    pub stderr: f64,
    pub coverage: ModeCoverage,
    /// Mean over rollouts of `|decision_velocity|`.
    pub decision_speed: f64,
    pub options: RolloutOptions,
    pub env_seed: u64,
    pub wall_seconds: f64,
    pub trajectories: Vec<Trajectory>,
}

/// Rolls out environments `env_seed..env_seed + n`, cycling through goals.
pub fn evaluate(ckpt: &Checkpoint, task: Task, n_rollouts: usize, env_seed: u64, opts: &RolloutOptions) -> Result<Evaluation> {
    if n_rollouts == 0 {
        return Err(Error::invalid("n_rollouts must be positive"));
    }
    check_task(ckpt, task)?;
    let start = Instant::now();
    let mut planner = CheckpointPlanner::new(ckpt, opts.ddim_steps, opts.sample_seed)?;
    let starts: Vec<(u64, usize)> =
        (0..n_rollouts).map(|i| (env_seed.wrapping_add(i as u64), i % task.goal_vocab())).collect();
    let mut trajectories = Vec::with_capacity(n_rollouts);
    for group in starts.chunks(ROLLOUT_BATCH) {
        trajectories.extend(run_episodes(&mut planner, task, group, opts.ensemble.then_some(opts.decay))?);
    }
    let (success, stderr) = success_rate(&trajectories);
    let speeds: Vec<f64> = trajectories.iter().filter_map(decision_velocity).map(f64::abs).collect();
    Ok(Evaluation {
        task,
        n_rollouts,
        success,
        stderr,
        coverage: mode_coverage(&trajectories),
        decision_speed: speeds.iter().sum::<f64>() / speeds.len().max(1) as f64,
        options: opts.clone(),
        env_seed,
        wall_seconds: start.elapsed().as_secs_f64(),
        trajectories,
    })
}

/// Whether a loss at init is within three standard errors of 1, using
/// `Var(ε²) = 2` over `n` noise entries.
pub fn init_loss_ok(loss: f64, n: usize) -> bool {
    (loss - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Attention,
    Tokenizer,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One trained-and-evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub section: Section,
    pub label: String,
    pub variant: String,
    pub tokenizer: String,
    /// DDIM steps; zero for the regression baseline.
    pub steps: usize,
    pub n_rollouts: usize,
    pub success: f64,
    pub stderr: f64,
    pub mode_left: f64,
    pub mode_right: f64,
    pub decision_speed: f64,
    pub params: usize,
    pub init_loss: Option<f64>,
    pub init_loss_ok: Option<bool>,
    pub final_loss: Option<f64>,
    pub status: RowStatus,
    pub error: Option<String>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub label: String,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub rows: Vec<EvalRow>,
    pub curves: Vec<LossCurve>,
    pub ddim_steps: Vec<usize>,
    pub train_seed: u64,
    pub env_seed: u64,
    pub sample_seed: u64,
    pub wall_seconds: f64,
}

impl EvalReport {
    /// One JSON record per row.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).map_err(|e| Error::invalid(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Human-readable table grouped by section.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (section, title) in [
            (Section::Attention, "Conditioning block"),
            (Section::Tokenizer, "Tokenizer"),
            (Section::Baseline, "Baseline"),
        ] {
            let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.section == section).collect();
            if rows.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{title} ({})", self.task);
            let _ = writeln!(
                out,
                "  {:<22} {:>6} {:>9} {:>16} {:>11} {:>9} {:>10}",
                "model", "steps", "params", "success", "left/right", "|vx|", "final loss"
            );
            for r in rows {
                let success = match r.status {
                    RowStatus::Ok => format!("{:.0}% ± {:.0}%", 100.0 * r.success, 100.0 * r.stderr),
                    RowStatus::Failed => "failed".to_string(),
                };
                let steps = if r.steps == 0 { "-".to_string() } else { r.steps.to_string() };
                let loss = r.final_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
                let _ = writeln!(
                    out,
                    "  {:<22} {:>6} {:>9} {:>16} {:>5.2}/{:<5.2} {:>9.3} {:>10}",
                    r.label, steps, r.params, success, r.mode_left, r.mode_right, r.decision_speed, loss
                );
            }
            out.push('\n');
        }
        out
    }

    /// Loss curves as `label,iteration,loss,lr,wall_time` rows.
    pub fn write_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["label", "iteration", "loss", "lr", "wall_time"]).map_err(err)?;
        for c in &self.curves {
            for r in &c.log {
                w.write_record([
                    c.label.clone(),
                    r.iteration.to_string(),
                    r.loss.to_string(),
                    r.lr.to_string(),
                    r.wall_time.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `report.jsonl`, `table.txt` and `curves.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("report.jsonl", self.to_jsonl()?)?;
        put("table.txt", self.table())?;
        self.write_curves_csv(dir.join("curves.csv"))
    }
}

/// What `run_ablation` trains and evaluates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub ddim_steps: Vec<usize>,
    pub tokenizer_grid: bool,
    pub regression_baseline: bool,
    pub n_rollouts: usize,
    pub env_seed: u64,
    pub rollout: RolloutOptions,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            ddim_steps: vec![10, 100],
            tokenizer_grid: true,
            regression_baseline: true,
            n_rollouts: 50,
            env_seed: 1_000_000,
            rollout: RolloutOptions::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        self.train.validate()?;
        if self.variants.is_empty() || self.ddim_steps.is_empty() {
            return Err(Error::Config("suite needs at least one variant and one ddim step count".into()));
        }
        if let Some(s) = self.ddim_steps.iter().find(|&&s| s == 0 || s > self.policy.diffusion_steps) {
            return Err(Error::Config(format!("ddim step count {s} outside [1, {}]", self.policy.diffusion_steps)));
        }
        if self.n_rollouts == 0 {
            return Err(Error::Config("suite n_rollouts must be positive".into()));
        }
        Ok(())
    }
}

fn count_params(cfg: &PolicyConfig) -> Result<usize> {
    Ok(PolicyNet::<f32>::init(cfg.clone(), 0)?.param_count())
}

/// The tokenizer grid: residual CNN, then conv-stem tokenizers whose encoder
/// MLP is widened until the whole network matches the residual one's
/// parameter count, and until it reaches twice that count.
pub fn tokenizer_grid(base: &PolicyConfig) -> Result<Vec<(String, PolicyConfig)>> {
    let resnet = PolicyConfig { tokenizer: TokenizerKind::Resnet, ..base.clone() };
    let target = count_params(&resnet)?;
    let stem = |ratio: usize| PolicyConfig { tokenizer: TokenizerKind::ConvStem, encoder_mlp_ratio: ratio, ..base.clone() };
    let mut counts = Vec::new();
    for ratio in 1..=64 {
        let n = count_params(&stem(ratio))?;
        counts.push((ratio, n));
        if n >= 2 * target {
            break;
        }
    }
    let matched = counts.iter().min_by_key(|(_, n)| n.abs_diff(target)).expect("at least one ratio").0;
    let inflated = counts.last().expect("at least one ratio").0.max(matched + 1);
    Ok(vec![
        ("resnet".to_string(), resnet),
        ("conv_stem_matched".to_string(), stem(matched)),
        ("conv_stem_inflated".to_string(), stem(inflated)),
    ])
}

struct Trained {
    ckpt: Option<Checkpoint>,
    init_loss: Option<f64>,
    final_loss: Option<f64>,
    params: usize,
    error: Option<String>,
    seconds: f64,
}

fn train_one(
    label: &str,
    policy: &PolicyConfig,
    suite: &SuiteConfig,
    data: &Dataset,
    curves: &mut Vec<LossCurve>,
    progress: &mut impl FnMut(&str),
) -> Trained {
    progress(&format!("training {label}"));
    let start = Instant::now();
    let params = count_params(policy).unwrap_or(0);
    match train(policy, &suite.train, data, |_| {}) {
        Ok(out) => {
            curves.push(LossCurve { label: label.to_string(), log: out.log.clone() });
            Trained {
                final_loss: out.log.last().map(|r| r.loss),
                init_loss: Some(out.init_loss),
                ckpt: Some(out.checkpoint),
                params,
                error: None,
                seconds: start.elapsed().as_secs_f64(),
            }
        }
        Err(e) => Trained {
            ckpt: None,
            init_loss: None,
            final_loss: None,
            params,
            error: Some(e.to_string()),
            seconds: start.elapsed().as_secs_f64(),
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_row(
    section: Section,
    label: &str,
    policy: &PolicyConfig,
    trained: &Trained,
    steps: usize,
    suite: &SuiteConfig,
    task: Task,
    progress: &mut impl FnMut(&str),
) -> EvalRow {
    let mut row = EvalRow {
        section,
        label: label.to_string(),
        variant: policy.variant.to_string(),
        tokenizer: policy.tokenizer.as_str().to_string(),
        steps,
        n_rollouts: suite.n_rollouts,
        success: 0.0,
        stderr: 0.0,
        mode_left: 0.0,
        mode_right: 0.0,
        decision_speed: 0.0,
        params: trained.params,
        init_loss: trained.init_loss,
        init_loss_ok: None,
        final_loss: trained.final_loss,
        status: RowStatus::Failed,
        error: trained.error.clone(),
        train_seconds: trained.seconds,
        eval_seconds: 0.0,
    };
    if policy.head == HeadKind::Diffusion && policy.variant == Variant::AdalnZero {
        let n = suite.train.batch_size * policy.horizon * policy.action_dim;
        row.init_loss_ok = trained.init_loss.map(|l| init_loss_ok(l, n));
    }
    let Some(ckpt) = &trained.ckpt else {
        return row;
    };
    progress(&format!("evaluating {label} at {steps} steps"));
    let opts = RolloutOptions { ddim_steps: steps.max(1), ..suite.rollout.clone() };
    match evaluate(ckpt, task, suite.n_rollouts, suite.env_seed, &opts) {
        Ok(ev) => {
            row.success = ev.success;
            row.stderr = ev.stderr;
            row.mode_left = ev.coverage.left;
            row.mode_right = ev.coverage.right;
            row.decision_speed = ev.decision_speed;
            row.eval_seconds = ev.wall_seconds;
            row.status = RowStatus::Ok;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Trains every configuration in the suite on `data` with the same budget and
/// seed, then evaluates each in closed loop. A run that fails or diverges is
/// recorded as a failed row.
pub fn run_ablation(suite: &SuiteConfig, data: &Dataset, mut progress: impl FnMut(&str)) -> Result<EvalReport> {
    suite.validate()?;
    let start = Instant::now();
    let task = data.task();
    let base = config_for_dataset(&PolicyConfig { head: HeadKind::Diffusion, ..suite.policy.clone() }, data);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut reference: Option<(PolicyConfig, Trained)> = None;
    for &variant in &suite.variants {
        let policy = PolicyConfig { variant, ..base.clone() };
        let trained = train_one(variant.as_str(), &policy, suite, data, &mut curves, &mut progress);
        for &steps in &suite.ddim_steps {
            rows.push(eval_row(Section::Attention, variant.as_str(), &policy, &trained, steps, suite, task, &mut progress));
        }
        if policy.tokenizer == TokenizerKind::Resnet && variant == Variant::AdalnZero {
            reference = Some((policy, trained));
        }
    }
    let steps = suite.ddim_steps[0];
    if suite.tokenizer_grid {
        let base = PolicyConfig { variant: Variant::AdalnZero, ..base.clone() };
        for (label, policy) in tokenizer_grid(&base)? {
            let row = match &reference {
                Some((p, t)) if *p == policy => eval_row(Section::Tokenizer, &label, &policy, t, steps, suite, task, &mut progress),
                _ => {
                    let trained = train_one(&label, &policy, suite, data, &mut curves, &mut progress);
                    eval_row(Section::Tokenizer, &label, &policy, &trained, steps, suite, task, &mut progress)
                }
            };
            rows.push(row);
        }
    }
    if suite.regression_baseline {
        let policy = PolicyConfig { head: HeadKind::Regression, ..base.clone() };
        let trained = train_one("regression", &policy, suite, data, &mut curves, &mut progress);
        rows.push(eval_row(Section::Baseline, "regression", &policy, &trained, 0, suite, task, &mut progress));
    }
    Ok(EvalReport {
        task,
        rows,
        curves,
        ddim_steps: suite.ddim_steps.clone(),
        train_seed: suite.train.seed,
        env_seed: suite.env_seed,
        sample_seed: suite.rollout.sample_seed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::generate_dataset;
    use crate::training::{identity_stats, tiny_config};

    fn buffer_with(decay: f64, chunks: &[(usize, Vec<f64>)]) -> EnsembleBuffer {
        let mut b = EnsembleBuffer::new(decay, 3, 2).unwrap();
        for (t, c) in chunks {
            b.push(*t, c.clone()).unwrap();
        }
        b
    }

    #[test]
    fn single_chunk_passes_through() {
        let b = buffer_with(0.1, &[(4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
        assert_eq!(temporal_ensemble(&b, 4).unwrap(), vec![1.0, 2.0]);
        assert_eq!(temporal_ensemble(&b, 6).unwrap(), vec![5.0, 6.0]);
        assert!(temporal_ensemble(&b, 7).is_err());
        assert!(temporal_ensemble(&b, 3).is_err());
    }

    #[test]
    fn identical_predictions_are_a_fixed_point() {
        let c = vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7];
        let b = buffer_with(0.9, &[(0, c.clone()), (1, c.clone()), (2, c)]);
        let got = temporal_ensemble(&b, 2).unwrap();
        assert!((got[0] - 0.3).abs() < 1e-15 && (got[1] + 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_predictions_at_ln2_weight_two_to_one() {
        let p1 = vec![9.0, 9.0, 1.0, -1.0, 9.0, 9.0];
        let p0 = vec![4.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        let b = buffer_with(std::f64::consts::LN_2, &[(0, p1), (1, p0)]);
        let got = temporal_ensemble(&b, 1).unwrap();
        let want = [(2.0 * 4.0 + 1.0) / 3.0, (2.0 * 2.0 - 1.0) / 3.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn weights_are_normalised_and_decrease_with_age() {
        let c = vec![0.0; 6];
        let b = buffer_with(0.1, &[(0, c.clone()), (1, c.clone()), (2, c)]);
        let w = b.weights(2);
        assert_eq!(w.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert!((w.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0].1 > p[1].1));
    }

    #[test]
    fn stale_chunks_are_dropped() {
        let c = vec![0.0; 6];
        let b = buffer_with(0.1, &[(0, c.clone()), (1, c.clone()), (5, c)]);
        assert_eq!(b.len(), 1);
        let mut b = EnsembleBuffer::new(0.1, 3, 2).unwrap();
        b.push(3, vec![0.0; 6]).unwrap();
        assert!(b.push(2, vec![0.0; 6]).is_err());
        assert!(b.push(4, vec![0.0; 5]).is_err());
        assert!(EnsembleBuffer::new(-1.0, 3, 2).is_err());
    }

    struct Constant {
        action: Vec<f64>,
        horizon: usize,
        calls: usize,
    }

    impl Planner for Constant {
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn action_dim(&self) -> usize {
            self.action.len()
        }
        fn plan(&mut self, requests: &[PlanRequest]) -> Result<Vec<Vec<f64>>> {
            self.calls += requests.len();
            Ok(requests.iter().map(|_| self.action.repeat(self.horizon)).collect())
        }
    }

    #[test]
    fn ensembling_constant_chunks_changes_nothing() {
        let starts = [(3, 0), (4, 0), (5, 0)];
        let mut on = Constant { action: vec![0.2, 0.9], horizon: 4, calls: 0 };
        let mut off = Constant { action: vec![0.2, 0.9], horizon: 4, calls: 0 };
        let a = run_episodes(&mut on, Task::Fork2d, &starts, Some(0.1)).unwrap();
        let b = run_episodes(&mut off, Task::Fork2d, &starts, None).unwrap();
        assert_eq!(a, b);
        assert!(on.calls > off.calls);
        assert!(a.iter().all(|t| t.positions.len() == t.actions.len() + 1));
    }

    #[test]
    fn planner_dimension_must_match_task() {
        let mut p = Constant { action: vec![0.0; 3], horizon: 2, calls: 0 };
        assert!(matches!(run_episodes(&mut p, Task::Fork2d, &[(0, 0)], None), Err(Error::Config(_))));
    }

    fn untrained(task: Task) -> Checkpoint {
        let cfg = PolicyConfig {
            action_dim: task.action_dim(),
            proprio_dim: task.proprio_dim(),
            goal_vocab: task.goal_vocab(),
            image_size: 32,
            ..tiny_config(Variant::AdalnZero)
        };
        let stats = identity_stats(&cfg);
        Checkpoint { net: PolicyNet::init(cfg, 0).unwrap(), stats, meta: serde_json::Value::Null }
    }

    #[test]
    fn untrained_rollout_is_deterministic_and_fails() {
        let ckpt = untrained(Task::Fork2d);
        let opts = RolloutOptions { ddim_steps: 5, ..RolloutOptions::default() };
        let a = rollout(&ckpt, Task::Fork2d, 7, 0, &opts).unwrap();
        let b = rollout(&ckpt, Task::Fork2d, 7, 0, &opts).unwrap();
        assert_eq!(a, b);
        assert!(!a.success);
        assert!(a.actions.iter().flatten().all(|v| v.is_finite()));
        let c = rollout(&ckpt, Task::Fork2d, 7, 0, &RolloutOptions { sample_seed: 1, ..opts }).unwrap();
        assert_ne!(a.actions, c.actions);
    }

    #[test]
    fn batched_rollouts_match_single_ones() {
        let ckpt = untrained(Task::PickplaceLang);
        let opts = RolloutOptions { ddim_steps: 3, ensemble: false, ..RolloutOptions::default() };
        let ev = evaluate(&ckpt, Task::PickplaceLang, 3, 20, &opts).unwrap();
        for (i, t) in ev.trajectories.iter().enumerate() {
            assert_eq!(*t, rollout(&ckpt, Task::PickplaceLang, 20 + i as u64, i, &opts).unwrap());
        }
        assert!(evaluate(&ckpt, Task::PickplaceLang, 0, 20, &opts).is_err());
        assert!(matches!(rollout(&ckpt, Task::Fork2d, 0, 0, &opts), Err(Error::Config(_))));
    }

    fn line(success: bool, xs: &[f64]) -> Trajectory {
        Trajectory {
            env_seed: 0,
            goal: 0,
            positions: xs.iter().enumerate().map(|(i, &x)| [x, 0.1 * i as f64]).collect(),
            actions: xs.iter().map(|&x| vec![x, 1.0]).collect(),
            success,
        }
    }

    #[test]
    fn coverage_counts_sides_of_successes() {
        let left = line(true, &[0.0, -0.1, -0.2, -0.3, -0.4, -0.4, -0.3, -0.1]);
        let right = line(true, &[0.0, 0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.1]);
        let miss = line(false, &[0.0, 0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.1]);
        let c = mode_coverage(&[left.clone(), left.clone()]);
        assert_eq!((c.left, c.right, c.empty), (1.0, 0.0, false));
        let c = mode_coverage(&[left, right.clone(), right, miss.clone()]);
        assert!((c.left - 1.0 / 3.0).abs() < 1e-12 && (c.right - 2.0 / 3.0).abs() < 1e-12);
        let c = mode_coverage(&[miss]);
        assert_eq!((c.left, c.right, c.empty), (0.0, 0.0, true));
    }

    #[test]
    fn expert_dataset_covers_both_modes() {
        let data = generate_dataset(Task::Fork2d, 40, 3).unwrap();
        let trajs: Vec<Trajectory> = data.episodes.iter().map(|e| Trajectory::from_episode(e, 2)).collect();
        let c = mode_coverage(&trajs);
        assert_eq!(c.successes, 40);
        assert!((0.4..=0.6).contains(&c.left) && (0.4..=0.6).contains(&c.right), "{c:?}");
        let speeds: Vec<f64> = trajs.iter().map(|t| decision_velocity(t).unwrap().abs()).collect();
        assert!(speeds.iter().all(|&v| v > 0.5), "{speeds:?}");
    }

    #[test]
    fn binomial_standard_error() {
        let t = |s| line(s, &[0.0]);
        let (p, se) = success_rate(&[t(true), t(false), t(true), t(true)]);
        assert_eq!(p, 0.75);
        assert!((se - (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(success_rate(&[]), (0.0, 0.0));
    }

    #[test]
    fn init_loss_check_uses_noise_variance() {
        assert!(init_loss_ok(1.01, 1024));
        assert!(!init_loss_ok(1.2, 1024));
    }

    #[test]
    fn tokenizer_grid_brackets_the_resnet_size() {
        let grid = tokenizer_grid(&PolicyConfig::default()).unwrap();
        let counts: Vec<usize> = grid.iter().map(|(_, c)| count_params(c).unwrap()).collect();
        assert_eq!(grid.len(), 3);
        let rel = counts[1].abs_diff(counts[0]) as f64 / counts[0] as f64;
        assert!(rel < 0.1, "matched conv stem off by {rel}: {counts:?}");
        assert!(counts[2] as f64 >= 1.5 * counts[0] as f64, "{counts:?}");
    }

    #[test]
    fn ablation_reports_every_row_even_when_training_fails() {
        let data = generate_dataset(Task::Fork2d, 2, 0).unwrap();
        let policy = PolicyConfig { width: 8, heads: 2, cnn_channels: 4, goal_embed: 4, horizon: 4, diffusion_steps: 20, ..PolicyConfig::default() };
        let suite = SuiteConfig {
            policy,
            train: TrainConfig { iterations: 2, batch_size: 2, log_every: 1, warmup: 1, ..TrainConfig::default() },
            n_rollouts: 2,
            ddim_steps: vec![2, 20],
            rollout: RolloutOptions { ensemble: false, ..RolloutOptions::default() },
            ..SuiteConfig::default()
        };
        let report = run_ablation(&suite, &data, |_| {}).unwrap();
        let attention = report.rows.iter().filter(|r| r.section == Section::Attention).count();
        assert_eq!(attention, 8);
        assert_eq!(report.rows.iter().filter(|r| r.section == Section::Tokenizer).count(), 3);
        assert_eq!(report.rows.len(), 12);
        assert!(report.rows.iter().all(|r| r.status == RowStatus::Ok), "{}", report.table());
        assert!(report.rows[0].init_loss_ok.is_some());
        assert_eq!(report.to_jsonl().unwrap().lines().count(), 12);
        assert!(report.table().contains("conv_stem_matched"));

        let broken = SuiteConfig { train: TrainConfig { lr: 1e30, ..suite.train.clone() }, tokenizer_grid: false, ..suite };
        let report = run_ablation(&broken, &data, |_| {}).unwrap();
        assert_eq!(report.rows.len(), 9);
        assert!(report.rows.iter().any(|r| r.status == RowStatus::Failed));
        assert!(report.table().contains("failed"));
    }
}
