//! Command-line front end: run configuration, subcommands and exit codes.
//!
//! Configuration files are TOML written with flat dotted keys
//! (`model.width = 64`). Values resolve as defaults, then the file, then
//! `--set key=value` and the dedicated flags. Unknown keys are errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::envs::dataset::DATASET_MAGIC;
use crate::envs::{generate_dataset, Dataset, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_ablation, EvalRow, RolloutOptions, SuiteConfig, DEFAULT_ENSEMBLE_DECAY};
use crate::nn::Variant;
use crate::policy::{Checkpoint, PolicyConfig, PolicyNet, CHECKPOINT_MAGIC};
use crate::schedule::{NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::training::{config_for_dataset, grad_check, perturb, synthetic_batch, tiny_config, train, TrainConfig};

/// Relative output paths are resolved against this directory when it is set.
pub const OUTPUT_ROOT_VAR: &str = "DITBLOCK_OUTPUT_ROOT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// DDIM steps used at test time.
    pub ddim_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub task: Task,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_rollouts: usize,
    pub env_seed: u64,
    pub sample_seed: u64,
    pub ensemble: bool,
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<Variant>,
    pub ddim_steps: Vec<usize>,
    pub tokenizer_grid: bool,
    pub regression_baseline: bool,
}

/// Every setting a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: PolicyConfig,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub env: EnvSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: PolicyConfig::default(),
            schedule: ScheduleSection { ddim_steps: 10 },
            train: TrainConfig::default(),
            env: EnvSection { task: Task::Fork2d, episodes: 100, seed: 0 },
            eval: EvalSection {
                n_rollouts: 50,
                env_seed: 1_000_000,
                sample_seed: 0,
                ensemble: true,
                decay: DEFAULT_ENSEMBLE_DECAY,
            },
            ablate: AblateSection {
                variants: Variant::ALL.to_vec(),
                ddim_steps: vec![10, 100],
                tokenizer_grid: true,
                regression_baseline: true,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let k = self.model.diffusion_steps;
        for s in std::iter::once(&self.schedule.ddim_steps).chain(&self.ablate.ddim_steps) {
            if *s == 0 || *s > k {
                return Err(Error::Config(format!("ddim steps {s} outside [1, {k}]")));
            }
        }
        if self.env.episodes == 0 {
            return Err(Error::Config("env.episodes must be positive".into()));
        }
        if self.eval.n_rollouts == 0 {
            return Err(Error::Config("eval.n_rollouts must be positive".into()));
        }
        if !(self.eval.decay >= 0.0 && self.eval.decay.is_finite()) {
            return Err(Error::Config(format!("eval.decay must be non-negative, got {}", self.eval.decay)));
        }
        if self.ablate.variants.is_empty() || self.ablate.ddim_steps.is_empty() {
            return Err(Error::Config("ablate.variants and ablate.ddim_steps must be non-empty".into()));
        }
        Ok(())
    }

    pub fn rollout_options(&self) -> RolloutOptions {
        RolloutOptions {
            ddim_steps: self.schedule.ddim_steps,
            ensemble: self.eval.ensemble,
            decay: self.eval.decay,
            sample_seed: self.eval.sample_seed,
        }
    }

    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            policy: self.model.clone(),
            train: self.train.clone(),
            variants: self.ablate.variants.clone(),
            ddim_steps: self.ablate.ddim_steps.clone(),
            tokenizer_grid: self.ablate.tokenizer_grid,
            regression_baseline: self.ablate.regression_baseline,
            n_rollouts: self.eval.n_rollouts,
            env_seed: self.eval.env_seed,
            rollout: self.rollout_options(),
        }
    }

    /// The configuration as flat `section.key = value` lines.
    pub fn to_flat_toml(&self) -> Result<String> {
        let table = to_table(self)?;
        let mut out = String::new();
        for (section, body) in &table {
            let toml::Value::Table(body) = body else { continue };
            for (key, value) in body {
                let _ = writeln!(out, "{section}.{key} = {value}");
            }
        }
        Ok(out)
    }
}

fn to_table<S: Serialize>(v: &S) -> Result<toml::Table> {
    toml::Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<toml::Table> {
    let (key, value) =
        s.split_once('=').ok_or_else(|| Error::invalid(format!("override '{s}' is not of the form key=value")))?;
    let (key, value) = (key.trim(), value.trim());
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::invalid(format!("override '{s}' has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut table = toml::Table::new();
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cursor = &mut table;
    for p in parts {
        cursor = match cursor.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => unreachable!("fresh entry is a table"),
        };
    }
    cursor.insert(last.to_string(), value);
    Ok(table)
}

/// Applies the file and overrides on top of `base` and validates the result.
pub fn resolve_config(base: &RunConfig, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = to_table(base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        merge(&mut table, parsed);
    }
    for o in overrides {
        merge(&mut table, parse_override(o)?);
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Joins relative output paths onto the output root, when one is configured.
pub fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".run.toml");
    out.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &RunConfig, path: &Path) -> Result<()> {
    write_text(path, &cfg.to_flat_toml()?)
}

fn run_config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

#[derive(Parser, Debug)]
#[command(name = "ditblock", version, about = "Diffusion transformer policies on synthetic imitation tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML file with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.width=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate an expert demonstration dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// fork2d or pickplace_lang [config: env.task]
        #[arg(long)]
        env: Option<Task>,
        /// Number of episodes [config: env.episodes]
        #[arg(long)]
        n: Option<usize>,
        /// First env seed; episode i uses seed + i [config: env.seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file; relative paths resolve against the output root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file; the log and resolved config are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// adaln_zero, adaln, cross_attn or in_context [config: model.variant]
        #[arg(long)]
        variant: Option<Variant>,
        /// [config: train.iterations]
        #[arg(long)]
        iterations: Option<usize>,
        /// [config: train.seed]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop rollouts of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the task the checkpoint was trained on.
        #[arg(long)]
        env: Option<Task>,
        /// [config: eval.n_rollouts]
        #[arg(long)]
        n_rollouts: Option<usize>,
        /// [config: schedule.ddim_steps]
        #[arg(long)]
        ddim_steps: Option<usize>,
        /// DDIM sampling seed [config: eval.sample_seed]
        #[arg(long)]
        seed: Option<u64>,
        /// Execute each chunk open-loop instead of ensembling per step.
        #[arg(long)]
        no_ensemble: bool,
        /// Write the full evaluation as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the conditioning and tokenizer grids.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory for the report, table and loss curves.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on the tiny network.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Check one variant; all four by default.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parameters sampled per variant.
        #[arg(long, default_value_t = 200)]
        n_params: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the header of a dataset, checkpoint, report or config file.
    Inspect { path: PathBuf },
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={}", v.to_string()))
}

fn with_flags(cfg: &ConfigArgs, flags: impl IntoIterator<Item = Option<String>>) -> Vec<String> {
    cfg.overrides.iter().cloned().chain(flags.into_iter().flatten()).collect()
}

/// Maps an error to its exit code: bad input is 2, everything else 1.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Config(_) | Error::Format { .. } => EXIT_INVALID,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_INVALID,
        Error::Io { .. } | Error::Diverged { .. } => EXIT_FAILURE,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData { cfg, env, n, seed, out } => {
            let overrides = with_flags(&cfg, [flag("env.task", &env), flag("env.episodes", &n), flag("env.seed", &seed)]);
            let rc = resolve_config(&RunConfig::default(), cfg.config.as_deref(), &overrides)?;
            let out = output_path(&out);
            let data = generate_dataset(rc.env.task, rc.env.episodes, rc.env.seed)?;
            ensure_parent(&out)?;
            data.write(&out)?;
            write_resolved(&rc, &sidecar(&out))?;
            println!("wrote {} {} episodes ({} steps) to {}", data.episodes.len(), rc.env.task, data.steps(), out.display());
            Ok(EXIT_OK)
        }
        Command::Train { cfg, data, out, variant, iterations, seed } => {
            let overrides = with_flags(
                &cfg,
                [flag("model.variant", &variant), flag("train.iterations", &iterations), flag("train.seed", &seed)],
            );
            let rc = resolve_config(&RunConfig::default(), cfg.config.as_deref(), &overrides)?;
            let dataset = Dataset::read(&data)?;
            let policy = config_for_dataset(&rc.model, &dataset);
            let out = output_path(&out);
            ensure_parent(&out)?;
            let mut log = String::new();
            let outcome = train(&policy, &rc.train, &dataset, |r| {
                eprintln!("iter {:>7}  loss {:.5}  lr {:.3e}  {:.1}s", r.iteration, r.loss, r.lr, r.wall_time);
                log.push_str(&serde_json::to_string(r).unwrap_or_default());
                log.push('\n');
            })?;
            let mut ckpt = outcome.checkpoint;
            if let serde_json::Value::Object(m) = &mut ckpt.meta {
                m.insert("run_config".into(), run_config_json(&rc));
                m.insert("init_loss".into(), outcome.init_loss.into());
            }
            ckpt.write(&out)?;
            let mut log_path = out.clone().into_os_string();
            log_path.push(".log.jsonl");
            write_text(Path::new(&log_path), &log)?;
            write_resolved(&rc, &sidecar(&out))?;
            println!(
                "trained {} ({} params), init loss {:.4}, final loss {:.4}; checkpoint {}",
                policy.variant,
                ckpt.net.param_count(),
                outcome.init_loss,
                outcome.log.last().map_or(f64::NAN, |r| r.loss),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval { cfg, checkpoint, env, n_rollouts, ddim_steps, seed, no_ensemble, out } => {
            let mut overrides = with_flags(
                &cfg,
                [flag("eval.n_rollouts", &n_rollouts), flag("schedule.ddim_steps", &ddim_steps), flag("eval.sample_seed", &seed)],
            );
            if no_ensemble {
                overrides.push("eval.ensemble=false".into());
            }
            let ckpt = Checkpoint::read(&checkpoint)?;
            // DDIM bounds depend on the checkpoint's schedule length, not the default model.
            let base = RunConfig { model: ckpt.net.config.clone(), ..RunConfig::default() };
            let rc = resolve_config(&base, cfg.config.as_deref(), &overrides)?;
            let trained_on = ckpt.meta.get("task").and_then(|t| serde_json::from_value::<Task>(t.clone()).ok());
            let task = env.or(trained_on).unwrap_or(rc.env.task);
            let ev = evaluate(&ckpt, task, rc.eval.n_rollouts, rc.eval.env_seed, &rc.rollout_options())?;
            println!(
                "{task}: success {:.1}% ± {:.1}% over {} rollouts (ddim {}, ensemble {}), modes left {:.2} right {:.2}, |decision vx| {:.3}, {:.1}s",
                100.0 * ev.success,
                100.0 * ev.stderr,
                ev.n_rollouts,
                rc.schedule.ddim_steps,
                rc.eval.ensemble,
                ev.coverage.left,
                ev.coverage.right,
                ev.decision_speed,
                ev.wall_seconds
            );
            if let Some(out) = out {
                let out = output_path(&out);
                let body = serde_json::json!({ "evaluation": ev, "run_config": run_config_json(&rc) });
                write_text(&out, &serde_json::to_string_pretty(&body).map_err(|e| Error::invalid(e.to_string()))?)?;
                write_resolved(&rc, &sidecar(&out))?;
            }
            Ok(EXIT_OK)
        }
        Command::Ablate { cfg, data, out } => {
            let rc = resolve_config(&RunConfig::default(), cfg.config.as_deref(), &cfg.overrides)?;
            let dataset = Dataset::read(&data)?;
            let out = output_path(&out);
            let report = run_ablation(&rc.suite(), &dataset, |msg| eprintln!("{msg}"))?;
            report.write(&out)?;
            write_resolved(&rc, &out.join("run.toml"))?;
            print!("{}", report.table());
            println!("report written to {}", out.display());
            Ok(EXIT_OK)
        }
        Command::Gradcheck { cfg, variant, seed, n_params, h, tolerance } => {
            let base = RunConfig { model: tiny_config(Variant::AdalnZero), ..RunConfig::default() };
            let rc = resolve_config(&base, cfg.config.as_deref(), &cfg.overrides)?;
            let variants = variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
            let mut worst: f64 = 0.0;
            for (i, v) in variants.into_iter().enumerate() {
                let model = PolicyConfig { variant: v, ..rc.model.clone() };
                let mut net = PolicyNet::<f64>::init(model.clone(), seed)?;
                perturb(&mut net.params, 0.05, seed.wrapping_add(1));
                let batch = synthetic_batch(&model, 2, seed.wrapping_add(2 + i as u64));
                let sched = NoiseSchedule::cosine(model.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
                let report = grad_check(&net, &batch, &sched, n_params, h, seed.wrapping_add(3), None)?;
                println!("{v:<11} max relative error {:.3e} over {n_params} parameters", report.max_rel_error);
                worst = worst.max(report.max_rel_error);
            }
            let pass = worst < tolerance;
            println!("gradcheck {}: worst {worst:.3e}, tolerance {tolerance:.1e}", if pass { "passed" } else { "FAILED" });
            Ok(if pass { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Inspect { path } => {
            print!("{}", inspect(&path)?);
            Ok(EXIT_OK)
        }
    }
}

fn json<S: Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

/// Human-readable summary of a dataset, checkpoint, report or config file.
pub fn inspect(path: &Path) -> Result<String> {
    let mut magic = [0u8; 8];
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let got = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if got == 8 && &magic == DATASET_MAGIC {
        let data = Dataset::read(path)?;
        let _ = writeln!(out, "dataset {}\n{}", path.display(), json(&data.header));
        for (i, ep) in data.episodes.iter().enumerate() {
            let mode = ep.mode.map_or("-".to_string(), |m| format!("{m:?}").to_lowercase());
            let _ = writeln!(out, "  episode {i:>4}: goal {} mode {mode:<5} steps {:>3} success {}", ep.goal, ep.len, ep.success);
        }
        return Ok(out);
    }
    if got == 8 && &magic == CHECKPOINT_MAGIC {
        let ckpt = Checkpoint::read(path)?;
        let _ = writeln!(out, "checkpoint {} ({} parameters)", path.display(), ckpt.net.param_count());
        let _ = writeln!(out, "config {}", json(&ckpt.net.config));
        let _ = writeln!(out, "stats {}", json(&ckpt.stats));
        let _ = writeln!(out, "meta {}", json(&ckpt.meta));
        return Ok(out);
    }
    let text = std::fs::read_to_string(path).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "not a dataset, checkpoint, report or config file".into(),
    })?;
    let rows: std::result::Result<Vec<EvalRow>, _> =
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect();
    match rows {
        Ok(rows) if !rows.is_empty() => {
            let _ = writeln!(out, "report {} ({} rows)", path.display(), rows.len());
            for r in rows {
                let _ = writeln!(
                    out,
                    "  {:<20} steps {:>3}  success {:.2} ± {:.2}  n {}  {:?}",
                    r.label, r.steps, r.success, r.stderr, r.n_rollouts, r.status
                );
            }
            Ok(out)
        }
        _ => {
            if serde_json::from_str::<serde_json::Value>(&text).is_ok() {
                let _ = writeln!(out, "json {}\n{}", path.display(), text.trim_end());
                return Ok(out);
            }
            let table: toml::Table = toml::from_str(&text)
                .map_err(|_| Error::Format { path: path.to_path_buf(), msg: "unrecognised file contents".into() })?;
            let _ = writeln!(out, "config {}\n{}", path.display(), table);
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_and_overrides_layer_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "model.width = 32\nmodel.heads = 2\ntrain.lr = 1e-3\nenv.task = \"pickplace_lang\"\n").unwrap();
        let rc = resolve_config(&RunConfig::default(), Some(&path), &["train.lr=5e-4".into(), "model.variant=adaln".into()])
            .unwrap();
        assert_eq!(rc.model.width, 32);
        assert_eq!(rc.train.lr, 5e-4);
        assert_eq!(rc.model.variant, Variant::Adaln);
        assert_eq!(rc.env.task, Task::PickplaceLang);
        assert_eq!(rc.train.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["model.widht=3", "nosuch.key=1", "train=3"] {
            let err = resolve_config(&RunConfig::default(), None, &[bad.into()]).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_INVALID, "{bad}: {err}");
        }
        assert!(parse_override("model.width").is_err());
        assert!(parse_override(".x=1").is_err());
    }

    #[test]
    fn resolved_config_round_trips_through_flat_form() {
        let rc = resolve_config(&RunConfig::default(), None, &["ablate.ddim_steps=[10, 50]".into()]).unwrap();
        let flat = rc.to_flat_toml().unwrap();
        assert!(flat.lines().all(|l| l.split('=').next().unwrap().contains('.')), "{flat}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.toml");
        std::fs::write(&path, &flat).unwrap();
        assert_eq!(resolve_config(&RunConfig::default(), Some(&path), &[]).unwrap(), rc);
    }

    #[test]
    fn invalid_values_fail_validation() {
        for bad in ["eval.n_rollouts=0", "schedule.ddim_steps=500", "train.lr=-1", "model.heads=3", "env.task=\"maze\""] {
            let err = resolve_config(&RunConfig::default(), None, &[bad.into()]).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_INVALID, "{bad}");
        }
    }

    #[test]
    fn sidecar_sits_next_to_the_output() {
        assert_eq!(sidecar(Path::new("runs/a.ckpt")), PathBuf::from("runs/a.ckpt.run.toml"));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["ditblock", "frobnicate"]), EXIT_INVALID);
        assert_eq!(main_with_args(["ditblock", "train", "--data", "x"]), EXIT_INVALID);
    }
}
