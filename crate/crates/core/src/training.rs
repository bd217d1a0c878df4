//! Behaviour-cloning training: chunk batching, the ε-MSE objective, AdamW with
//! warmup and cosine decay, and a finite-difference gradient check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore};
use crate::policy::{Checkpoint, HeadKind, ObsBatch, PolicyConfig, PolicyNet};
use crate::schedule::NoiseSchedule;
use crate::tensor::{cst, Scalar, Tensor};

/// Stream offset so batch sampling never shares a stream with parameter init.
const BATCH_STREAM: u64 = 0x5eed_ba7c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Iterations between log records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 20_000,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 1e-4,
            warmup: 500,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("train.iterations, train.batch_size and train.log_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("train.weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Linear warmup to `base`, then cosine decay to `0.1·base` at `total`.
pub fn learning_rate(iteration: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if iteration < warmup {
        return base * (iteration + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((iteration - warmup) as f64 / span).min(1.0);
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One training batch. Actions are normalised chunks (`B·H × A`), zero-padded
/// past the episode end with `mask` marking real rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: ObsBatch,
    pub actions: Vec<f32>,
    pub mask: Vec<f32>,
    pub ks: Vec<usize>,
    pub noise: Vec<f32>,
}

impl Batch {
    pub fn batch(&self) -> usize {
        self.ks.len()
    }
}

/// Every `(episode, step)` start position of a dataset.
#[derive(Clone, Debug)]
pub struct ChunkSampler {
    starts: Vec<(usize, usize)>,
}

impl ChunkSampler {
    pub fn new(data: &Dataset) -> Result<Self> {
        let starts: Vec<_> = data.episodes.iter().enumerate().flat_map(|(e, ep)| (0..ep.len).map(move |t| (e, t))).collect();
        if starts.is_empty() {
            return Err(Error::invalid("dataset has no steps"));
        }
        Ok(ChunkSampler { starts })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Uniform chunk starts, uniform steps `k ∈ [0, K)` and standard normal noise.
    pub fn sample(&self, data: &Dataset, horizon: usize, steps: usize, batch: usize, rng: &mut ChaCha8Rng) -> Batch {
        let h = &data.header;
        let (a_dim, p_dim, px) = (h.action_dim, h.proprio_dim, h.image_size * h.image_size * 3);
        let mut images = vec![Vec::with_capacity(batch * px); h.cameras];
        let mut proprio = Vec::with_capacity(batch * p_dim);
        let mut goals = Vec::with_capacity(batch);
        let mut actions = vec![0.0f32; batch * horizon * a_dim];
        let mut mask = vec![0.0f32; batch * horizon];
        let mut ks = Vec::with_capacity(batch);
        for b in 0..batch {
            let (e, t) = self.starts[rng.gen_range(0..self.starts.len())];
            let ep = &data.episodes[e];
            for (dst, src) in images.iter_mut().zip(&ep.images) {
                dst.extend_from_slice(&src[t * px..(t + 1) * px]);
            }
            proprio.extend_from_slice(&ep.proprio[t * p_dim..(t + 1) * p_dim]);
            goals.push(ep.goal);
            let valid = horizon.min(ep.len - t);
            let chunk = data.stats().normalize_actions(&ep.actions[t * a_dim..(t + valid) * a_dim]);
            actions[b * horizon * a_dim..][..valid * a_dim].copy_from_slice(&chunk);
            mask[b * horizon..][..valid].fill(1.0);
            ks.push(rng.gen_range(0..steps));
        }
        let noise = (0..batch * horizon * a_dim).map(|_| StandardNormal.sample(rng)).collect();
        let proprio = data.stats().normalize_proprio(&proprio);
        Batch { obs: ObsBatch { images, proprio, goals }, actions, mask, ks, noise }
    }
}

/// Loss value with per-parameter gradients aligned to the network's store.
pub struct LossGrad<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
}

/// Builds the objective for `net` on `batch` and optionally differentiates it.
///
/// Diffusion heads regress the injected noise from `x_k = √ᾱ_k·a + √(1−ᾱ_k)·ε`;
/// regression heads regress the action chunk directly. Padded rows carry no
/// weight. `token_mask` hides encoder tokens from every attention and pooling.
pub fn batch_loss<T: Scalar>(
    net: &PolicyNet<T>,
    batch: &Batch,
    sched: &NoiseSchedule,
    dropout: Option<&mut ChaCha8Rng>,
    token_mask: Option<&[bool]>,
    with_grads: bool,
) -> Result<LossGrad<T>> {
    let cfg = &net.config;
    let (b, h, a) = (batch.batch(), cfg.horizon, cfg.action_dim);
    if batch.actions.len() != b * h * a || batch.mask.len() != b * h {
        return Err(Error::ShapeMismatch { expected: vec![b, h, a], got: vec![batch.actions.len()] });
    }
    let mut f = Forward::new(&net.params, with_grads);
    let tokens = net.tokenize(&mut f, &batch.obs, dropout)?;
    let e = net.encode_tokens(&mut f, tokens, b, token_mask);
    let weight: Vec<T> = batch.mask.iter().flat_map(|&m| std::iter::repeat_n(cst::<T>(m as f64), a)).collect();
    let loss = match cfg.head {
        HeadKind::Diffusion => {
            if sched.steps() != cfg.diffusion_steps {
                return Err(Error::Config(format!(
                    "schedule has {} steps but the network expects {}",
                    sched.steps(),
                    cfg.diffusion_steps
                )));
            }
            let mut x = Vec::with_capacity(b * h * a);
            for (i, (&act, &eps)) in batch.actions.iter().zip(&batch.noise).enumerate() {
                let ab = sched.alpha_bars[batch.ks[i / (h * a)]];
                x.push(cst::<T>(ab.sqrt() * act as f64 + (1.0 - ab).sqrt() * eps as f64));
            }
            let xk = f.tape.constant(Tensor::from_vec(&[b * h, a], x));
            let pred = net.decode(&mut f, &e, xk, &batch.ks, b, token_mask)?;
            let target = batch.noise.iter().map(|&v| cst::<T>(v as f64)).collect();
            f.tape.masked_mse(pred, target, weight)
        }
        HeadKind::Regression => {
            let pred = net.regress(&mut f, &e, token_mask)?;
            let target = batch.actions.iter().map(|&v| cst::<T>(v as f64)).collect();
            f.tape.masked_mse(pred, target, weight)
        }
    };
    let value = f.tape.value(loss).data[0].to_f64_lossy();
    let grads = if with_grads {
        let g = f.tape.backward(loss);
        f.param_grads(&g)
    } else {
        Vec::new()
    };
    Ok(LossGrad { loss: value, grads })
}

/// ε-MSE of `net` on `batch` in evaluation mode.
pub fn diffusion_loss<T: Scalar>(net: &PolicyNet<T>, batch: &Batch, sched: &NoiseSchedule) -> Result<f64> {
    Ok(batch_loss(net, batch, sched, None, None, false)?.loss)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = &mut params.get_mut(id).data;
            for (((p, m), v), g) in p.iter_mut().zip(&mut self.m[i]).zip(&mut self.v[i]).zip(&grads[i]) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - step * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Loss of the freshly initialised network on the first batch.
    pub init_loss: f64,
}

/// Fills dataset-derived fields (dims, cameras, image size, goal vocabulary).
pub fn config_for_dataset(base: &PolicyConfig, data: &Dataset) -> PolicyConfig {
    let h = &data.header;
    PolicyConfig {
        action_dim: h.action_dim,
        proprio_dim: h.proprio_dim,
        cameras: h.cameras,
        image_size: h.image_size,
        goal_vocab: h.task.goal_vocab(),
        ..base.clone()
    }
}

fn check_compatible(cfg: &PolicyConfig, data: &Dataset) -> Result<()> {
    let h = &data.header;
    let pairs = [
        ("action_dim", cfg.action_dim, h.action_dim),
        ("proprio_dim", cfg.proprio_dim, h.proprio_dim),
        ("cameras", cfg.cameras, h.cameras),
        ("image_size", cfg.image_size, h.image_size),
    ];
    for (name, want, got) in pairs {
        if want != got {
            return Err(Error::Config(format!("model {name} = {want} but dataset has {got}")));
        }
    }
    if let Some(ep) = data.episodes.iter().find(|e| e.goal >= cfg.goal_vocab) {
        return Err(Error::Config(format!("dataset goal {} outside model vocabulary {}", ep.goal, cfg.goal_vocab)));
    }
    Ok(())
}

/// Trains a policy and returns its checkpoint. Deterministic in `(policy, cfg, data)`.
pub fn train(
    policy: &PolicyConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    policy.validate()?;
    check_compatible(policy, data)?;
    let sched = NoiseSchedule::cosine(policy.diffusion_steps, crate::schedule::DEFAULT_COSINE_OFFSET)?;
    let sampler = ChunkSampler::new(data)?;
    let mut net = PolicyNet::<f32>::init(policy.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&net.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let start = Instant::now();
    let mut log = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    let mut init_loss = f64::NAN;
    for it in 0..cfg.iterations {
        let batch = sampler.sample(data, policy.horizon, policy.diffusion_steps, cfg.batch_size, &mut rng);
        let lg = batch_loss(&net, &batch, &sched, Some(&mut rng), None, true)?;
        if !lg.loss.is_finite() || lg.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {} with lr {:.3e}", lg.loss, learning_rate(it, cfg.lr, cfg.warmup, cfg.iterations)),
            });
        }
        if it == 0 {
            init_loss = lg.loss;
        }
        let lr = learning_rate(it, cfg.lr, cfg.warmup, cfg.iterations);
        opt.step(&mut net.params, &lg.grads, lr);
        acc += lg.loss;
        count += 1;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let rec = LogRecord { iteration: it + 1, loss: acc / count as f64, lr, wall_time: start.elapsed().as_secs_f64() };
            on_log(&rec);
            log.push(rec);
            acc = 0.0;
            count = 0;
        }
    }
    let meta = serde_json::json!({
        "train": cfg,
        "task": data.task(),
        "final_loss": log.last().map(|r| r.loss),
    });
    let checkpoint = Checkpoint { net, stats: data.stats().clone(), meta };
    Ok(TrainOutcome { checkpoint, log, init_loss })
}

/// Adds `N(0, scale²)` noise to every parameter so zero-initialised paths carry gradient.
pub fn perturb<T: Scalar>(params: &mut ParamStore<T>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for v in params.get_mut(id).data.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += cst::<T>(scale * z);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// Floor on the denominator of the relative error, so that pairs of
/// near-zero gradients compare on an absolute scale. Rounding in an O(1)
/// loss leaves central differences with ~1e-10 of noise at `h = 1e-5`, so
/// structurally zero gradients (key biases under softmax) need this headroom.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares analytic gradients with central differences of step `h` on
/// `n_params` scalars drawn uniformly from all parameters. Runs in f64; the
/// dropout mask is frozen by reseeding before every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    net: &PolicyNet<f64>,
    batch: &Batch,
    sched: &NoiseSchedule,
    n_params: usize,
    h: f64,
    seed: u64,
    token_mask: Option<&[bool]>,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) || n_params == 0 {
        return Err(Error::invalid("grad check needs h > 0 and at least one parameter"));
    }
    let dropout_seed = seed ^ BATCH_STREAM;
    let eval = |n: &PolicyNet<f64>, grads: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        batch_loss(n, batch, sched, Some(&mut rng), token_mask, grads)
    };
    let base = eval(net, true)?;
    let total = net.params.count();
    let mut offsets = Vec::with_capacity(net.params.len());
    let mut acc = 0;
    for (_, _, t) in net.params.iter() {
        offsets.push(acc);
        acc += t.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut entries = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let flat = rng.gen_range(0..total);
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[pi];
        let id = probe.params.ids().nth(pi).unwrap();
        let orig = probe.params.get(id).data[index];
        probe.params.get_mut(id).data[index] = orig + h;
        let up = eval(&probe, false)?.loss;
        probe.params.get_mut(id).data[index] = orig - h;
        let down = eval(&probe, false)?.loss;
        probe.params.get_mut(id).data[index] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = base.grads[pi][index];
        entries.push(GradCheckEntry {
            param: probe.params.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, entries })
}

/// A small random batch shaped for `cfg`, for gradient checks and smoke tests.
pub fn synthetic_batch(cfg: &PolicyConfig, batch: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = batch * cfg.image_size * cfg.image_size * 3;
    let (h, a) = (cfg.horizon, cfg.action_dim);
    let mut mask = vec![1.0f32; batch * h];
    // Pad the tail of the last sample so the mask path is exercised.
    if h > 1 {
        mask[batch * h - 1] = 0.0;
    }
    Batch {
        obs: ObsBatch {
            images: (0..cfg.cameras).map(|_| (0..px).map(|_| rng.gen::<f32>()).collect()).collect(),
            proprio: (0..batch * cfg.proprio_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            goals: (0..batch).map(|_| rng.gen_range(0..cfg.goal_vocab)).collect(),
        },
        actions: (0..batch * h * a).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        mask,
        ks: (0..batch).map(|_| rng.gen_range(0..cfg.diffusion_steps)).collect(),
        noise: (0..batch * h * a).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// Smallest configuration that exercises every component.
pub fn tiny_config(variant: crate::nn::Variant) -> PolicyConfig {
    PolicyConfig {
        layers: 2,
        width: 8,
        heads: 2,
        horizon: 3,
        diffusion_steps: 20,
        action_dim: 2,
        proprio_dim: 2,
        cameras: 2,
        image_size: 8,
        cnn_channels: 4,
        goal_vocab: 2,
        goal_embed: 4,
        variant,
        ..PolicyConfig::default()
    }
}

/// Normalisation statistics are part of the checkpoint, so expose the identity
/// for synthetic runs.
pub fn identity_stats(cfg: &PolicyConfig) -> NormStats {
    NormStats::identity(cfg.proprio_dim, cfg.action_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, Task};
    use crate::nn::Variant;

    fn tiny_net(variant: Variant, seed: u64) -> PolicyNet<f64> {
        PolicyNet::<f64>::init(tiny_config(variant), seed).unwrap()
    }

    fn sched(cfg: &PolicyConfig) -> NoiseSchedule {
        NoiseSchedule::cosine(cfg.diffusion_steps, crate::schedule::DEFAULT_COSINE_OFFSET).unwrap()
    }

    #[test]
    fn init_loss_is_mean_squared_noise() {
        let cfg = tiny_config(Variant::AdalnZero);
        let net = PolicyNet::<f64>::init(cfg.clone(), 3).unwrap();
        let batch = synthetic_batch(&cfg, 64, 4);
        let loss = diffusion_loss(&net, &batch, &sched(&cfg)).unwrap();
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
        for (i, e) in batch.noise.iter().enumerate() {
            if batch.mask[i / cfg.action_dim] > 0.0 {
                let e2 = (*e as f64).powi(2);
                sum += e2;
                sq += e2 * e2;
                n += 1.0;
            }
        }
        let mean = sum / n;
        assert!((loss - mean).abs() < 1e-12, "{loss} vs {mean}");
        let se = ((sq / n - mean * mean) / n).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * se, "loss {loss}, se {se}");
    }

    #[test]
    fn zero_noise_with_zero_prediction_gives_zero_loss() {
        let cfg = tiny_config(Variant::AdalnZero);
        let net = tiny_net(Variant::AdalnZero, 1);
        let mut batch = synthetic_batch(&cfg, 5, 2);
        batch.noise.iter_mut().for_each(|e| *e = 0.0);
        assert_eq!(diffusion_loss(&net, &batch, &sched(&cfg)).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_recomputation_from_predictions() {
        let cfg = tiny_config(Variant::Adaln);
        let net = tiny_net(Variant::Adaln, 7);
        let batch = synthetic_batch(&cfg, 4, 8);
        let s = sched(&cfg);
        let (h, a) = (cfg.horizon, cfg.action_dim);
        let x: Vec<f64> = batch
            .actions
            .iter()
            .zip(&batch.noise)
            .enumerate()
            .map(|(i, (&act, &eps))| {
                let ab = s.alpha_bars[batch.ks[i / (h * a)]];
                ab.sqrt() * act as f64 + (1.0 - ab).sqrt() * eps as f64
            })
            .collect();
        let pred = net.predict_epsilon(&Tensor::from_vec(&[4 * h, a], x), &batch.ks, &batch.obs, None).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, (p, e)) in pred.data.iter().zip(&batch.noise).enumerate() {
            let w = batch.mask[i / a] as f64;
            num += w * (p - *e as f64).powi(2);
            den += w;
        }
        let loss = diffusion_loss(&net, &batch, &s).unwrap();
        assert!((loss - num / den).abs() < 1e-12, "{loss} vs {}", num / den);
        assert!(loss > 0.0);
    }

    #[test]
    fn learning_rate_warms_up_then_decays_monotonically() {
        let (base, warmup, total) = (3e-4, 50, 400);
        assert!((learning_rate(0, base, warmup, total) - base / 50.0).abs() < 1e-15);
        assert!((learning_rate(warmup - 1, base, warmup, total) - base).abs() < 1e-15);
        assert!((learning_rate(warmup, base, warmup, total) - base).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for it in warmup..total {
            let lr = learning_rate(it, base, warmup, total);
            assert!(lr <= prev, "lr rose at {it}");
            prev = lr;
        }
        assert!((learning_rate(total, base, warmup, total) - 0.1 * base).abs() < 1e-15);
        for it in 1..warmup {
            assert!(learning_rate(it, base, warmup, total) > learning_rate(it - 1, base, warmup, total));
        }
    }

    fn small_run(lr: f64, seed: u64) -> (PolicyConfig, TrainConfig, Dataset) {
        let data = generate_dataset(Task::Fork2d, 4, 11).unwrap();
        let base = PolicyConfig { width: 16, heads: 2, cnn_channels: 4, goal_embed: 4, ..PolicyConfig::default() };
        let policy = config_for_dataset(&base, &data);
        let cfg = TrainConfig { iterations: 3, batch_size: 4, lr, warmup: 1, seed, log_every: 1, ..TrainConfig::default() };
        (policy, cfg, data)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (policy, cfg, data) = small_run(0.0, 5);
        let out = train(&policy, &cfg, &data, |_| {}).unwrap();
        let fresh = PolicyNet::<f32>::init(policy, cfg.seed).unwrap();
        assert_eq!(out.checkpoint.net.params, fresh.params);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let (policy, cfg, data) = small_run(1e-3, 9);
        let a = train(&policy, &cfg, &data, |_| {}).unwrap();
        let b = train(&policy, &cfg, &data, |_| {}).unwrap();
        let losses = |o: &TrainOutcome| o.log.iter().map(|r| r.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.checkpoint.net.params, b.checkpoint.net.params);
        let fresh = PolicyNet::<f32>::init(policy, cfg.seed).unwrap();
        assert_ne!(a.checkpoint.net.params, fresh.params);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let (mut policy, cfg, data) = small_run(1e-3, 0);
        policy.action_dim = 3;
        assert!(matches!(train(&policy, &cfg, &data, |_| {}), Err(Error::Config(_))));
        let (policy, mut cfg, data) = small_run(1e-3, 0);
        cfg.iterations = 0;
        assert!(matches!(train(&policy, &cfg, &data, |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn gradients_match_finite_differences_for_every_variant() {
        for (i, variant) in Variant::ALL.into_iter().enumerate() {
            let cfg = tiny_config(variant);
            let mut net = tiny_net(variant, 20 + i as u64);
            perturb(&mut net.params, 0.05, 30 + i as u64);
            let batch = synthetic_batch(&cfg, 2, 40 + i as u64);
            let report = grad_check(&net, &batch, &sched(&cfg), 60, 1e-5, 50 + i as u64, None).unwrap();
            assert!(report.max_rel_error < 1e-4, "{variant}: {:?}", report.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)));
            assert!(report.entries.iter().any(|e| e.analytic.abs() > 1e-3), "{variant}: all gradients vanish");
        }
    }

    #[test]
    fn masked_camera_receives_no_gradient() {
        for variant in Variant::ALL {
            let cfg = tiny_config(variant);
            let mut net = tiny_net(variant, 4);
            perturb(&mut net.params, 0.05, 5);
            let batch = synthetic_batch(&cfg, 2, 6);
            let t = cfg.tokens_per_image();
            let mask: Vec<bool> = (0..cfg.seq_len()).map(|i| !(t..2 * t).contains(&i)).collect();
            let lg = batch_loss(&net, &batch, &sched(&cfg), None, Some(&mask), true).unwrap();
            let prefix = PolicyNet::<f64>::camera_prefix(1);
            let mut seen = 0;
            for ((_, name, _), g) in net.params.iter().zip(&lg.grads) {
                if name.starts_with(&prefix) {
                    assert!(g.iter().all(|v| *v == 0.0), "{variant}: {name} has gradient");
                    seen += 1;
                } else if name.starts_with(&PolicyNet::<f64>::camera_prefix(0)) {
                    assert!(g.iter().any(|v| *v != 0.0), "{variant}: {name} lost its gradient");
                }
            }
            assert!(seen > 0);
            let net_grads: Vec<_> = net.params.iter().map(|(_, n, _)| n.to_string()).collect();
            let idx = net_grads.iter().position(|n| n.starts_with(&prefix)).unwrap();
            let id = net.params.ids().nth(idx).unwrap();
            let mut probe = net.clone();
            let h = 1e-5;
            probe.params.get_mut(id).data[0] += h;
            let up = batch_loss(&probe, &batch, &sched(&cfg), None, Some(&mask), false).unwrap().loss;
            assert!((up - lg.loss).abs() < 1e-12, "{variant}: masked camera moves the loss");
        }
    }

    #[test]
    fn goal_changes_prediction_after_training() {
        let cfg = tiny_config(Variant::AdalnZero);
        let mut net = PolicyNet::<f32>::init(cfg.clone(), 12).unwrap();
        let s = sched(&cfg);
        let mut opt = AdamW::new(&net.params, 0.0);
        for step in 0..3 {
            let batch = synthetic_batch(&cfg, 4, 100 + step);
            let lg = batch_loss(&net, &batch, &s, None, None, true).unwrap();
            opt.step(&mut net.params, &lg.grads, 1e-2);
        }
        let mut batch = synthetic_batch(&cfg, 1, 7);
        let x = Tensor::from_vec(&[cfg.horizon, cfg.action_dim], batch.noise.clone());
        batch.obs.goals = vec![0];
        let a = net.predict_epsilon(&x, &[5], &batch.obs, None).unwrap();
        batch.obs.goals = vec![1];
        let b = net.predict_epsilon(&x, &[5], &batch.obs, None).unwrap();
        assert_ne!(a.data, b.data);
        assert!(a.all_finite() && b.all_finite());
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, &[vec![0.3, -4.0, 0.0]], 0.01);
        // Bias-corrected first step is lr·sign(g), after decoupled decay by (1 − lr·wd).
        let want = [1.0 * 0.999 - 0.01, -2.0 * 0.999 + 0.01, 0.5 * 0.999];
        for (got, want) in store.get(id).data.iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}
