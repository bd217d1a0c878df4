//! Unconditional diffusion on one-dimensional point sets, small enough to
//! check sampling against a known target distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Dense, Forward, Init, ParamStore, TimestepEmbedder};
use crate::schedule::{ddim_sample, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::tensor::{cst, Scalar, Tensor};
use crate::training::{learning_rate, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub width: usize,
    pub diffusion_steps: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { width: 64, diffusion_steps: 100, iterations: 3000, batch_size: 128, lr: 2e-3, warmup: 100, seed: 0 }
    }
}

/// `ε(x, k) = Dense(SiLU(Dense(SiLU(Dense(x) + t(k)))))`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub params: ParamStore<f32>,
    time: TimestepEmbedder,
    input: Dense,
    hidden: Dense,
    output: Dense,
}

impl ToyDenoiser {
    pub fn init(width: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let time = TimestepEmbedder::new(&mut b, "time", width)?;
        let input = b.dense("input", 1, width, Init::Xavier);
        let hidden = b.dense("hidden", width, width, Init::Xavier);
        let output = b.dense("output", width, 1, Init::Xavier);
        Ok(ToyDenoiser { params, time, input, hidden, output })
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Tensor<T>, ks: &[usize]) -> Result<crate::autograd::Var> {
        let x = f.tape.constant(x);
        let t = self.time.forward(f, ks)?;
        let h = self.input.forward(f, x);
        let h = f.tape.add(h, t);
        let h = f.tape.silu(h);
        let h = self.hidden.forward(f, h);
        let h = f.tape.silu(h);
        Ok(self.output.forward(f, h))
    }

    /// Noise prediction for a column of points, all at step `k`.
    pub fn predict(&self, x: &Tensor<f64>, k: usize) -> Result<Tensor<f64>> {
        let mut f = Forward::new(&self.params, false);
        let ks = vec![k; x.rows()];
        let out = self.forward(&mut f, x.cast(), &ks)?;
        Ok(f.tape.into_value(out).cast())
    }
}

/// Trains a denoiser on draws from `points` and returns it with the per-iteration losses.
pub fn train_toy(cfg: &ToyConfig, points: &[f64]) -> Result<(ToyDenoiser, Vec<f64>)> {
    if points.is_empty() || cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("toy training needs points, iterations and a batch size"));
    }
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
    let mut model = ToyDenoiser::init(cfg.width, cfg.seed)?;
    let mut opt = AdamW::new(&model.params, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let b = cfg.batch_size;
        let ks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..cfg.diffusion_steps)).collect();
        let eps: Vec<f64> = (0..b).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x: Vec<f32> = ks
            .iter()
            .zip(&eps)
            .map(|(&k, e)| {
                let ab = sched.alpha_bars[k];
                let a = points[rng.gen_range(0..points.len())];
                (ab.sqrt() * a + (1.0 - ab).sqrt() * e) as f32
            })
            .collect();
        let mut f = Forward::new(&model.params, true);
        let pred = model.forward(&mut f, Tensor::from_vec(&[b, 1], x), &ks)?;
        let loss = f.tape.masked_mse(pred, eps.iter().map(|&e| cst(e)).collect(), vec![1.0; b]);
        let value = f.tape.value(loss).data[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { iteration: it, detail: format!("toy loss {value}") });
        }
        let grads = f.param_grads(&f.tape.backward(loss));
        opt.step(&mut model.params, &grads, learning_rate(it, cfg.lr, cfg.warmup, cfg.iterations));
        losses.push(value);
    }
    Ok((model, losses))
}

/// `n` DDIM samples from the trained denoiser, clipped to `[-1, 1]` inside the sampler.
pub fn sample_toy(model: &ToyDenoiser, cfg: &ToyConfig, ddim_steps: usize, n: usize, seed: u64) -> Result<Vec<f64>> {
    let sched = NoiseSchedule::cosine(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
    let out = ddim_sample(|x, k| model.predict(x, k), &sched, ddim_steps, seed, (n, 1), Some((-1.0, 1.0)))?;
    Ok(out.data)
}

/// Fraction of `samples` within `radius` of `center`.
pub fn mass_near(samples: &[f64], center: f64, radius: f64) -> f64 {
    samples.iter().filter(|&&s| (s - center).abs() <= radius).count() as f64 / samples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_lowers_the_loss() {
        let cfg = ToyConfig { iterations: 300, width: 32, ..ToyConfig::default() };
        let (_, losses) = train_toy(&cfg, &[-1.0, 1.0]).unwrap();
        let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn mass_counts_the_window() {
        assert_eq!(mass_near(&[-1.0, -0.85, 0.0, 0.3, 1.0], -1.0, 0.2), 0.4);
        assert_eq!(mass_near(&[], 0.0, 1.0), 0.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = ToyConfig { width: 8, diffusion_steps: 20, ..ToyConfig::default() };
        let m = ToyDenoiser::init(8, 0).unwrap();
        assert_eq!(sample_toy(&m, &cfg, 5, 10, 3).unwrap(), sample_toy(&m, &cfg, 5, 10, 3).unwrap());
        assert!(train_toy(&cfg, &[]).is_err());
    }
}
