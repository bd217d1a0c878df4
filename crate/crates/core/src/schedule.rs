//! Cosine noise schedule, the closed-form forward process and the DDPM / DDIM
//! reverse updates. All arithmetic here is f64; the network may run in f32.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default offset of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Upper bound applied to every beta.
pub const MAX_BETA: f64 = 0.999;

/// Precomputed per-step diffusion coefficients for `K` steps.
///
/// Step `k` noises clean data as `sqrt(alpha_bars[k])·a0 + sqrt(1 − alpha_bars[k])·ε`.
/// The reverse update from `k` to `k − 1` is
/// `x ← alpha_coeff[k]·(x − gamma_coeff[k]·ε̂) + sigma_coeff[k]·z`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    offset: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub alpha_coeff: Vec<f64>,
    pub gamma_coeff: Vec<f64>,
    pub sigma_coeff: Vec<f64>,
}

/// Unnormalised cosine curve `cos²(((u/K + s)/(1 + s))·π/2)`.
pub fn cosine_curve(u: f64, steps: usize, offset: f64) -> f64 {
    let phase = ((u / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
    phase.cos().powi(2)
}

impl NoiseSchedule {
    /// Cosine schedule with `betas[k] = min(1 − f(k+1)/f(k), 0.999)`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        if offset <= 0.0 || !offset.is_finite() {
            return Err(Error::invalid(format!("cosine offset must be positive, got {offset}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                let f0 = cosine_curve(k as f64, steps, offset);
                let f1 = cosine_curve((k + 1) as f64, steps, offset);
                (1.0 - f1 / f0).min(MAX_BETA)
            })
            .collect();
        Ok(Self::from_betas(betas, offset))
    }

    fn from_betas(betas: Vec<f64>, offset: f64) -> Self {
        let steps = betas.len();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut alpha_coeff = Vec::with_capacity(steps);
        let mut gamma_coeff = Vec::with_capacity(steps);
        let mut sigma_coeff = Vec::with_capacity(steps);
        for k in 0..steps {
            let prev = if k == 0 { 1.0 } else { alpha_bars[k - 1] };
            alpha_coeff.push(1.0 / alphas[k].sqrt());
            gamma_coeff.push(betas[k] / (1.0 - alpha_bars[k]).sqrt());
            // posterior variance of q(x_{k-1} | x_k, x_0)
            sigma_coeff.push((betas[k] * (1.0 - prev) / (1.0 - alpha_bars[k])).sqrt());
        }
        NoiseSchedule { steps, offset, betas, alphas, alpha_bars, alpha_coeff, gamma_coeff, sigma_coeff }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps {
            return Err(Error::invalid(format!("step {k} outside [0, {})", self.steps)));
        }
        Ok(())
    }

    /// Clean-sample estimate implied by a noise prediction at step `k`.
    pub fn predict_x0(&self, x: &Tensor<f64>, k: usize, eps_hat: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check_step(k)?;
        same_shape(x, eps_hat)?;
        let ab = self.alpha_bars[k];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x.data.iter().zip(&eps_hat.data).map(|(x, e)| (x - sn * e) / sa).collect();
        Ok(Tensor::from_vec(&x.shape, data))
    }
}

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch { expected: a.shape.clone(), got: b.shape.clone() });
    }
    Ok(())
}

/// Current noised chunk and its step index.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor<f64>,
    pub k: usize,
}

/// `sqrt(ᾱ_k)·a0 + sqrt(1 − ᾱ_k)·ε`.
pub fn forward_noise(a0: &Tensor<f64>, k: usize, eps: &Tensor<f64>, sched: &NoiseSchedule) -> Result<Tensor<f64>> {
    sched.check_step(k)?;
    same_shape(a0, eps)?;
    let ab = sched.alpha_bars[k];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = a0.data.iter().zip(&eps.data).map(|(a, e)| sa * a + sn * e).collect();
    Ok(Tensor::from_vec(&a0.shape, data))
}

/// One ancestral DDPM update from `state.k` to `state.k − 1`.
///
/// The noise term is added after the `alpha` scaling, as in the standard DDPM
/// sampler. Pass a zero `noise` for the deterministic posterior-mean update.
pub fn ddpm_step(
    state: &DiffusionState,
    eps_hat: &Tensor<f64>,
    sched: &NoiseSchedule,
    noise: &Tensor<f64>,
) -> Result<DiffusionState> {
    sched.check_step(state.k)?;
    if state.k == 0 {
        return Err(Error::invalid("ddpm_step: already at step 0"));
    }
    same_shape(&state.x, eps_hat)?;
    same_shape(&state.x, noise)?;
    let k = state.k;
    let (a, g, s) = (sched.alpha_coeff[k], sched.gamma_coeff[k], sched.sigma_coeff[k]);
    let data = state
        .x
        .data
        .iter()
        .zip(&eps_hat.data)
        .zip(&noise.data)
        .map(|((x, e), z)| a * (x - g * e) + s * z)
        .collect();
    Ok(DiffusionState { x: Tensor::from_vec(&state.x.shape, data), k: k - 1 })
}

/// Deterministic (η = 0) DDIM update between two cumulative signal levels.
/// Returns `(x_prev, â0)`.
pub fn ddim_update(
    x: &[f64],
    eps_hat: &[f64],
    alpha_bar: f64,
    alpha_bar_prev: f64,
    clip: Option<(f64, f64)>,
) -> (Vec<f64>, Vec<f64>) {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let mut out = Vec::with_capacity(x.len());
    let mut x0 = Vec::with_capacity(x.len());
    for (xv, e) in x.iter().zip(eps_hat) {
        let mut a0 = (xv - sn * e) / sa;
        if let Some((lo, hi)) = clip {
            a0 = a0.clamp(lo, hi);
        }
        x0.push(a0);
        out.push(pa * a0 + pn * e);
    }
    (out, x0)
}

/// DDIM update from `state.k` down to `k_prev`.
pub fn ddim_step(
    state: &DiffusionState,
    eps_hat: &Tensor<f64>,
    k_prev: usize,
    sched: &NoiseSchedule,
    clip: Option<(f64, f64)>,
) -> Result<DiffusionState> {
    sched.check_step(state.k)?;
    if k_prev >= state.k {
        return Err(Error::invalid(format!("ddim_step: target step {k_prev} is not below {}", state.k)));
    }
    same_shape(&state.x, eps_hat)?;
    let (x, _) = ddim_update(
        &state.x.data,
        &eps_hat.data,
        sched.alpha_bars[state.k],
        sched.alpha_bars[k_prev],
        clip,
    );
    Ok(DiffusionState { x: Tensor::from_vec(&state.x.shape, x), k: k_prev })
}

/// Evenly spaced decreasing step indices from `K − 1` to `0`, both included.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::invalid("ddim needs at least one step"));
    }
    if steps > total {
        return Err(Error::invalid(format!("ddim steps {steps} exceed schedule length {total}")));
    }
    if steps == 1 {
        return Ok(vec![total - 1]);
    }
    let last = (total - 1) as f64;
    Ok((0..steps)
        .map(|i| (last * (steps - 1 - i) as f64 / (steps - 1) as f64).round() as usize)
        .collect())
}

/// Standard-normal `rows × cols` draw.
pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Runs DDIM from a seeded Gaussian draw at step `K − 1` down to step 0.
///
/// `eps_fn(x, k)` predicts the noise in `x` at step `k`. The model is queried
/// once per transition, i.e. `steps − 1` times.
pub fn ddim_sample<F>(
    mut eps_fn: F,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
    shape: (usize, usize),
    clip: Option<(f64, f64)>,
) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>, usize) -> Result<Tensor<f64>>,
{
    let ks = ddim_timesteps(sched.steps(), steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DiffusionState { x: gaussian(&mut rng, shape.0, shape.1), k: ks[0] };
    for pair in ks.windows(2) {
        let eps = eps_fn(&state.x, pair[0])?;
        state = ddim_step(&state, &eps, pair[1], sched, clip)?;
    }
    Ok(state.x)
}
