//! Prints the cosine noise schedule, the DDIM timestep subsequence and a
//! forward-noising / clean-estimate round trip.
//!
//! ```text
//! cargo run --release --example noise_schedule -- [K]
//! ```

use ditblock::schedule::{ddim_timesteps, forward_noise, gaussian, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use ditblock::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ditblock::Result<()> {
    let k: usize = std::env::args().nth(1).map_or(100, |s| s.parse().expect("K must be an integer"));
    let sched = NoiseSchedule::cosine(k, DEFAULT_COSINE_OFFSET)?;

    println!("{:>5} {:>10} {:>10} {:>8}", "k", "beta", "alpha_bar", "SNR dB");
    let stride = (k / 10).max(1);
    for i in (0..k).step_by(stride).chain(std::iter::once(k - 1)) {
        let ab = sched.alpha_bars[i];
        println!("{i:>5} {:>10.3e} {:>10.6} {:>8.1}", sched.betas[i], ab, 10.0 * (ab / (1.0 - ab)).log10());
    }
    for steps in [1, 5, 10] {
        println!("DDIM-{steps}: {:?}", ddim_timesteps(k, steps.min(k))?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a0 = Tensor::from_vec(&[4, 2], vec![0.5, -0.5, 0.9, 0.1, -1.0, 1.0, 0.0, 0.3]);
    let eps = gaussian(&mut rng, 4, 2);
    for step in [0, k / 2, k - 1] {
        let x = forward_noise(&a0, step, &eps, &sched)?;
        let back = sched.predict_x0(&x, step, &eps)?;
        let err = back.data.iter().zip(&a0.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        println!("k={step:>4}: |x_k| = {:.3}, clean-estimate error {err:.1e}", x.data.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(())
}
