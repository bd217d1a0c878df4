//! Fits an unconditional diffusion model to the two-point set {−1, +1} and
//! shows that DDIM samples land on both points while the mean sits between them.
//!
//! ```text
//! cargo run --release --example two_point_diffusion
//! ```

use ditblock::toy::{mass_near, sample_toy, train_toy, ToyConfig};

fn main() -> ditblock::Result<()> {
    let cfg = ToyConfig::default();
    let (model, losses) = train_toy(&cfg, &[-1.0, 1.0])?;
    let tail = &losses[losses.len() - 100..];
    println!("final loss {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);

    let samples = sample_toy(&model, &cfg, 10, 200, 7)?;
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    println!("mass near -1: {:.2}", mass_near(&samples, -1.0, 0.2));
    println!("mass near +1: {:.2}", mass_near(&samples, 1.0, 0.2));
    println!("mass near  0: {:.2}", mass_near(&samples, 0.0, 0.2));
    println!("sample mean {mean:.3} (a regression fit would output ~0)");

    let mut hist = [0usize; 20];
    for s in &samples {
        hist[(((s + 1.0) / 2.0 * 20.0) as usize).min(19)] += 1;
    }
    for (i, n) in hist.iter().enumerate() {
        println!("{:>5.2} {}", -1.0 + 0.1 * i as f64, "#".repeat(*n / 2));
    }
    Ok(())
}
