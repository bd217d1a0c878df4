//! Compares reverse-mode gradients with central finite differences for each
//! conditioning variant and lists the worst-matching parameters.
//!
//! ```text
//! cargo run --release --example gradient_check -- [n_params]
//! ```

use ditblock::nn::Variant;
use ditblock::policy::PolicyNet;
use ditblock::schedule::{NoiseSchedule, DEFAULT_COSINE_OFFSET};
use ditblock::training::{grad_check, perturb, synthetic_batch, tiny_config};

fn main() -> ditblock::Result<()> {
    let n: usize = std::env::args().nth(1).map_or(200, |s| s.parse().expect("n_params must be an integer"));
    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let mut net = PolicyNet::<f64>::init(cfg.clone(), 0)?;
        // Move off the zero-gate initialisation so every path carries gradient.
        perturb(&mut net.params, 0.05, 1);
        let batch = synthetic_batch(&cfg, 2, 2);
        let sched = NoiseSchedule::cosine(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?;
        let report = grad_check(&net, &batch, &sched, n, 1e-5, 3, None)?;
        println!("{:<11} max relative error {:.2e}", variant.as_str(), report.max_rel_error);
        let mut worst = report.entries.clone();
        worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        for e in worst.iter().take(3) {
            println!("    {:<28} [{:>4}] analytic {:>12.5e} numeric {:>12.5e}", e.param, e.index, e.analytic, e.numeric);
        }
    }
    Ok(())
}
