//! Runs a reduced conditioning and tokenizer ablation on the fork task and
//! writes the report, table and loss curves.
//!
//! ```text
//! cargo run --release --example ablation_grid -- [iterations] [out_dir]
//! ```

use std::path::PathBuf;

use ditblock::envs::{generate_dataset, Task};
use ditblock::eval::{run_ablation, SuiteConfig};
use ditblock::training::TrainConfig;

fn main() -> ditblock::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(2000, |s| s.parse().expect("iterations must be an integer"));
    let out = args.next().map_or_else(|| PathBuf::from("ablation_out"), PathBuf::from);

    let data = generate_dataset(Task::Fork2d, 100, 0)?;
    let suite = SuiteConfig {
        train: TrainConfig { iterations, batch_size: 32, warmup: 100, log_every: 100, ..TrainConfig::default() },
        n_rollouts: 20,
        ..SuiteConfig::default()
    };
    let report = run_ablation(&suite, &data, |m| eprintln!("{m}"))?;
    println!("{}", report.table());
    report.write(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
