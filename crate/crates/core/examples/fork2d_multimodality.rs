//! Trains a diffusion policy and a regression baseline on the two-way fork
//! task and compares success, mode coverage and the decision-point velocity.
//!
//! ```text
//! cargo run --release --example fork2d_multimodality -- [iterations] [out_dir]
//! ```

use std::path::PathBuf;

use ditblock::envs::{generate_dataset, Task};
use ditblock::eval::{evaluate, RolloutOptions};
use ditblock::policy::{Checkpoint, HeadKind, PolicyConfig};
use ditblock::training::{config_for_dataset, train, TrainConfig};

fn main() -> ditblock::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(20_000, |s| s.parse().expect("iterations must be an integer"));
    let out = args.next().map(PathBuf::from);

    let data = generate_dataset(Task::Fork2d, 100, 0)?;
    let train_cfg = TrainConfig { iterations, log_every: 500, ..TrainConfig::default() };
    let opts = RolloutOptions::default();

    for head in [HeadKind::Diffusion, HeadKind::Regression] {
        let policy = config_for_dataset(&PolicyConfig { head, ..PolicyConfig::default() }, &data);
        let outcome = train(&policy, &train_cfg, &data, |r| {
            println!("{head:?} it {:>6} loss {:.4} lr {:.2e} {:.0}s", r.iteration, r.loss, r.lr, r.wall_time)
        })?;
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir).expect("create output directory");
            outcome.checkpoint.write(dir.join(format!("{head:?}.ckpt").to_lowercase()))?;
        }
        report(&outcome.checkpoint, &opts)?;
    }
    Ok(())
}

fn report(ckpt: &Checkpoint, opts: &RolloutOptions) -> ditblock::Result<()> {
    let ev = evaluate(ckpt, Task::Fork2d, 50, 1_000_000, opts)?;
    println!(
        "{:?}: success {:.0}% ± {:.0}%, left {:.2} right {:.2}, |decision vx| {:.3} ({:.0}s)",
        ckpt.net.config.head,
        100.0 * ev.success,
        100.0 * ev.stderr,
        ev.coverage.left,
        ev.coverage.right,
        ev.decision_speed,
        ev.wall_seconds
    );
    Ok(())
}
