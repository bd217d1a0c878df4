//! Shows the exponential weights used to blend overlapping action chunks,
//! then compares closed-loop rollouts with and without ensembling.
//!
//! ```text
//! cargo run --release --example temporal_ensembling -- [checkpoint]
//! ```

use ditblock::envs::{generate_dataset, Task};
use ditblock::eval::{evaluate, temporal_ensemble, EnsembleBuffer, RolloutOptions};
use ditblock::policy::{Checkpoint, PolicyConfig};
use ditblock::training::{config_for_dataset, train, TrainConfig};

fn main() -> ditblock::Result<()> {
    // Chunks emitted at t = 0..4, each predicting the constant 10·t.
    let mut buf = EnsembleBuffer::new(0.1, 8, 1)?;
    for t in 0..4 {
        buf.push(t, vec![10.0 * t as f64; 8])?;
    }
    for (emitted, w) in buf.weights(3) {
        println!("chunk from t={emitted}: weight {w:.3}");
    }
    println!("blended action at t=3: {:.3}", temporal_ensemble(&buf, 3)?[0]);

    let ckpt = match std::env::args().nth(1) {
        Some(path) => Checkpoint::read(path)?,
        None => {
            let data = generate_dataset(Task::Fork2d, 100, 0)?;
            let policy = config_for_dataset(&PolicyConfig::default(), &data);
            let cfg = TrainConfig { iterations: 3000, log_every: 1000, ..TrainConfig::default() };
            train(&policy, &cfg, &data, |r| eprintln!("it {} loss {:.4}", r.iteration, r.loss))?.checkpoint
        }
    };
    for ensemble in [true, false] {
        let opts = RolloutOptions { ensemble, ..RolloutOptions::default() };
        let ev = evaluate(&ckpt, Task::Fork2d, 30, 1_000_000, &opts)?;
        println!(
            "ensemble {ensemble:<5}: success {:.0}%, left {:.2} right {:.2}, {:.0}s",
            100.0 * ev.success,
            ev.coverage.left,
            ev.coverage.right,
            ev.wall_seconds
        );
    }
    Ok(())
}
