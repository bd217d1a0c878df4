//! Trains a goal-conditioned diffusion policy on the pick-and-place task,
//! where a discrete instruction selects which object goes to which bin, and
//! reports success per instruction. The task is unimodal given the
//! instruction, so the regression head is a fair comparison here.
//!
//! ```text
//! cargo run --release --example pickplace_language -- [iterations] [diffusion|regression]
//! ```

use ditblock::envs::pickplace::decode_goal;
use ditblock::envs::{generate_dataset, Task};
use ditblock::eval::{evaluate, RolloutOptions};
use ditblock::policy::{HeadKind, PolicyConfig};
use ditblock::training::{config_for_dataset, train, TrainConfig};

fn main() -> ditblock::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(5000, |s| s.parse().expect("iterations must be an integer"));
    let head = match args.next().as_deref() {
        None | Some("diffusion") => HeadKind::Diffusion,
        Some("regression") => HeadKind::Regression,
        Some(other) => panic!("unknown head {other}"),
    };
    let data = generate_dataset(Task::PickplaceLang, 100, 0)?;
    let policy = config_for_dataset(&PolicyConfig { head, ..PolicyConfig::default() }, &data);
    let cfg = TrainConfig { iterations, log_every: 500, ..TrainConfig::default() };
    let out = train(&policy, &cfg, &data, |r| println!("it {:>6} loss {:.4}", r.iteration, r.loss))?;

    let ev = evaluate(&out.checkpoint, Task::PickplaceLang, 40, 1_000_000, &RolloutOptions::default())?;
    println!("overall success {:.0}% ± {:.0}%", 100.0 * ev.success, 100.0 * ev.stderr);
    for goal in 0..Task::PickplaceLang.goal_vocab() {
        let runs: Vec<_> = ev.trajectories.iter().filter(|t| t.goal == goal).collect();
        let ok = runs.iter().filter(|t| t.success).count();
        let (object, bin) = decode_goal(goal);
        println!("  put object {object} in bin {bin}: {ok}/{}", runs.len());
    }
    Ok(())
}
