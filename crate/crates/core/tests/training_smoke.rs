//! Short end-to-end training runs on generated data.

use ditblock::envs::{generate_dataset, Task};
use ditblock::policy::{HeadKind, PolicyConfig};
use ditblock::training::{config_for_dataset, train, TrainConfig};

fn short_run(head: HeadKind) -> (f64, Vec<f64>) {
    let data = generate_dataset(Task::Fork2d, 20, 0).unwrap();
    let policy = config_for_dataset(&PolicyConfig { head, ..PolicyConfig::default() }, &data);
    let cfg = TrainConfig { iterations: 600, batch_size: 32, warmup: 50, log_every: 50, ..TrainConfig::default() };
    let out = train(&policy, &cfg, &data, |_| {}).unwrap();
    (out.init_loss, out.log.iter().map(|r| r.loss).collect())
}

#[test]
fn diffusion_loss_falls_well_below_the_noise_floor() {
    let (init, losses) = short_run(HeadKind::Diffusion);
    assert!((init - 1.0).abs() < 0.3, "init loss {init}");
    let last = *losses.last().unwrap();
    assert!(last < 0.5, "loss after 600 iterations {last}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn regression_loss_decreases() {
    let (_, losses) = short_run(HeadKind::Regression);
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}
