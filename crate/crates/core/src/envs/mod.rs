//! Synthetic imitation tasks with scripted experts, and the episode dataset format.

pub mod dataset;
pub mod fork2d;
pub mod pickplace;
pub mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use dataset::{generate_dataset, Dataset, DatasetHeader, Episode, NormStats};
pub use fork2d::{fork_expert, Fork2d, Mode};
pub use pickplace::{pickplace_expert, PickPlace};

pub const IMAGE_SIZE: usize = 32;
pub const CAMERAS: usize = 2;

/// Camera images (channels-last, `size × size × 3`, values in `[0, 1]`) and raw proprioception.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub images: Vec<Vec<f32>>,
    pub proprio: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Fork2d,
    PickplaceLang,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Fork2d => "fork2d",
            Task::PickplaceLang => "pickplace_lang",
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Task::Fork2d => 2,
            Task::PickplaceLang => 3,
        }
    }

    pub fn proprio_dim(self) -> usize {
        match self {
            Task::Fork2d => 2,
            Task::PickplaceLang => 3,
        }
    }

    pub fn goal_vocab(self) -> usize {
        match self {
            Task::Fork2d => 1,
            Task::PickplaceLang => pickplace::GOALS,
        }
    }

    pub fn max_steps(self) -> usize {
        match self {
            Task::Fork2d => fork2d::MAX_STEPS,
            Task::PickplaceLang => pickplace::MAX_STEPS,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fork2d" => Ok(Task::Fork2d),
            "pickplace_lang" => Ok(Task::PickplaceLang),
            _ => Err(Error::invalid(format!("unknown env '{s}' (expected fork2d or pickplace_lang)"))),
        }
    }
}

/// Either task behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Fork2d(Fork2d),
    PickPlace(PickPlace),
}

impl Env {
    /// `seed` randomizes the pickplace layout; fork2d always starts at the origin.
    pub fn reset(task: Task, seed: u64, goal: usize) -> Result<Self> {
        if goal >= task.goal_vocab() {
            return Err(Error::invalid(format!("goal {goal} out of range for {task} ({} goals)", task.goal_vocab())));
        }
        Ok(match task {
            Task::Fork2d => Env::Fork2d(Fork2d::reset()),
            Task::PickplaceLang => Env::PickPlace(PickPlace::reset(seed, goal)),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Env::Fork2d(_) => Task::Fork2d,
            Env::PickPlace(_) => Task::PickplaceLang,
        }
    }

    pub fn goal(&self) -> usize {
        match self {
            Env::Fork2d(_) => 0,
            Env::PickPlace(e) => e.goal,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<()> {
        if action.len() != self.task().action_dim() || action.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid(format!("bad action {action:?} for {}", self.task())));
        }
        match self {
            Env::Fork2d(e) => e.step([action[0], action[1]]),
            Env::PickPlace(e) => e.step([action[0], action[1], action[2]]),
        }
        Ok(())
    }

    pub fn observe(&self) -> Observation {
        match self {
            Env::Fork2d(e) => e.observe(IMAGE_SIZE),
            Env::PickPlace(e) => e.observe(IMAGE_SIZE),
        }
    }

    /// Expert action; `mode` selects the fork2d detour side and is ignored otherwise.
    pub fn expert_action(&self, mode: Mode) -> Vec<f64> {
        match self {
            Env::Fork2d(e) => fork_expert(e.pos, mode).to_vec(),
            Env::PickPlace(e) => pickplace_expert(e).to_vec(),
        }
    }

    pub fn success(&self) -> bool {
        match self {
            Env::Fork2d(e) => e.success(),
            Env::PickPlace(e) => e.success(),
        }
    }

    pub fn done(&self) -> bool {
        match self {
            Env::Fork2d(e) => e.done(),
            Env::PickPlace(e) => e.done(),
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Env::Fork2d(e) => e.steps,
            Env::PickPlace(e) => e.steps,
        }
    }

    /// Planar position of the agent or gripper.
    pub fn position(&self) -> [f64; 2] {
        match self {
            Env::Fork2d(e) => e.pos,
            Env::PickPlace(e) => e.gripper,
        }
    }
}
