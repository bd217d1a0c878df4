//! Point agent that must pass a round obstacle on either side to reach a goal.

use serde::{Deserialize, Serialize};

use super::render::{Canvas, View};
use super::Observation;

pub const STEP_SCALE: f64 = 0.05;
pub const OBSTACLE: [f64; 2] = [0.0, 0.5];
pub const OBSTACLE_RADIUS: f64 = 0.2;
pub const GOAL: [f64; 2] = [0.0, 1.0];
pub const GOAL_TOLERANCE: f64 = 0.05;
pub const MAX_STEPS: usize = 40;
pub const WAYPOINT_X: f64 = 0.4;

const AGENT_RADIUS_DRAWN: f64 = 0.05;
const GOAL_RADIUS_DRAWN: f64 = 0.06;

/// Side on which the expert passes the obstacle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Left,
    Right,
}

impl Mode {
    pub fn sign(self) -> f64 {
        match self {
            Mode::Left => -1.0,
            Mode::Right => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fork2d {
    pub pos: [f64; 2],
    pub steps: usize,
    pub collided: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Fork2d {
    /// Every episode starts at the origin, so only the expert's coin flip
    /// decides the side and the first observation carries no hint of it.
    pub fn reset() -> Self {
        Fork2d { pos: [0.0, 0.0], steps: 0, collided: false }
    }

    /// Applies a velocity command; each component is clamped to `[-1, 1]`.
    pub fn step(&mut self, action: [f64; 2]) {
        for (p, a) in self.pos.iter_mut().zip(action) {
            *p += STEP_SCALE * a.clamp(-1.0, 1.0);
        }
        self.steps += 1;
        if dist(self.pos, OBSTACLE) < OBSTACLE_RADIUS {
            self.collided = true;
        }
    }

    pub fn success(&self) -> bool {
        !self.collided && dist(self.pos, GOAL) <= GOAL_TOLERANCE
    }

    pub fn done(&self) -> bool {
        self.collided || self.success() || self.steps >= MAX_STEPS
    }

    pub fn proprio(&self) -> Vec<f32> {
        vec![self.pos[0] as f32, self.pos[1] as f32]
    }

    /// Global view plus an agent-centred crop.
    pub fn render(&self, size: usize) -> Vec<Vec<f32>> {
        let views = [
            View { center: [0.0, 0.5], half_width: 0.7 },
            View { center: self.pos, half_width: 0.5 },
        ];
        views
            .iter()
            .map(|view| {
                let mut c = Canvas::new(size, [0.05, 0.05, 0.05]);
                c.disc(view, OBSTACLE, OBSTACLE_RADIUS, [0.9, 0.2, 0.2]);
                c.disc(view, GOAL, GOAL_RADIUS_DRAWN, [0.2, 0.9, 0.2]);
                c.disc(view, self.pos, AGENT_RADIUS_DRAWN, [0.2, 0.4, 1.0]);
                c.data
            })
            .collect()
    }

    pub fn observe(&self, size: usize) -> Observation {
        Observation { images: self.render(size), proprio: self.proprio() }
    }
}

/// Waypoint controller detouring through `(±0.4, 0.5)` and then heading for the goal.
pub fn fork_expert(pos: [f64; 2], mode: Mode) -> [f64; 2] {
    let waypoint = [mode.sign() * WAYPOINT_X, OBSTACLE[1]];
    let target = if pos[1] < waypoint[1] - 0.01 { waypoint } else { GOAL };
    let mut a = [(target[0] - pos[0]) / STEP_SCALE, (target[1] - pos[1]) / STEP_SCALE];
    let norm = (a[0] * a[0] + a[1] * a[1]).sqrt();
    if norm > 1.0 {
        a = [a[0] / norm, a[1] / norm];
    }
    a
}
