//! Language-conditioned pick and place: move the named object into the named receptacle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{Canvas, View};
use super::Observation;

pub const OBJECTS: usize = 2;
pub const RECEPTACLES: usize = 2;
pub const GOALS: usize = OBJECTS * RECEPTACLES;
pub const STEP_SCALE: f64 = 0.08;
pub const LATCH_RADIUS: f64 = 0.08;
pub const RECEPTACLE_RADIUS: f64 = 0.12;
pub const MAX_STEPS: usize = 60;
pub const ARENA: f64 = 0.8;
const MIN_SEPARATION: f64 = 0.35;
const GRIPPER_START: [f64; 2] = [0.0, 0.0];

const OBJECT_COLORS: [[f32; 3]; OBJECTS] = [[0.95, 0.2, 0.2], [0.2, 0.3, 0.95]];
const RECEPTACLE_COLORS: [[f32; 3]; RECEPTACLES] = [[0.95, 0.85, 0.1], [0.1, 0.9, 0.9]];

/// `(object, receptacle)` named by a goal id.
pub fn decode_goal(goal: usize) -> (usize, usize) {
    (goal / RECEPTACLES, goal % RECEPTACLES)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PickPlace {
    pub gripper: [f64; 2],
    pub objects: [[f64; 2]; OBJECTS],
    pub receptacles: [[f64; 2]; RECEPTACLES],
    pub held: Option<usize>,
    pub goal: usize,
    pub steps: usize,
}

impl PickPlace {
    /// Layout is drawn by rejection sampling so no two items overlap.
    pub fn reset(seed: u64, goal: usize) -> Self {
        assert!(goal < GOALS, "goal {goal} out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut placed: Vec<[f64; 2]> = Vec::with_capacity(OBJECTS + RECEPTACLES);
        while placed.len() < OBJECTS + RECEPTACLES {
            let p = [rng.gen_range(-ARENA..=ARENA), rng.gen_range(-ARENA..=ARENA)];
            let clear = placed.iter().all(|q| dist(p, *q) >= MIN_SEPARATION) && dist(p, GRIPPER_START) >= 0.2;
            if clear {
                placed.push(p);
            }
        }
        PickPlace {
            gripper: GRIPPER_START,
            objects: [placed[0], placed[1]],
            receptacles: [placed[2], placed[3]],
            held: None,
            goal,
            steps: 0,
        }
    }

    /// `action = [vx, vy, grip]`; grip above zero closes the gripper.
    pub fn step(&mut self, action: [f64; 3]) {
        for (g, a) in self.gripper.iter_mut().zip(action) {
            *g = (*g + STEP_SCALE * a.clamp(-1.0, 1.0)).clamp(-1.0, 1.0);
        }
        if let Some(o) = self.held {
            self.objects[o] = self.gripper;
        }
        if action[2] > 0.0 {
            if self.held.is_none() {
                self.held = (0..OBJECTS)
                    .filter(|&o| dist(self.objects[o], self.gripper) <= LATCH_RADIUS)
                    .min_by(|&a, &b| {
                        dist(self.objects[a], self.gripper).total_cmp(&dist(self.objects[b], self.gripper))
                    });
            }
        } else {
            self.held = None;
        }
        self.steps += 1;
    }

    /// Whether the layout satisfies `goal`: the object rests, released, inside the receptacle.
    pub fn satisfies(&self, goal: usize) -> bool {
        let (o, r) = decode_goal(goal);
        self.held != Some(o) && dist(self.objects[o], self.receptacles[r]) <= RECEPTACLE_RADIUS
    }

    pub fn success(&self) -> bool {
        self.satisfies(self.goal)
    }

    pub fn done(&self) -> bool {
        self.success() || self.steps >= MAX_STEPS
    }

    pub fn proprio(&self) -> Vec<f32> {
        vec![self.gripper[0] as f32, self.gripper[1] as f32, if self.held.is_some() { 1.0 } else { 0.0 }]
    }

    /// Whole-arena view plus a gripper-centred crop.
    pub fn render(&self, size: usize) -> Vec<Vec<f32>> {
        let views = [
            View { center: [0.0, 0.0], half_width: 1.05 },
            View { center: self.gripper, half_width: 0.5 },
        ];
        views
            .iter()
            .map(|view| {
                let mut c = Canvas::new(size, [0.05, 0.05, 0.05]);
                for (r, color) in self.receptacles.iter().zip(RECEPTACLE_COLORS) {
                    c.ring(view, *r, RECEPTACLE_RADIUS, 0.05, color);
                }
                for (o, color) in self.objects.iter().zip(OBJECT_COLORS) {
                    c.disc(view, *o, 0.07, color);
                }
                let shade = if self.held.is_some() { 0.6 } else { 1.0 };
                c.disc(view, self.gripper, 0.04, [shade; 3]);
                c.data
            })
            .collect()
    }

    pub fn observe(&self, size: usize) -> Observation {
        Observation { images: self.render(size), proprio: self.proprio() }
    }
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let mut v = [(to[0] - from[0]) / STEP_SCALE, (to[1] - from[1]) / STEP_SCALE];
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > 1.0 {
        v = [v[0] / n, v[1] / n];
    }
    v
}

/// Scripted expert: reach, latch, carry, release.
pub fn pickplace_expert(env: &PickPlace) -> [f64; 3] {
    let (o, r) = decode_goal(env.goal);
    if env.success() {
        return [0.0, 0.0, -1.0];
    }
    if env.held == Some(o) {
        let v = toward(env.gripper, env.receptacles[r]);
        let arriving = dist(env.gripper, env.receptacles[r]) <= STEP_SCALE;
        return [v[0], v[1], if arriving { -1.0 } else { 1.0 }];
    }
    let v = toward(env.gripper, env.objects[o]);
    // Close only on the step that lands on the object, and never while holding the wrong one.
    let arriving = env.held.is_none() && dist(env.gripper, env.objects[o]) <= STEP_SCALE;
    [v[0], v[1], if arriving { 1.0 } else { -1.0 }]
}
