//! Kinematic point-mass world: an end-effector that moves toward commanded
//! target positions at a bounded speed, a fixed goal, and spherical
//! obstacles that are static, scripted or externally driven.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) mod geom {
    pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x - y).collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Distance from `p` to the segment `a → b`.
    pub fn point_segment_distance(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let ab = sub(b, a);
        let ap = sub(p, a);
        let len2 = dot(&ab, &ab);
        let t = if len2 > 0.0 {
            (dot(&ap, &ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let closest: Vec<f64> = a.iter().zip(&ab).map(|(x, d)| x + t * d).collect();
        dist(p, &closest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CollisionPolicy {
    /// Keep going and count colliding ticks.
    #[default]
    CountSteps,
    /// End the episode on the first colliding tick.
    Terminate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dim: usize,
    /// Workspace is `[-half_extent, half_extent]^dim`.
    pub half_extent: f64,
    /// Largest end-effector displacement per tick.
    pub v_max: f64,
    pub eps_goal: f64,
    pub t_max: usize,
    #[serde(default)]
    pub collision_policy: CollisionPolicy,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            half_extent: 2.0,
            v_max: 0.08,
            eps_goal: 0.1,
            t_max: 200,
            collision_policy: CollisionPolicy::CountSteps,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim > 3 {
            return Err(Error::Config(format!(
                "dim must be 2 or 3, got {}",
                self.dim
            )));
        }
        if !(self.half_extent > 0.0 && self.v_max > 0.0 && self.eps_goal > 0.0 && self.t_max > 0) {
            return Err(Error::Config(format!(
                "world parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .map(|x| x.clamp(-self.half_extent, self.half_extent))
            .collect()
    }

    /// Pulls `target` back along the ray from `from` (inside the workspace)
    /// until it lies in the workspace, keeping the direction of motion.
    pub fn clamp_along(&self, from: &[f64], target: &[f64]) -> Vec<f64> {
        let lim = self.half_extent;
        let mut t: f64 = 1.0;
        for (&a, &b) in from.iter().zip(target) {
            let d = b - a;
            if b > lim && d > 0.0 {
                t = t.min((lim - a) / d);
            } else if b < -lim && d < 0.0 {
                t = t.min((-lim - a) / d);
            }
        }
        let t = t.max(0.0);
        let out: Vec<f64> = from
            .iter()
            .zip(target)
            .map(|(a, b)| a + t * (b - a))
            .collect();
        self.clamp(&out)
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim && p.iter().all(|x| x.abs() <= self.half_extent)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant velocity per tick; reflects off the workspace walls when
    /// `bounce` is set.
    Linear {
        velocity: Vec<f64>,
        #[serde(default)]
        bounce: bool,
    },
    /// Orbit in the first two axes around `pivot`.
    Circular {
        pivot: Vec<f64>,
        orbit_radius: f64,
        /// Radians per tick.
        angular_speed: f64,
        phase: f64,
    },
    /// Heads straight for the end-effector at `speed` per tick.
    Pursuit {
        speed: f64,
    },
    /// Moved only by external commands.
    Driven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: u32,
    pub center: Vec<f64>,
    /// Geometric collision radius (independent of the guidance radius).
    pub radius: f64,
    pub motion: Motion,
}

impl Obstacle {
    pub fn fixed(id: u32, center: Vec<f64>, radius: f64) -> Self {
        Self {
            id,
            center,
            radius,
            motion: Motion::Static,
        }
    }

    /// Displacement per tick.
    pub fn speed(&self) -> f64 {
        match &self.motion {
            Motion::Static | Motion::Driven => 0.0,
            Motion::Linear { velocity, .. } => geom::norm(velocity),
            Motion::Circular {
                orbit_radius,
                angular_speed,
                ..
            } => 2.0 * orbit_radius * (angular_speed.abs() / 2.0).sin(),
            Motion::Pursuit { speed } => *speed,
        }
    }

    pub fn is_driven(&self) -> bool {
        matches!(self.motion, Motion::Driven)
    }

    /// One tick of scripted motion; `ee` is the end-effector position at the
    /// start of the tick.
    fn advance(&mut self, config: &WorldConfig, ee: &[f64]) {
        match &mut self.motion {
            Motion::Static | Motion::Driven => {}
            Motion::Linear { velocity, bounce } => {
                for (c, v) in self.center.iter_mut().zip(velocity.iter_mut()) {
                    *c += *v;
                    if *bounce {
                        let lim = config.half_extent;
                        if *c > lim {
                            *c = 2.0 * lim - *c;
                            *v = -*v;
                        } else if *c < -lim {
                            *c = -2.0 * lim - *c;
                            *v = -*v;
                        }
                    }
                }
            }
            Motion::Circular {
                pivot,
                orbit_radius,
                angular_speed,
                phase,
            } => {
                *phase += *angular_speed;
                self.center[0] = pivot[0] + *orbit_radius * phase.cos();
                self.center[1] = pivot[1] + *orbit_radius * phase.sin();
            }
            Motion::Pursuit { speed } => {
                let to = geom::sub(ee, &self.center);
                let d = geom::norm(&to);
                if d > 0.0 {
                    let step = speed.min(d) / d;
                    for (c, t) in self.center.iter_mut().zip(&to) {
                        *c += step * t;
                    }
                }
            }
        }
    }
}

/// Obstacle displacement per tick relative to the end-effector's top speed,
/// clamped to `[0, 1]`.
pub fn normalized_obstacle_speed(obstacle: &Obstacle, v_max: f64) -> f64 {
    (obstacle.speed() / v_max).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Success,
    Failure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Collision,
    Truncation,
    Divergence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    pub failure_reason: Option<FailureReason>,
    pub collision_steps: usize,
    pub length: usize,
    pub reached_goal: bool,
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        self.kind == OutcomeKind::Success
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: WorldConfig,
    pub ee: Vec<f64>,
    pub goal: Vec<f64>,
    pub obstacles: Vec<Obstacle>,
    pub tick: usize,
    pub collision_steps: usize,
    pub reached_goal: bool,
    pub diverged: bool,
    /// Smallest end-effector to obstacle-centre distance seen so far.
    pub min_obstacle_distance: f64,
}

impl WorldState {
    pub fn new(
        config: WorldConfig,
        ee: Vec<f64>,
        goal: Vec<f64>,
        obstacles: Vec<Obstacle>,
    ) -> Result<Self> {
        config.validate()?;
        for (what, p) in [("start", &ee), ("goal", &goal)] {
            if !config.contains(p) {
                return Err(Error::Config(format!("{what} {p:?} outside the workspace")));
            }
        }
        if let Some(o) = obstacles
            .iter()
            .find(|o| o.center.len() != config.dim || o.radius <= 0.0)
        {
            return Err(Error::Config(format!("invalid obstacle {o:?}")));
        }
        let reached_goal = geom::dist(&ee, &goal) <= config.eps_goal;
        let mut world = Self {
            config,
            ee,
            goal,
            obstacles,
            tick: 0,
            collision_steps: 0,
            reached_goal,
            diverged: false,
            min_obstacle_distance: f64::INFINITY,
        };
        world.track_distance();
        Ok(world)
    }

    /// `[ee; goal]`.
    pub fn observation(&self) -> Vec<f64> {
        self.ee.iter().chain(&self.goal).copied().collect()
    }

    pub fn is_done(&self) -> bool {
        self.reached_goal
            || self.diverged
            || self.tick >= self.config.t_max
            || (self.config.collision_policy == CollisionPolicy::Terminate
                && self.collision_steps > 0)
    }

    fn track_distance(&mut self) {
        for o in &self.obstacles {
            self.min_obstacle_distance = self
                .min_obstacle_distance
                .min(geom::dist(&self.ee, &o.center));
        }
    }

    /// Moves the end-effector toward `action` (pulled back into the
    /// workspace along the direction of motion, then limited to `v_max`),
    /// advances the obstacles and counts a collision if the end-effector's
    /// path during the tick, taken relative to each obstacle, passes through
    /// that obstacle.
    pub fn step(&mut self, action: &[f64]) -> Vec<f64> {
        if action.len() != self.config.dim || action.iter().any(|a| !a.is_finite()) {
            self.diverged = true;
            self.tick += 1;
            return self.observation();
        }
        let target = self.config.clamp_along(&self.ee, action);
        let delta = geom::sub(&target, &self.ee);
        let len = geom::norm(&delta);
        let scale = if len > self.config.v_max {
            self.config.v_max / len
        } else {
            1.0
        };
        let new_ee: Vec<f64> = self
            .ee
            .iter()
            .zip(&delta)
            .map(|(e, d)| e + scale * d)
            .collect();

        let mut collided = false;
        for o in &mut self.obstacles {
            let before = geom::sub(&self.ee, &o.center);
            o.advance(&self.config, &self.ee);
            let after = geom::sub(&new_ee, &o.center);
            let origin = vec![0.0; before.len()];
            if geom::point_segment_distance(&origin, &before, &after) < o.radius {
                collided = true;
            }
        }
        self.ee = new_ee;
        self.tick += 1;
        if collided {
            self.collision_steps += 1;
        }
        if geom::dist(&self.ee, &self.goal) <= self.config.eps_goal {
            self.reached_goal = true;
        }
        self.track_distance();
        self.observation()
    }

    pub fn classify(&self) -> Outcome {
        let (kind, failure_reason) = if self.diverged {
            (OutcomeKind::Failure, Some(FailureReason::Divergence))
        } else if self.collision_steps > 0 {
            (OutcomeKind::Failure, Some(FailureReason::Collision))
        } else if self.reached_goal {
            (OutcomeKind::Success, None)
        } else {
            (OutcomeKind::Failure, Some(FailureReason::Truncation))
        };
        Outcome {
            kind,
            failure_reason,
            collision_steps: self.collision_steps,
            length: self.tick,
            reached_goal: self.reached_goal,
        }
    }
}

/// Whether segment `a → b` passes within `radius` of `center`.
pub fn segment_hits_sphere(a: &[f64], b: &[f64], center: &[f64], radius: f64) -> bool {
    geom::point_segment_distance(center, a, b) < radius
}
