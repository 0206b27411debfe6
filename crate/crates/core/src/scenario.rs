//! Seeded episode generators: start/goal regions plus obstacle scripts.
//! Loadable from JSON so campaigns can run custom setups.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{geom, Motion, Obstacle, WorldConfig, WorldState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Point { at: Vec<f64> },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Region {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Region::Point { at } => at.clone(),
            Region::Box { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
                .collect(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Region::Point { at } => at.len(),
            Region::Box { lo, .. } => lo.len(),
        }
    }
}

/// Inclusive range sampled uniformly; `[x, x]` is a constant.
pub type Range = [f64; 2];

fn draw<R: Rng + ?Sized>(range: Range, rng: &mut R) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    Fixed {
        center: Vec<f64>,
    },
    /// On the straight start→goal segment at `fraction`, shifted sideways
    /// by `lateral` (sign chosen at random when `random_side`).
    OnPath {
        fraction: Range,
        lateral: Range,
        #[serde(default)]
        random_side: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionScript {
    Static,
    /// Moves perpendicular to the start→goal line at `speed` per tick and is
    /// timed to reach its placement point when a straight-line reacher at
    /// full speed would, shifted by `arrival_offset` ticks.
    Crossing {
        speed: f64,
        #[serde(default)]
        arrival_offset: Range,
    },
    Linear {
        velocity: Vec<f64>,
        #[serde(default)]
        bounce: bool,
    },
    /// Orbit of `orbit_radius` around the placement point.
    Circular {
        orbit_radius: f64,
        angular_speed: f64,
    },
    /// Chases the end-effector at `speed` per tick.
    Pursuit {
        speed: f64,
    },
    Driven,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleScript {
    pub radius: f64,
    pub placement: Placement,
    pub motion: MotionScript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub world: WorldConfig,
    pub start: Region,
    pub goal: Region,
    /// Rejection-sample start/goal pairs closer than this.
    #[serde(default)]
    pub min_separation: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleScript>,
}

const OBSTACLE_RADIUS: f64 = 0.2;

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Scenario = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let d = self.world.dim;
        if self.start.dim() != d || self.goal.dim() != d {
            return Err(Error::Config(format!(
                "scenario {}: region dimension differs from world dim {d}",
                self.name
            )));
        }
        for o in &self.obstacles {
            if o.radius <= 0.0 {
                return Err(Error::Config(format!(
                    "scenario {}: obstacle radius must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Start and goal anywhere in the central 90% of the workspace.
    pub fn reach() -> Self {
        let world = WorldConfig::default();
        let e = 0.9 * world.half_extent;
        let region = Region::Box {
            lo: vec![-e; world.dim],
            hi: vec![e; world.dim],
        };
        Self {
            name: "reach".into(),
            world,
            start: region.clone(),
            goal: region,
            min_separation: 0.5,
            obstacles: Vec::new(),
        }
    }

    /// Left-to-right reaching across the workspace.
    fn traverse(name: &str) -> Self {
        let world = WorldConfig::default();
        let w = world.half_extent;
        Self {
            name: name.into(),
            start: Region::Box {
                lo: vec![-0.85 * w, -0.25 * w],
                hi: vec![-0.65 * w, 0.25 * w],
            },
            goal: Region::Box {
                lo: vec![0.65 * w, -0.25 * w],
                hi: vec![0.85 * w, 0.25 * w],
            },
            world,
            min_separation: 0.5,
            obstacles: Vec::new(),
        }
    }

    /// One static obstacle sitting on the direct path.
    pub fn static_block() -> Self {
        let mut s = Self::traverse("static");
        s.obstacles.push(ObstacleScript {
            radius: OBSTACLE_RADIUS,
            placement: Placement::OnPath {
                fraction: [0.4, 0.6],
                lateral: [0.0, 0.1],
                random_side: true,
            },
            motion: MotionScript::Static,
        });
        s
    }

    /// One obstacle crossing the direct path at `speed` per tick.
    pub fn crossing(speed: f64) -> Self {
        let mut s = Self::traverse("crossing");
        s.obstacles.push(ObstacleScript {
            radius: OBSTACLE_RADIUS,
            placement: Placement::OnPath {
                fraction: [0.4, 0.6],
                lateral: [0.0, 0.0],
                random_side: false,
            },
            motion: MotionScript::Crossing {
                speed,
                arrival_offset: [-2.0, 2.0],
            },
        });
        s
    }

    /// Crossing obstacle at a moderate speed.
    pub fn dynamic() -> Self {
        let mut s = Self::crossing(0.25 * WorldConfig::default().v_max);
        s.name = "dynamic".into();
        s
    }

    /// One fixed episode geometry: straight left-to-right reach with an
    /// obstacle crossing the path from below at a quarter of the top speed.
    /// It is timed to meet an unguided reacher, which takes about 30 ticks
    /// to get to mid-path.
    pub fn scripted() -> Self {
        let world = WorldConfig::default();
        let w = world.half_extent;
        Self {
            name: "scripted".into(),
            start: Region::Point {
                at: vec![-0.75 * w, 0.0],
            },
            goal: Region::Point {
                at: vec![0.75 * w, 0.0],
            },
            min_separation: 0.0,
            obstacles: vec![ObstacleScript {
                radius: OBSTACLE_RADIUS,
                placement: Placement::Fixed {
                    center: vec![0.0, -0.2 * w],
                },
                motion: MotionScript::Linear {
                    velocity: vec![0.0, 0.25 * world.v_max],
                    bounce: false,
                },
            }],
            world,
        }
    }

    /// An obstacle waiting beside the path that chases the end-effector at
    /// `speed` per tick.
    pub fn pursuit(speed: f64) -> Self {
        let mut s = Self::traverse("pursuit");
        s.obstacles.push(ObstacleScript {
            radius: OBSTACLE_RADIUS,
            placement: Placement::OnPath {
                fraction: [0.4, 0.6],
                lateral: [1.0, 1.2],
                random_side: true,
            },
            motion: MotionScript::Pursuit { speed },
        });
        s
    }

    /// Moving obstacles retimed to a speed given relative to the
    /// end-effector's top speed.
    pub fn with_normalized_speed(mut self, normalized: f64) -> Self {
        let v = normalized * self.world.v_max;
        for o in &mut self.obstacles {
            match &mut o.motion {
                MotionScript::Crossing { speed, .. } | MotionScript::Pursuit { speed } => {
                    *speed = v
                }
                _ => {}
            }
        }
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reach" => Ok(Self::reach()),
            "static" => Ok(Self::static_block()),
            "dynamic" => Ok(Self::dynamic()),
            "scripted" => Ok(Self::scripted()),
            "pursuit" => Ok(Self::pursuit(0.5 * WorldConfig::default().v_max)),
            _ => Err(Error::Config(format!(
                "unknown scenario '{name}' (expected reach, static, dynamic, scripted, pursuit or a JSON file)"
            ))),
        }
    }

    pub fn preset_or_file(name: &str) -> Result<Self> {
        let path = Path::new(name);
        if path.extension().is_some_and(|e| e == "json") {
            Self::load(path)
        } else {
            Self::preset(name)
        }
    }

    fn sample_endpoints(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let mut best = (self.start.sample(rng), self.goal.sample(rng));
        for _ in 0..1000 {
            if geom::dist(&best.0, &best.1) >= self.min_separation {
                break;
            }
            best = (self.start.sample(rng), self.goal.sample(rng));
        }
        best
    }

    /// Start, goal and obstacles for one episode; the same seed always gives
    /// the same episode.
    pub fn instantiate(&self, seed: u64) -> Result<WorldState> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (start, goal) = self.sample_endpoints(&mut rng);
        let path = geom::sub(&goal, &start);
        let length = geom::norm(&path);
        let dir: Vec<f64> = if length > 0.0 {
            path.iter().map(|p| p / length).collect()
        } else {
            let mut d = vec![0.0; start.len()];
            d[0] = 1.0;
            d
        };
        let mut perp = vec![0.0; start.len()];
        perp[0] = -dir[1];
        perp[1] = dir[0];

        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for (id, script) in self.obstacles.iter().enumerate() {
            let (center, fraction) = match &script.placement {
                Placement::Fixed { center } => (center.clone(), None),
                Placement::OnPath {
                    fraction,
                    lateral,
                    random_side,
                } => {
                    let f = draw(*fraction, &mut rng);
                    let mut l = draw(*lateral, &mut rng);
                    if *random_side && rng.random_bool(0.5) {
                        l = -l;
                    }
                    let c = start
                        .iter()
                        .zip(&path)
                        .zip(&perp)
                        .map(|((s, p), q)| s + f * p + l * q)
                        .collect();
                    (c, Some(f))
                }
            };
            let (center, motion) = match &script.motion {
                MotionScript::Static => (center, Motion::Static),
                MotionScript::Driven => (center, Motion::Driven),
                MotionScript::Linear { velocity, bounce } => (
                    center,
                    Motion::Linear {
                        velocity: velocity.clone(),
                        bounce: *bounce,
                    },
                ),
                MotionScript::Circular {
                    orbit_radius,
                    angular_speed,
                } => {
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let pivot = center.clone();
                    let mut c = pivot.clone();
                    c[0] += orbit_radius * phase.cos();
                    c[1] += orbit_radius * phase.sin();
                    (
                        c,
                        Motion::Circular {
                            pivot,
                            orbit_radius: *orbit_radius,
                            angular_speed: *angular_speed,
                            phase,
                        },
                    )
                }
                MotionScript::Pursuit { speed } => (center, Motion::Pursuit { speed: *speed }),
                MotionScript::Crossing {
                    speed,
                    arrival_offset,
                } => {
                    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let travelled = fraction.unwrap_or(0.5) * length;
                    let arrival =
                        (travelled / self.world.v_max + draw(*arrival_offset, &mut rng)).max(0.0);
                    let velocity: Vec<f64> = perp.iter().map(|q| side * speed * q).collect();
                    let c = center
                        .iter()
                        .zip(&velocity)
                        .map(|(c, v)| c - v * arrival)
                        .collect();
                    let motion = if *speed > 0.0 {
                        Motion::Linear {
                            velocity,
                            bounce: false,
                        }
                    } else {
                        Motion::Static
                    };
                    (c, motion)
                }
            };
            obstacles.push(Obstacle {
                id: id as u32,
                center,
                radius: script.radius,
                motion,
            });
        }
        WorldState::new(self.world.clone(), start, goal, obstacles)
    }
}
