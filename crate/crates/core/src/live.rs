//! Interactive sessions: the wire messages exchanged with steering clients,
//! a session that applies client commands at tick start and records them so
//! the run can be reproduced, and a cursor for replaying recorded episodes.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::campaign::{planner_for, Campaign};
use crate::checkpoint::Model;
use crate::denoiser::Denoiser;
use crate::engine::{
    EngineConfig, EngineKind, EpisodeLog, LogHeader, ObstacleView, Planner, TickRecord,
};
use crate::env::{geom, Motion, Obstacle, Outcome, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::scenario::Scenario;

pub const SCHEMA_VERSION: u32 = 1;

/// A scenario given by preset name or spelled out inline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Name(String),
    Inline(Box<Scenario>),
}

impl ScenarioRef {
    pub fn resolve(&self) -> Result<Scenario> {
        match self {
            ScenarioRef::Name(name) => Scenario::preset(name),
            ScenarioRef::Inline(s) => {
                s.validate()?;
                Ok((**s).clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientCommand {
    /// Moves an obstacle (and optionally resizes it). From then on the
    /// obstacle follows commands only.
    SetObstacle {
        id: u32,
        center: Vec<f64>,
        #[serde(default)]
        radius: Option<f64>,
    },
    AddObstacle {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        id: Option<u32>,
    },
    RemoveObstacle {
        id: u32,
    },
    SetEta {
        eta: f64,
    },
    Pause,
    Resume,
    /// Starts a new episode, optionally with another scenario or seed.
    Reset {
        #[serde(default)]
        scenario: Option<ScenarioRef>,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Replay only: continue from the frame of `tick`.
    Seek {
        tick: usize,
    },
    /// Replay only: emit the next frame.
    Step,
    /// Replay only: playback speed relative to recording, 0 for stepping.
    SetRate {
        rate: f64,
    },
}

impl ClientCommand {
    /// Parses one text frame; the error text is what goes back to the client.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed command: {e}"))
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClientCommand::SetObstacle { .. } => "set_obstacle",
            ClientCommand::AddObstacle { .. } => "add_obstacle",
            ClientCommand::RemoveObstacle { .. } => "remove_obstacle",
            ClientCommand::SetEta { .. } => "set_eta",
            ClientCommand::Pause => "pause",
            ClientCommand::Resume => "resume",
            ClientCommand::Reset { .. } => "reset",
            ClientCommand::Seek { .. } => "seek",
            ClientCommand::Step => "step",
            ClientCommand::SetRate { .. } => "set_rate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Replay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Driver,
    Observer,
}

/// First message on every connection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub schema: u32,
    pub mode: Mode,
    pub role: Role,
    pub scenario: String,
    pub seed: u64,
    pub engine: EngineKind,
    pub world: WorldConfig,
    pub guidance: GuidanceConfig,
    pub horizon: usize,
    pub tau: usize,
    /// Ticks in the recording (replay mode only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

/// Episode status after a tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub collision_steps: usize,
    pub reached_goal: bool,
    pub done: bool,
    /// Final classification, on the frame that ends the episode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

/// Everything a client needs to draw one tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub schema: u32,
    pub tick: usize,
    pub ee: Vec<f64>,
    pub goal: Vec<f64>,
    pub obstacles: Vec<ObstacleView>,
    /// Queue levels the tick started from.
    pub levels: Vec<usize>,
    pub guidance_norm: f64,
    pub eta: f64,
    pub action: Vec<f64>,
    pub plan: Vec<Vec<f64>>,
    pub collided: bool,
    pub progress: Progress,
}

impl StateFrame {
    /// The frame for a logged tick. `outcome` is attached when the record
    /// ends the episode.
    pub fn from_record(
        record: &TickRecord,
        world: &WorldConfig,
        outcome: Option<&Outcome>,
    ) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            tick: record.tick,
            ee: record.ee.clone(),
            goal: record.goal.clone(),
            obstacles: record.obstacles.clone(),
            levels: record.planner.levels_before.clone(),
            guidance_norm: record.planner.guidance_norm,
            eta: record.planner.eta,
            action: record.planner.action.clone(),
            plan: record.planner.plan.clone(),
            collided: record.collided,
            progress: Progress {
                collision_steps: record.collision_steps,
                reached_goal: geom::dist(&record.ee, &record.goal) <= world.eps_goal,
                done: record.done,
                outcome: if record.done { outcome.cloned() } else { None },
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    State(StateFrame),
    Error { message: String },
}

impl ServerMessage {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// A command together with the session step it was applied before.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordedCommand {
    pub step: u64,
    pub command: ClientCommand,
}

/// One engine and one world driven tick by tick, with commands applied
/// between ticks.
pub struct LiveSession<D: Denoiser + 'static> {
    model: Arc<Model<D>>,
    engine: EngineKind,
    config: EngineConfig,
    scenario: Scenario,
    seed: u64,
    world: WorldState,
    planner: Box<dyn Planner + Send>,
    header: LogHeader,
    ticks: Vec<TickRecord>,
    paused: bool,
    /// Ticks run since the session started, across resets.
    steps: u64,
    recorded: Vec<RecordedCommand>,
}

impl<D: Denoiser + Send + Sync + 'static> LiveSession<D>
where
    D::Tape: 'static,
{
    pub fn new(
        model: Arc<Model<D>>,
        scenario: Scenario,
        engine: EngineKind,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        let (world, planner, header) = Self::start(&model, &scenario, engine, &config, seed)?;
        Ok(Self {
            model,
            engine,
            config,
            scenario,
            seed,
            world,
            planner,
            header,
            ticks: Vec::new(),
            paused: false,
            steps: 0,
            recorded: Vec::new(),
        })
    }

    fn start(
        model: &Arc<Model<D>>,
        scenario: &Scenario,
        engine: EngineKind,
        config: &EngineConfig,
        seed: u64,
    ) -> Result<(WorldState, Box<dyn Planner + Send>, LogHeader)> {
        let world = scenario.instantiate(seed)?;
        let campaign = Campaign::new(scenario.clone(), engine, vec![seed], config.clone());
        let mut planner = planner_for(model.clone(), &campaign, seed)?;
        planner.reset(&world.observation())?;
        let header = LogHeader {
            engine,
            scenario: scenario.name.clone(),
            seed,
            eta: planner.eta(),
            world: world.config.clone(),
            start: world.ee.clone(),
            goal: world.goal.clone(),
            obstacles: ObstacleView::snapshot(&world),
        };
        Ok((world, planner, header))
    }

    pub fn hello(&self, role: Role) -> Hello {
        let schedule = &self.model.schedule;
        Hello {
            schema: SCHEMA_VERSION,
            mode: Mode::Live,
            role,
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            engine: self.engine,
            world: self.world.config.clone(),
            guidance: GuidanceConfig {
                eta: self.planner.eta(),
                ..self.config.guidance.clone()
            },
            horizon: schedule.horizon(),
            tau: schedule.tau(),
            frames: None,
        }
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_done(&self) -> bool {
        self.world.is_done()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Every command applied so far, in order.
    pub fn recorded(&self) -> &[RecordedCommand] {
        &self.recorded
    }

    fn check_point(&self, what: &str, p: &[f64]) -> Result<()> {
        if p.iter().any(|x| !x.is_finite()) || !self.world.config.contains(p) {
            return Err(Error::Config(format!(
                "{what} {p:?} is not a point of the {}-d workspace [-{h}, {h}]",
                self.world.config.dim,
                h = self.world.config.half_extent
            )));
        }
        Ok(())
    }

    fn check_radius(radius: f64) -> Result<()> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Config(format!(
                "obstacle radius must be positive, got {radius}"
            )));
        }
        Ok(())
    }

    fn obstacle_mut(&mut self, id: u32) -> Result<&mut Obstacle> {
        self.world
            .obstacles
            .iter_mut()
            .find(|o| o.id == id)
            .ok_or_else(|| Error::Config(format!("no obstacle with id {id}")))
    }

    /// Validates and applies one command. Rejected commands change nothing
    /// and are not recorded.
    pub fn apply(&mut self, command: ClientCommand) -> Result<()> {
        match &command {
            ClientCommand::SetObstacle { id, center, radius } => {
                self.check_point("obstacle centre", center)?;
                if let Some(r) = radius {
                    Self::check_radius(*r)?;
                }
                let o = self.obstacle_mut(*id)?;
                o.center = center.clone();
                if let Some(r) = radius {
                    o.radius = *r;
                }
                o.motion = Motion::Driven;
            }
            ClientCommand::AddObstacle { center, radius, id } => {
                self.check_point("obstacle centre", center)?;
                Self::check_radius(*radius)?;
                let id = match id {
                    Some(id) if self.world.obstacles.iter().any(|o| o.id == *id) => {
                        return Err(Error::Config(format!("obstacle id {id} already in use")));
                    }
                    Some(id) => *id,
                    None => self
                        .world
                        .obstacles
                        .iter()
                        .map(|o| o.id + 1)
                        .max()
                        .unwrap_or(0),
                };
                self.world.obstacles.push(Obstacle {
                    id,
                    center: center.clone(),
                    radius: *radius,
                    motion: Motion::Driven,
                });
            }
            ClientCommand::RemoveObstacle { id } => {
                let before = self.world.obstacles.len();
                self.world.obstacles.retain(|o| o.id != *id);
                if self.world.obstacles.len() == before {
                    return Err(Error::Config(format!("no obstacle with id {id}")));
                }
            }
            ClientCommand::SetEta { eta } => {
                if !(eta.is_finite() && *eta >= 0.0) {
                    return Err(Error::Config(format!(
                        "eta must be finite and non-negative, got {eta}"
                    )));
                }
                self.planner.set_eta(*eta);
            }
            ClientCommand::Pause => self.paused = true,
            ClientCommand::Resume => self.paused = false,
            ClientCommand::Reset { scenario, seed } => {
                let scenario = match scenario {
                    Some(s) => s.resolve()?,
                    None => self.scenario.clone(),
                };
                let seed = seed.unwrap_or(self.seed);
                let eta = self.planner.eta();
                let (world, mut planner, mut header) =
                    Self::start(&self.model, &scenario, self.engine, &self.config, seed)?;
                planner.set_eta(eta);
                header.eta = eta;
                self.world = world;
                self.planner = planner;
                self.header = header;
                self.scenario = scenario;
                self.seed = seed;
                self.ticks.clear();
            }
            ClientCommand::Seek { .. } | ClientCommand::Step | ClientCommand::SetRate { .. } => {
                return Err(Error::Config(format!(
                    "'{}' is only accepted in replay mode",
                    command.name()
                )));
            }
        }
        self.recorded.push(RecordedCommand {
            step: self.steps,
            command,
        });
        Ok(())
    }

    /// Runs one tick unless paused or the episode is over.
    pub fn step(&mut self) -> Result<Option<StateFrame>> {
        if self.paused || self.world.is_done() {
            return Ok(None);
        }
        let visible: Vec<Vec<f64>> = self
            .world
            .obstacles
            .iter()
            .map(|o| o.center.clone())
            .collect();
        let mut planner_tick = self.planner.tick(&visible)?;
        let before = self.world.collision_steps;
        let started = Instant::now();
        let obs = self.world.step(&planner_tick.action);
        planner_tick.exec_ms = started.elapsed().as_secs_f64() * 1e3;
        self.planner.observe(&obs);
        let record = TickRecord {
            tick: planner_tick.tick,
            ee: self.world.ee.clone(),
            goal: self.world.goal.clone(),
            obstacles: ObstacleView::snapshot(&self.world),
            collided: self.world.collision_steps > before,
            collision_steps: self.world.collision_steps,
            done: self.world.is_done(),
            planner: planner_tick,
        };
        let outcome = record.done.then(|| self.world.classify());
        let frame = StateFrame::from_record(&record, &self.world.config, outcome.as_ref());
        self.ticks.push(record);
        self.steps += 1;
        Ok(Some(frame))
    }

    /// Tick-start drain: applies `commands` in order, then runs one tick.
    /// Returns the rejection message of every refused command.
    pub fn tick_with(
        &mut self,
        commands: impl IntoIterator<Item = ClientCommand>,
    ) -> (Vec<String>, Result<Option<StateFrame>>) {
        let errors = commands
            .into_iter()
            .filter_map(|c| self.apply(c).err().map(|e| e.to_string()))
            .collect();
        (errors, self.step())
    }

    /// The current episode (since the last reset) as a log.
    pub fn to_log(&self) -> EpisodeLog {
        EpisodeLog {
            header: self.header.clone(),
            ticks: self.ticks.clone(),
            outcome: self.world.classify(),
            min_obstacle_distance: self.world.min_obstacle_distance,
        }
    }
}

/// Re-runs a session from its recorded commands, for `steps` ticks.
pub fn rerun<D: Denoiser + Send + Sync + 'static>(
    model: Arc<Model<D>>,
    scenario: Scenario,
    engine: EngineKind,
    config: EngineConfig,
    seed: u64,
    commands: &[RecordedCommand],
    steps: u64,
) -> Result<(LiveSession<D>, Vec<StateFrame>)>
where
    D::Tape: 'static,
{
    let mut session = LiveSession::new(model, scenario, engine, config, seed)?;
    let mut frames = Vec::new();
    let mut next = commands.iter().peekable();
    while session.steps() < steps {
        let at = session.steps();
        let mut due = Vec::new();
        while let Some(c) = next.next_if(|c| c.step == at) {
            due.push(c.command.clone());
        }
        let (errors, frame) = session.tick_with(due);
        if let Some(e) = errors.first() {
            return Err(Error::Protocol(format!(
                "recorded command rejected on rerun: {e}"
            )));
        }
        match frame? {
            Some(f) => frames.push(f),
            None => break,
        }
    }
    Ok((session, frames))
}

/// Position and transport state of a recorded episode being played back.
#[derive(Clone, Debug)]
pub struct ReplayCursor {
    log: EpisodeLog,
    frames: Vec<StateFrame>,
    next: usize,
    paused: bool,
    rate: f64,
}

impl ReplayCursor {
    pub fn new(log: EpisodeLog) -> Self {
        let frames = log
            .ticks
            .iter()
            .map(|t| StateFrame::from_record(t, &log.header.world, Some(&log.outcome)))
            .collect();
        Self {
            log,
            frames,
            next: 0,
            paused: false,
            rate: 1.0,
        }
    }

    pub fn hello(&self, role: Role, guidance: GuidanceConfig, horizon: usize, tau: usize) -> Hello {
        let h = &self.log.header;
        Hello {
            schema: SCHEMA_VERSION,
            mode: Mode::Replay,
            role,
            scenario: h.scenario.clone(),
            seed: h.seed,
            engine: h.engine,
            world: h.world.clone(),
            guidance: GuidanceConfig {
                eta: h.eta,
                ..guidance
            },
            horizon,
            tau,
            frames: Some(self.frames.len()),
        }
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn frames(&self) -> &[StateFrame] {
        &self.frames
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Frames flow on their own only when playing at a positive rate.
    pub fn is_streaming(&self) -> bool {
        !self.paused && self.rate > 0.0 && self.next < self.frames.len()
    }

    /// Applies a transport command. Returns a frame when the command itself
    /// produces one (`step`).
    pub fn apply(&mut self, command: &ClientCommand) -> Result<Option<StateFrame>> {
        match command {
            ClientCommand::Pause => self.paused = true,
            ClientCommand::Resume => self.paused = false,
            ClientCommand::Seek { tick } => {
                let index = self
                    .frames
                    .iter()
                    .position(|f| f.tick == *tick)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "tick {tick} is not in the recording ({} frames)",
                            self.frames.len()
                        ))
                    })?;
                self.next = index;
            }
            ClientCommand::Step => return Ok(self.advance()),
            ClientCommand::SetRate { rate } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::Config(format!(
                        "rate must be finite and non-negative, got {rate}"
                    )));
                }
                self.rate = *rate;
            }
            other => {
                return Err(Error::Config(format!(
                    "'{}' is not accepted in replay mode",
                    other.name()
                )));
            }
        }
        Ok(None)
    }

    /// The next frame in order, if any remain.
    pub fn advance(&mut self) -> Option<StateFrame> {
        let f = self.frames.get(self.next).cloned();
        if f.is_some() {
            self.next += 1;
        }
        f
    }
}
