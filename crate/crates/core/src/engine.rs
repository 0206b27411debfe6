//! The rolling-queue planner, the full-window Guided-DP baseline, the
//! episode loop shared by both, and replanning-frequency accounting.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Model;
use crate::denoiser::Denoiser;
use crate::env::{Outcome, WorldConfig, WorldState};
use crate::error::{Error, Result};
use crate::guidance::{Guidance, GuidanceConfig};
use crate::sampler::{
    denoise_step, shift_queue, warm_start, ActionQueue, GuideContext, SamplerConfig, SlotInfo,
};
use crate::schedule::standard_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    Queue,
    Baseline,
}

impl std::fmt::Display for EngineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EngineKind::Queue => "queue",
            EngineKind::Baseline => "baseline",
        })
    }
}

/// What one planner tick did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerTick {
    pub tick: usize,
    pub levels_before: Vec<usize>,
    pub levels_after: Vec<usize>,
    /// Executed target position, world frame.
    pub action: Vec<f64>,
    /// Current clean-window estimate in world coordinates.
    pub plan: Vec<Vec<f64>>,
    pub guidance_norm: f64,
    pub energy: f64,
    pub guided: bool,
    /// Guidance step size in force this tick.
    #[serde(default)]
    pub eta: f64,
    /// Denoiser evaluations this tick.
    pub denoise_steps: usize,
    pub replanned: bool,
    /// Planning time Δp spent this tick, milliseconds.
    pub plan_ms: f64,
    /// Execution time Δa, milliseconds (filled in by the episode loop).
    pub exec_ms: f64,
    /// Bookkeeping of the dequeued queue slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_slot: Option<SlotInfo>,
}

/// Common surface of the two engines.
pub trait Planner {
    fn kind(&self) -> EngineKind;
    /// Starts a new episode from observation `o₀`.
    fn reset(&mut self, obs: &[f64]) -> Result<()>;
    /// Records the observation produced by the latest environment step.
    fn observe(&mut self, obs: &[f64]);
    /// Produces the next action given the obstacle centres visible now.
    fn tick(&mut self, obstacles: &[Vec<f64>]) -> Result<PlannerTick>;
    fn set_eta(&mut self, eta: f64);
    fn eta(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct EngineConfig {
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

struct ObsHistory {
    rows: VecDeque<Vec<f64>>,
    len: usize,
}

impl ObsHistory {
    fn reset(&mut self, obs: &[f64]) {
        self.rows = std::iter::repeat_n(obs.to_vec(), self.len).collect();
    }

    fn push(&mut self, obs: &[f64]) {
        self.rows.pop_front();
        self.rows.push_back(obs.to_vec());
    }

    fn normalized<D>(&self, model: &Model<D>) -> Array2<f64> {
        let d = self.rows.front().map_or(0, Vec::len);
        let raw = Array2::from_shape_fn((self.rows.len(), d), |(i, j)| self.rows[i][j]);
        model.normalizer.obs.normalize(raw.view())
    }
}

fn world_rows<D>(model: &Model<D>, window: &Array2<f64>, clip: bool) -> Vec<Vec<f64>> {
    let w = if clip {
        window.mapv(|v| v.clamp(-1.0, 1.0))
    } else {
        window.clone()
    };
    model
        .normalizer
        .action
        .denormalize(w.view())
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect()
}

/// Rolling action queue: one denoising step, one guidance correction and one
/// executed action per tick.
pub struct QueueEngine<D: Denoiser> {
    model: Arc<Model<D>>,
    guidance: Guidance,
    sampler: SamplerConfig,
    rng: ChaCha8Rng,
    queue: Option<ActionQueue>,
    history: ObsHistory,
    tick: usize,
}

impl<D: Denoiser> QueueEngine<D> {
    pub fn new(model: Arc<Model<D>>, config: &EngineConfig, seed: u64) -> Self {
        let len = model.denoiser.shape().obs_len;
        Self {
            model,
            guidance: config.guidance.build(),
            sampler: config.sampler.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: None,
            history: ObsHistory {
                rows: VecDeque::new(),
                len,
            },
            tick: 0,
        }
    }

    pub fn queue(&self) -> Option<&ActionQueue> {
        self.queue.as_ref()
    }

    /// Replaces the queue, e.g. with one built by a caller-controlled warm
    /// start.
    pub fn set_queue(&mut self, queue: ActionQueue) {
        self.queue = Some(queue);
    }

    pub fn set_energy(&mut self, guidance: Guidance) {
        self.guidance = guidance;
    }

    pub fn reset_history(&mut self, obs: &[f64]) {
        self.history.reset(obs);
        self.tick = 0;
    }

    /// Draws the latent for a new slot. Exposed so tests can mirror it.
    fn fresh(&mut self) -> Vec<f64> {
        let d = self.model.denoiser.shape().action_dim;
        standard_normal((1, d), &mut self.rng).into_iter().collect()
    }
}

impl<D: Denoiser> Planner for QueueEngine<D> {
    fn kind(&self) -> EngineKind {
        EngineKind::Queue
    }

    fn reset(&mut self, obs: &[f64]) -> Result<()> {
        self.reset_history(obs);
        let o = self.history.normalized(&self.model);
        let ws = warm_start(
            &self.model.denoiser,
            &self.model.schedule,
            o.view(),
            &self.sampler,
            &mut self.rng,
        )?;
        self.queue = Some(ws.queue);
        Ok(())
    }

    fn observe(&mut self, obs: &[f64]) {
        self.history.push(obs);
    }

    fn tick(&mut self, obstacles: &[Vec<f64>]) -> Result<PlannerTick> {
        let started = Instant::now();
        let schedule = &self.model.schedule;
        let obs = self.history.normalized(&self.model);
        let queue = self
            .queue
            .as_mut()
            .ok_or_else(|| Error::Protocol("tick before warm start".into()))?;
        if !queue.is_steady(schedule) {
            return Err(Error::Protocol(format!(
                "queue levels {:?} are not the steady-state vector",
                queue.levels.as_slice()
            )));
        }
        let levels_before = queue.levels.clone().into_inner();
        let to = queue.levels.lowered(schedule.tau());
        let ctx = GuideContext {
            guidance: &self.guidance,
            obstacles,
            normalizer: &self.model.normalizer,
        };
        let step = denoise_step(
            &self.model.denoiser,
            schedule,
            queue.actions.view(),
            &levels_before,
            &to,
            obs.view(),
            &self.sampler,
            Some(&ctx),
        )?;
        queue.actions = step.next;
        queue.levels = to;
        for (slot, &l) in queue.slots.iter_mut().zip(queue.levels.iter()) {
            slot.level_history.push(l);
        }
        let executed = Array1::from_iter(queue.actions.row(0).iter().copied());
        let action = self
            .model
            .normalizer
            .action
            .denormalize_row(executed.view())
            .to_vec();
        let plan = world_rows(&self.model, &step.clean, self.sampler.clip_sample);

        let fresh = self.fresh();
        let tick = self.tick;
        let queue = self.queue.as_mut().expect("queue checked above");
        let done = shift_queue(queue, &fresh, tick + 1, &self.model.schedule);
        debug_assert!(queue.is_steady(&self.model.schedule));
        self.tick += 1;
        Ok(PlannerTick {
            tick,
            levels_before,
            levels_after: queue.levels.clone().into_inner(),
            action,
            plan,
            guidance_norm: step.grad_norm,
            energy: step.energy,
            guided: step.guided,
            eta: self.guidance.eta,
            denoise_steps: 1,
            replanned: true,
            plan_ms: started.elapsed().as_secs_f64() * 1e3,
            exec_ms: 0.0,
            executed_slot: Some(done),
        })
    }

    fn set_eta(&mut self, eta: f64) {
        self.guidance.eta = eta;
    }

    fn eta(&self) -> f64 {
        self.guidance.eta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub horizon: usize,
    /// Actions executed open-loop per replan.
    pub action_horizon: usize,
    /// DDIM steps per replan.
    pub steps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_horizon: 8,
            steps: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self, model_horizon: usize) -> Result<()> {
        if self.horizon != model_horizon {
            return Err(Error::Mismatch {
                what: "baseline horizon",
                expected: model_horizon.to_string(),
                found: self.horizon.to_string(),
            });
        }
        if self.action_horizon == 0 || self.action_horizon > self.horizon || self.steps == 0 {
            return Err(Error::Config(format!(
                "need 1 <= H_a <= H and steps > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Guided-DP: resample a full window (guided at every DDIM step) and execute
/// its first `H_a` actions open-loop.
pub struct BaselineEngine<D: Denoiser> {
    model: Arc<Model<D>>,
    config: BaselineConfig,
    guidance: Guidance,
    sampler: SamplerConfig,
    rng: ChaCha8Rng,
    pending: VecDeque<Vec<f64>>,
    plan: Vec<Vec<f64>>,
    history: ObsHistory,
    tick: usize,
}

impl<D: Denoiser> BaselineEngine<D> {
    pub fn new(
        model: Arc<Model<D>>,
        config: BaselineConfig,
        engine: &EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate(model.denoiser.shape().horizon)?;
        let len = model.denoiser.shape().obs_len;
        Ok(Self {
            model,
            config,
            guidance: engine.guidance.build(),
            sampler: engine.sampler.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending: VecDeque::new(),
            plan: Vec::new(),
            history: ObsHistory {
                rows: VecDeque::new(),
                len,
            },
            tick: 0,
        })
    }
}

impl<D: Denoiser> Planner for BaselineEngine<D> {
    fn kind(&self) -> EngineKind {
        EngineKind::Baseline
    }

    fn reset(&mut self, obs: &[f64]) -> Result<()> {
        self.history.reset(obs);
        self.pending.clear();
        self.tick = 0;
        Ok(())
    }

    fn observe(&mut self, obs: &[f64]) {
        self.history.push(obs);
    }

    fn tick(&mut self, obstacles: &[Vec<f64>]) -> Result<PlannerTick> {
        let started = Instant::now();
        let schedule = &self.model.schedule;
        let k = schedule.steps();
        let mut out = PlannerTick {
            tick: self.tick,
            levels_before: Vec::new(),
            levels_after: Vec::new(),
            action: Vec::new(),
            plan: Vec::new(),
            guidance_norm: 0.0,
            energy: 0.0,
            guided: false,
            eta: self.guidance.eta,
            denoise_steps: 0,
            replanned: false,
            plan_ms: 0.0,
            exec_ms: 0.0,
            executed_slot: None,
        };
        if self.pending.is_empty() {
            if !k.is_multiple_of(self.config.steps) {
                return Err(Error::Schedule(format!(
                    "{} steps do not divide K = {k}",
                    self.config.steps
                )));
            }
            let gap = k / self.config.steps;
            let obs = self.history.normalized(&self.model);
            let shape = self.model.denoiser.shape();
            let mut a = standard_normal((shape.horizon, shape.action_dim), &mut self.rng);
            let ctx = GuideContext {
                guidance: &self.guidance,
                obstacles,
                normalizer: &self.model.normalizer,
            };
            for i in 0..self.config.steps {
                let from = vec![k - i * gap; shape.horizon];
                let to = vec![k - (i + 1) * gap; shape.horizon];
                let step = denoise_step(
                    &self.model.denoiser,
                    schedule,
                    a.view(),
                    &from,
                    &to,
                    obs.view(),
                    &self.sampler,
                    Some(&ctx),
                )?;
                out.guidance_norm = out.guidance_norm.max(step.grad_norm);
                out.energy = out.energy.max(step.energy);
                out.guided |= step.guided;
                a = step.next;
            }
            let rows = world_rows(&self.model, &a, false);
            self.pending = rows
                .iter()
                .take(self.config.action_horizon)
                .cloned()
                .collect();
            self.plan = rows;
            out.denoise_steps = self.config.steps;
            out.replanned = true;
        }
        out.action = self.pending.pop_front().expect("replanned above");
        out.plan = self
            .plan
            .iter()
            .skip(self.config.action_horizon - self.pending.len() - 1)
            .cloned()
            .collect();
        out.plan_ms = started.elapsed().as_secs_f64() * 1e3;
        self.tick += 1;
        Ok(out)
    }

    fn set_eta(&mut self, eta: f64) {
        self.guidance.eta = eta;
    }

    fn eta(&self) -> f64 {
        self.guidance.eta
    }
}

/// How the execution time Δa of an environment step is accounted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecClock {
    /// Every step costs a fixed number of milliseconds of logical time.
    Simulated { ms: f64 },
    /// Measure the environment step itself.
    WallClock,
}

impl Default for ExecClock {
    fn default() -> Self {
        ExecClock::Simulated { ms: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleView {
    pub id: u32,
    pub center: Vec<f64>,
    pub radius: f64,
    pub driven: bool,
}

impl ObstacleView {
    pub fn snapshot(world: &WorldState) -> Vec<Self> {
        world
            .obstacles
            .iter()
            .map(|o| Self {
                id: o.id,
                center: o.center.clone(),
                radius: o.radius,
                driven: o.is_driven(),
            })
            .collect()
    }
}

/// World state after a tick's environment step, plus what the planner did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub ee: Vec<f64>,
    pub goal: Vec<f64>,
    pub obstacles: Vec<ObstacleView>,
    pub collided: bool,
    pub collision_steps: usize,
    /// The episode ended with this tick.
    #[serde(default)]
    pub done: bool,
    pub planner: PlannerTick,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub engine: EngineKind,
    pub scenario: String,
    pub seed: u64,
    pub eta: f64,
    pub world: WorldConfig,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub obstacles: Vec<ObstacleView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickRecord>,
    pub outcome: Outcome,
    pub min_obstacle_distance: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Tick(TickRecord),
    Outcome {
        outcome: Outcome,
        min_obstacle_distance: Option<f64>,
    },
}

impl EpisodeLog {
    pub fn planner_ticks(&self) -> Vec<PlannerTick> {
        self.ticks.iter().map(|t| t.planner.clone()).collect()
    }

    /// Writes one JSON object per line: header, ticks, outcome.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &LogLine::Header(self.header.clone()))?;
        writeln!(w)?;
        for t in &self.ticks {
            serde_json::to_writer(&mut w, &LogLine::Tick(t.clone()))?;
            writeln!(w)?;
        }
        let min = self.min_obstacle_distance;
        serde_json::to_writer(
            &mut w,
            &LogLine::Outcome {
                outcome: self.outcome.clone(),
                min_obstacle_distance: min.is_finite().then_some(min),
            },
        )?;
        writeln!(w)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut end = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                what: "episode log",
                detail: format!("line {}: {e}", i + 1),
            })?;
            match parsed {
                LogLine::Header(h) => header = Some(h),
                LogLine::Tick(t) => ticks.push(t),
                LogLine::Outcome {
                    outcome,
                    min_obstacle_distance,
                } => end = Some((outcome, min_obstacle_distance.unwrap_or(f64::INFINITY))),
            }
        }
        let corrupt = |detail: &str| Error::Corrupt {
            what: "episode log",
            detail: detail.into(),
        };
        let header = header.ok_or_else(|| corrupt("missing header line"))?;
        let (outcome, min_obstacle_distance) =
            end.ok_or_else(|| corrupt("missing outcome line"))?;
        Ok(Self {
            header,
            ticks,
            outcome,
            min_obstacle_distance,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn centers(world: &WorldState) -> Vec<Vec<f64>> {
    world.obstacles.iter().map(|o| o.center.clone()).collect()
}

/// Alternates planner ticks and environment steps until the world reports
/// the episode done.
pub fn run_episode<P: Planner + ?Sized>(
    planner: &mut P,
    mut world: WorldState,
    scenario: &str,
    seed: u64,
    clock: ExecClock,
) -> Result<EpisodeLog> {
    let header = LogHeader {
        engine: planner.kind(),
        scenario: scenario.into(),
        seed,
        eta: planner.eta(),
        world: world.config.clone(),
        start: world.ee.clone(),
        goal: world.goal.clone(),
        obstacles: ObstacleView::snapshot(&world),
    };
    planner.reset(&world.observation())?;
    let mut ticks = Vec::new();
    while !world.is_done() {
        let visible = centers(&world);
        let mut planner_tick = planner.tick(&visible)?;
        let before = world.collision_steps;
        let started = Instant::now();
        let obs = world.step(&planner_tick.action);
        planner_tick.exec_ms = match clock {
            ExecClock::Simulated { ms } => ms,
            ExecClock::WallClock => started.elapsed().as_secs_f64() * 1e3,
        };
        planner.observe(&obs);
        ticks.push(TickRecord {
            tick: planner_tick.tick,
            ee: world.ee.clone(),
            goal: world.goal.clone(),
            obstacles: ObstacleView::snapshot(&world),
            collided: world.collision_steps > before,
            collision_steps: world.collision_steps,
            done: world.is_done(),
            planner: planner_tick,
        });
    }
    Ok(EpisodeLog {
        header,
        ticks,
        outcome: world.classify(),
        min_obstacle_distance: world.min_obstacle_distance,
    })
}

/// Modeled rates `(queue, baseline)` in Hz for per-step planning time `dp`
/// and execution time `da`, both in milliseconds.
pub fn modeled_frequencies(
    dp_ms: f64,
    da_ms: f64,
    horizon: usize,
    action_horizon: usize,
) -> (f64, f64) {
    let queue = 1e3 / (dp_ms + da_ms);
    let baseline = 1e3 / (horizon as f64 * dp_ms + action_horizon as f64 * da_ms);
    (queue, baseline)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub engine: EngineKind,
    pub ticks: usize,
    /// Mean planning time per denoiser step.
    pub mean_step_ms: f64,
    pub mean_exec_ms: f64,
    pub modeled_hz: f64,
    pub measured_hz: f64,
}

pub const MIN_FREQUENCY_TICKS: usize = 10;

/// Replanning frequency from a tick stream. `None` with fewer than
/// [`MIN_FREQUENCY_TICKS`] ticks.
pub fn replanning_frequency(
    ticks: &[PlannerTick],
    engine: EngineKind,
    horizon: usize,
    action_horizon: usize,
) -> Option<FrequencyEstimate> {
    if ticks.len() < MIN_FREQUENCY_TICKS {
        return None;
    }
    let steps: usize = ticks.iter().map(|t| t.denoise_steps).sum();
    let plan: f64 = ticks.iter().map(|t| t.plan_ms).sum();
    let exec: f64 = ticks.iter().map(|t| t.exec_ms).sum();
    if steps == 0 {
        return None;
    }
    let dp = plan / steps as f64;
    let da = exec / ticks.len() as f64;
    let (q, b) = modeled_frequencies(dp, da, horizon, action_horizon);
    let replans = ticks.iter().filter(|t| t.replanned).count();
    let measured_hz = replans as f64 / ((plan + exec) / 1e3);
    Some(FrequencyEstimate {
        engine,
        ticks: ticks.len(),
        mean_step_ms: dp,
        mean_exec_ms: da,
        modeled_hz: match engine {
            EngineKind::Queue => q,
            EngineKind::Baseline => b,
        },
        measured_hz,
    })
}
