//! Evaluation campaigns: many seeded episodes of one engine on one scenario,
//! reduced to a report, plus the sweep axes and paired statistics.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::checkpoint::Model;
use crate::denoiser::Denoiser;
use crate::engine::{
    replanning_frequency, run_episode, BaselineConfig, BaselineEngine, EngineConfig, EngineKind,
    EpisodeLog, ExecClock, FrequencyEstimate, Planner, PlannerTick, QueueEngine,
    MIN_FREQUENCY_TICKS,
};
use crate::env::{FailureReason, Outcome};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub scenario: Scenario,
    pub engine: EngineKind,
    pub seeds: Vec<u64>,
    pub config: EngineConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub clock: ExecClock,
}

impl Campaign {
    pub fn new(
        scenario: Scenario,
        engine: EngineKind,
        seeds: Vec<u64>,
        config: EngineConfig,
    ) -> Self {
        Self {
            scenario,
            engine,
            seeds,
            config,
            baseline: BaselineConfig::default(),
            clock: ExecClock::default(),
        }
    }

    pub fn with_engine(&self, engine: EngineKind) -> Self {
        Self {
            engine,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} listed twice")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("campaign has no seeds".into()));
        }
        Ok(())
    }
}

/// Seeds `first, first + 1, …`.
pub fn seed_range(first: u64, count: usize) -> Vec<u64> {
    (first..first + count as u64).collect()
}

/// Planner seed derived from the episode seed so paired engines share it.
fn planner_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).rotate_left(17) ^ 0xA5A5
}

pub fn planner_for<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
    seed: u64,
) -> Result<Box<dyn Planner + Send>>
where
    D::Tape: 'static,
{
    Ok(match campaign.engine {
        EngineKind::Queue => Box::new(QueueEngine::new(
            model,
            &campaign.config,
            planner_seed(seed),
        )),
        EngineKind::Baseline => Box::new(BaselineEngine::new(
            model,
            campaign.baseline.clone(),
            &campaign.config,
            planner_seed(seed),
        )?),
    })
}

/// One episode of `campaign` for `seed`.
pub fn run_seed<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
    seed: u64,
) -> Result<EpisodeLog>
where
    D::Tape: 'static,
{
    let world = campaign.scenario.instantiate(seed)?;
    let mut planner = planner_for(model, campaign, seed)?;
    run_episode(
        planner.as_mut(),
        world,
        &campaign.scenario.name,
        seed,
        campaign.clock,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub outcome: Outcome,
    pub min_obstacle_distance: Option<f64>,
    pub max_guidance_norm: f64,
}

impl EpisodeSummary {
    pub fn of(log: &EpisodeLog) -> Self {
        Self {
            seed: log.header.seed,
            outcome: log.outcome.clone(),
            min_obstacle_distance: log
                .min_obstacle_distance
                .is_finite()
                .then_some(log.min_obstacle_distance),
            max_guidance_norm: log
                .ticks
                .iter()
                .map(|t| t.planner.guidance_norm)
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct FailureBreakdown {
    pub collision: usize,
    pub truncation: usize,
    pub divergence: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub campaign: Campaign,
    /// Content hash of the checkpoint evaluated, when known.
    pub checkpoint_hash: Option<String>,
    pub episodes: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
    /// 95% Wilson interval on the success rate.
    pub success_ci: (f64, f64),
    pub failures: FailureBreakdown,
    pub mean_collision_steps: f64,
    /// Mean collision steps over episodes that reached the goal but collided.
    pub mean_collision_steps_reached: Option<f64>,
    pub mean_min_obstacle_distance: Option<f64>,
    pub min_obstacle_distance: Option<f64>,
    pub frequency: Option<FrequencyEstimate>,
    pub per_seed: Vec<EpisodeSummary>,
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = n as f64;
    let p = k as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * ((p * (1.0 - p) + z * z / (4.0 * n)) / n).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Report {
    pub fn from_logs(
        campaign: &Campaign,
        logs: &[EpisodeLog],
        checkpoint_hash: Option<String>,
    ) -> Self {
        let per_seed: Vec<EpisodeSummary> = logs.iter().map(EpisodeSummary::of).collect();
        let n = per_seed.len();
        let successes = per_seed.iter().filter(|s| s.outcome.is_success()).count();
        let mut failures = FailureBreakdown::default();
        for s in &per_seed {
            match s.outcome.failure_reason {
                Some(FailureReason::Collision) => failures.collision += 1,
                Some(FailureReason::Truncation) => failures.truncation += 1,
                Some(FailureReason::Divergence) => failures.divergence += 1,
                None => {}
            }
        }
        let success_rate = if n > 0 {
            successes as f64 / n as f64
        } else {
            0.0
        };
        let ticks: Vec<_> = logs.iter().flat_map(|l| l.planner_ticks()).collect();
        let frequency = replanning_frequency(
            &ticks,
            campaign.engine,
            campaign.baseline.horizon,
            campaign.baseline.action_horizon,
        );
        let distances: Vec<f64> = per_seed
            .iter()
            .filter_map(|s| s.min_obstacle_distance)
            .collect();
        Self {
            campaign: campaign.clone(),
            checkpoint_hash,
            episodes: n,
            success_rate,
            failure_rate: 1.0 - success_rate,
            success_ci: wilson_interval(successes, n),
            failures,
            mean_collision_steps: mean(per_seed.iter().map(|s| s.outcome.collision_steps as f64))
                .unwrap_or(0.0),
            mean_collision_steps_reached: mean(
                per_seed
                    .iter()
                    .filter(|s| s.outcome.reached_goal && s.outcome.collision_steps > 0)
                    .map(|s| s.outcome.collision_steps as f64),
            ),
            mean_min_obstacle_distance: mean(distances.iter().copied()),
            min_obstacle_distance: distances.iter().copied().reduce(f64::min),
            frequency,
            per_seed,
        }
    }

    pub fn successes(&self) -> usize {
        self.per_seed
            .iter()
            .filter(|s| s.outcome.is_success())
            .count()
    }

    /// One row per seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,success,failure_reason,collision_steps,length,reached_goal,min_obstacle_distance\n");
        for s in &self.per_seed {
            let reason = match s.outcome.failure_reason {
                Some(FailureReason::Collision) => "collision",
                Some(FailureReason::Truncation) => "truncation",
                Some(FailureReason::Divergence) => "divergence",
                None => "",
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.seed,
                s.outcome.is_success() as u8,
                reason,
                s.outcome.collision_steps,
                s.outcome.length,
                s.outcome.reached_goal as u8,
                s.min_obstacle_distance
                    .map_or(String::new(), |d| format!("{d:.6}")),
            );
        }
        out
    }
}

/// Runs every seed (in parallel) and reduces in seed order.
pub fn run_campaign<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
    checkpoint_hash: Option<String>,
) -> Result<Report>
where
    D::Tape: 'static,
{
    Ok(Report::from_logs(
        campaign,
        &run_campaign_logs(model, campaign)?,
        checkpoint_hash,
    ))
}

pub fn run_campaign_logs<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
) -> Result<Vec<EpisodeLog>>
where
    D::Tape: 'static,
{
    campaign.validate()?;
    campaign
        .seeds
        .par_iter()
        .map(|&seed| run_seed(model.clone(), campaign, seed))
        .collect()
}

/// Paired comparison of two reports over the same seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Seeds where only the first report succeeded.
    pub first_only: usize,
    /// Seeds where only the second report succeeded.
    pub second_only: usize,
    /// One-sided exact sign-test p-value for "first beats second".
    pub p_value: f64,
}

pub fn sign_test(first: &Report, second: &Report) -> Result<SignTest> {
    if first.per_seed.len() != second.per_seed.len()
        || first
            .per_seed
            .iter()
            .zip(&second.per_seed)
            .any(|(a, b)| a.seed != b.seed)
    {
        return Err(Error::Config(
            "sign test needs reports over identical seeds".into(),
        ));
    }
    let (mut a, mut b) = (0usize, 0usize);
    for (x, y) in first.per_seed.iter().zip(&second.per_seed) {
        match (x.outcome.is_success(), y.outcome.is_success()) {
            (true, false) => a += 1,
            (false, true) => b += 1,
            _ => {}
        }
    }
    Ok(SignTest {
        first_only: a,
        second_only: b,
        p_value: sign_test_p(a, b),
    })
}

/// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    if wins == 0 {
        1.0
    } else {
        dist.sf(wins as u64 - 1)
    }
}

/// Both engines timed on the same model, scenario and execution clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyComparison {
    pub queue: FrequencyEstimate,
    pub baseline: FrequencyEstimate,
    /// Measured queue rate over measured baseline rate.
    pub measured_ratio: f64,
    /// The same ratio from the per-step means and the rate formulas.
    pub modeled_ratio: f64,
}

/// Runs episodes of `campaign` one after another (no parallelism, so the
/// timings are not contended) until `ticks` planner ticks are collected.
pub fn measure_frequency<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
    ticks: usize,
) -> Result<FrequencyEstimate>
where
    D::Tape: 'static,
{
    if ticks < MIN_FREQUENCY_TICKS {
        return Err(Error::Config(format!(
            "frequency needs at least {MIN_FREQUENCY_TICKS} ticks, got {ticks}"
        )));
    }
    let mut collected: Vec<PlannerTick> = Vec::with_capacity(ticks);
    let mut seed = campaign.seeds.first().copied().unwrap_or(0);
    while collected.len() < ticks {
        let log = run_seed(model.clone(), campaign, seed)?;
        if log.ticks.is_empty() {
            return Err(Error::Config(format!(
                "scenario {} produced an empty episode",
                campaign.scenario.name
            )));
        }
        collected.extend(log.ticks.into_iter().map(|t| t.planner));
        seed += 1;
    }
    collected.truncate(ticks);
    replanning_frequency(
        &collected,
        campaign.engine,
        campaign.baseline.horizon,
        campaign.baseline.action_horizon,
    )
    .ok_or_else(|| Error::Config("no denoiser steps were timed".into()))
}

pub fn compare_frequency<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    campaign: &Campaign,
    ticks: usize,
) -> Result<FrequencyComparison>
where
    D::Tape: 'static,
{
    let queue = measure_frequency(
        model.clone(),
        &campaign.with_engine(EngineKind::Queue),
        ticks,
    )?;
    let baseline = measure_frequency(model, &campaign.with_engine(EngineKind::Baseline), ticks)?;
    // both rates from the pooled per-step means, so the denoiser and Δa are identical
    let dp = (queue.mean_step_ms + baseline.mean_step_ms) / 2.0;
    let da = (queue.mean_exec_ms + baseline.mean_exec_ms) / 2.0;
    let (q, b) = crate::engine::modeled_frequencies(
        dp,
        da,
        campaign.baseline.horizon,
        campaign.baseline.action_horizon,
    );
    Ok(FrequencyComparison {
        measured_ratio: queue.measured_hz / baseline.measured_hz,
        modeled_ratio: q / b,
        queue,
        baseline,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Eta,
    ObstacleSpeed,
    MixRatio,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" => Ok(Self::Eta),
            "obstacle_speed" | "obstacle-speed" | "speed" => Ok(Self::ObstacleSpeed),
            "mix_ratio" | "mix-ratio" => Ok(Self::MixRatio),
            _ => Err(Error::Config(format!("unknown sweep axis '{s}'"))),
        }
    }
}

/// The campaign for one sweep value. Mix-ratio sweeps change the model, not
/// the campaign, so the campaign is returned unchanged for them.
pub fn sweep_point(base: &Campaign, axis: SweepAxis, value: f64) -> Campaign {
    let mut c = base.clone();
    match axis {
        SweepAxis::Eta => c.config.guidance.eta = value,
        SweepAxis::ObstacleSpeed => c.scenario = base.scenario.clone().with_normalized_speed(value),
        SweepAxis::MixRatio => {}
    }
    c
}

pub fn sweep<D: Denoiser + 'static>(
    model: Arc<Model<D>>,
    base: &Campaign,
    axis: SweepAxis,
    values: &[f64],
    checkpoint_hash: Option<String>,
) -> Result<Vec<Report>>
where
    D::Tape: 'static,
{
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&v| {
            run_campaign(
                model.clone(),
                &sweep_point(base, axis, v),
                checkpoint_hash.clone(),
            )
        })
        .collect()
}

/// Plot-ready table: one row per sweep value.
pub fn sweep_csv(axis: SweepAxis, values: &[f64], reports: &[Report]) -> String {
    let name = match axis {
        SweepAxis::Eta => "eta",
        SweepAxis::ObstacleSpeed => "obstacle_speed",
        SweepAxis::MixRatio => "mix_ratio",
    };
    let mut out = format!(
        "{name},episodes,success_rate,ci_low,ci_high,mean_collision_steps,mean_collision_steps_reached,mean_min_obstacle_distance,min_obstacle_distance\n"
    );
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for (v, r) in values.iter().zip(reports) {
        let _ = writeln!(
            out,
            "{v},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            r.episodes,
            r.success_rate,
            r.success_ci.0,
            r.success_ci.1,
            r.mean_collision_steps,
            opt(r.mean_collision_steps_reached),
            opt(r.mean_min_obstacle_distance),
            opt(r.min_obstacle_distance),
        );
    }
    out
}
