//! Reference computations for the rolling queue: the batch DDIM trajectory
//! each dequeued action must match, and the per-tick protocol invariants.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qplan::checkpoint::Model;
use qplan::data::{Affine, Normalizer};
use qplan::denoiser::{SeparableDouble, WindowShape};
use qplan::engine::{EngineConfig, Planner, QueueEngine};
use qplan::guidance::GuidanceConfig;
use qplan::sampler::{batch_sample_from, SamplerConfig};
use qplan::schedule::NoiseSchedule;

/// A short chain whose β stay below one for any `τ`.
pub fn small_schedule(horizon: usize, tau: usize) -> NoiseSchedule {
    NoiseSchedule::build(horizon * tau, horizon, 0.02, 0.3).unwrap()
}

pub fn separable_model(schedule: NoiseSchedule) -> Arc<Model<SeparableDouble>> {
    let horizon = schedule.horizon();
    let shape = WindowShape {
        horizon,
        action_dim: 2,
        obs_len: 2,
        obs_dim: 2,
    };
    let unit = Affine {
        min: vec![-2.0, -1.5],
        max: vec![2.0, 0.5],
    };
    Arc::new(Model {
        denoiser: SeparableDouble::new(shape, &schedule),
        schedule,
        normalizer: Normalizer {
            obs: unit.clone(),
            action: unit,
        },
    })
}

fn unguided() -> EngineConfig {
    EngineConfig {
        guidance: GuidanceConfig::unguided(),
        sampler: SamplerConfig::default(),
    }
}

/// Largest difference between a dequeued action and the batch DDIM sample
/// started from that slot's initial latent, over `ticks` ticks with the
/// observation window frozen at `obs`.
pub fn rolling_vs_batch(
    model: &Arc<Model<SeparableDouble>>,
    obs: &[f64],
    ticks: usize,
    seed: u64,
) -> f64 {
    let mut engine = QueueEngine::new(model.clone(), &unguided(), seed);
    engine.reset(obs).unwrap();
    let h = model.schedule.horizon();
    let frozen = model
        .normalizer
        .obs
        .normalize(Array2::from_shape_fn((2, obs.len()), |(_, j)| obs[j]).view());
    let mut worst: f64 = 0.0;
    for _ in 0..ticks {
        let tick = engine.tick(&[]).unwrap();
        let slot = tick.executed_slot.expect("queue ticks report their slot");
        // other rows are irrelevant for a separable denoiser; fill them with junk
        let initial = Array2::from_shape_fn((h, 2), |(r, c)| {
            if r == 0 {
                slot.initial[c]
            } else {
                3.0 + r as f64
            }
        });
        let batch = batch_sample_from(
            &model.denoiser,
            &model.schedule,
            initial.view(),
            frozen.view(),
            h,
            &SamplerConfig::default(),
            None,
        )
        .unwrap();
        let expected = model.normalizer.action.denormalize_row(batch.row(0));
        for (a, e) in tick.action.iter().zip(expected.iter()) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}

#[derive(Debug, Default)]
pub struct ProtocolViolations {
    pub ticks: usize,
    pub bad_levels: usize,
    pub bad_counts: usize,
}

/// Runs the queue for `ticks` ticks with a changing observation stream and
/// counts ticks that break the level vector or the per-action denoise count.
pub fn protocol_violations(
    model: &Arc<Model<SeparableDouble>>,
    ticks: usize,
    seed: u64,
) -> ProtocolViolations {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = QueueEngine::new(model.clone(), &unguided(), seed);
    engine.reset(&[0.0, 0.0]).unwrap();
    let steady = model.schedule.monotone_levels().into_inner();
    let h = model.schedule.horizon();
    let tau = model.schedule.tau();
    let expected_history: Vec<usize> = (0..=h).rev().map(|m| m * tau).collect();
    let mut out = ProtocolViolations::default();
    for _ in 0..ticks {
        let tick = engine.tick(&[]).unwrap();
        out.ticks += 1;
        let after = engine.queue().map(|q| q.levels.clone().into_inner());
        if tick.levels_before != steady
            || tick.levels_after != steady
            || after.as_ref() != Some(&steady)
        {
            out.bad_levels += 1;
        }
        let slot = tick.executed_slot.expect("queue ticks report their slot");
        if slot.denoise_count() != h || slot.level_history != expected_history {
            out.bad_counts += 1;
        }
        engine.observe(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
    }
    out
}
