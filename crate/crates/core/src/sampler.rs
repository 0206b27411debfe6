//! Deterministic DDIM with per-row noise levels, full-window sampling and
//! the warm start that seeds the rolling action queue.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{apply_guidance, guidance_gradient, Guidance};
use crate::schedule::{standard_normal, LevelVector, NoiseSchedule};

/// One DDIM update per row from `from[h]` to `to[h]`:
/// `ε̂ = (a − √ᾱ·â⁰)/√(1−ᾱ)`, `a' = √ᾱ'·â⁰ + √(1−ᾱ')·ε̂`.
/// Rows at level 0 or with `to == from` pass through; `to == 0` yields `â⁰`.
pub fn ddim_step(
    noisy: ArrayView2<f64>,
    clean: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if noisy.dim() != clean.dim() || from.len() != noisy.nrows() || to.len() != noisy.nrows() {
        return Err(Error::Shape(format!(
            "ddim step: latent {:?}, prediction {:?}, {} / {} levels",
            noisy.dim(),
            clean.dim(),
            from.len(),
            to.len()
        )));
    }
    let mut out = noisy.to_owned();
    for (h, mut row) in out.rows_mut().into_iter().enumerate() {
        let (k, k2) = (from[h], to[h]);
        if k2 > k || k > schedule.steps() {
            return Err(Error::Schedule(format!(
                "row {h}: cannot step from level {k} to {k2}"
            )));
        }
        if k == 0 || k2 == k {
            continue;
        }
        if k2 == 0 {
            row.assign(&clean.row(h));
            continue;
        }
        let (ab, ab2) = (schedule.alpha_bar(k), schedule.alpha_bar(k2));
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa2, sn2) = (ab2.sqrt(), (1.0 - ab2).sqrt());
        for (a, &c) in row.iter_mut().zip(clean.row(h)) {
            let eps = (*a - sa * c) / sn;
            *a = sa2 * c + sn2 * eps;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Clamp predicted clean windows to the normalised action box before
    /// each DDIM update.
    pub clip_sample: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { clip_sample: true }
    }
}

/// Obstacles and normaliser a guided step needs besides the energy.
pub struct GuideContext<'a> {
    pub guidance: &'a Guidance,
    pub obstacles: &'a [Vec<f64>],
    pub normalizer: &'a Normalizer,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub next: Array2<f64>,
    /// Network prediction before clipping.
    pub clean: Array2<f64>,
    pub energy: f64,
    pub grad_norm: f64,
    /// Guidance changed the latent.
    pub guided: bool,
    /// Gradient was not finite and was dropped.
    pub skipped: bool,
}

/// Predict, DDIM-step from `from` to `to`, then apply the guidance
/// correction computed from the same forward pass.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    noisy: ArrayView2<f64>,
    from: &[usize],
    to: &[usize],
    obs: ArrayView2<f64>,
    config: &SamplerConfig,
    guide: Option<&GuideContext>,
) -> Result<StepOutput> {
    let (clean, tape) = denoiser.forward_taped(noisy, from, obs)?;
    let target = if config.clip_sample {
        clean.mapv(|v| v.clamp(-1.0, 1.0))
    } else {
        clean.clone()
    };
    let mut next = ddim_step(noisy, target.view(), from, to, schedule)?;
    let mut out = StepOutput {
        next: Array2::zeros((0, 0)),
        clean,
        energy: 0.0,
        grad_norm: 0.0,
        guided: false,
        skipped: false,
    };
    if let Some(ctx) = guide.filter(|c| c.guidance.is_enabled() && !c.obstacles.is_empty()) {
        let (energy, g) = guidance_gradient(
            denoiser,
            &tape,
            out.clean.view(),
            ctx.guidance.energy.as_ref(),
            ctx.obstacles,
            ctx.normalizer,
        )?;
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.energy = energy;
        if norm.is_finite() && energy.is_finite() {
            out.grad_norm = norm;
            let guided = apply_guidance(
                next.view(),
                g.view(),
                ctx.guidance.eta,
                ctx.guidance.min_grad_norm_sq,
            );
            out.guided = guided != next;
            next = guided;
        } else {
            log::warn!("non-finite guidance gradient, skipping correction");
            out.skipped = true;
        }
    }
    out.next = next;
    Ok(out)
}

/// Uniform-level DDIM from `initial` (all rows at level K) to level 0 in
/// `steps` steps, with optional guidance at every step.
pub fn batch_sample_from<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    initial: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    steps: usize,
    config: &SamplerConfig,
    guide: Option<&GuideContext>,
) -> Result<Array2<f64>> {
    let k = schedule.steps();
    if steps == 0 || !k.is_multiple_of(steps) {
        return Err(Error::Schedule(format!(
            "{steps} sampling steps do not divide K = {k}"
        )));
    }
    let gap = k / steps;
    let rows = initial.nrows();
    let mut a = initial.to_owned();
    for i in 0..steps {
        let from = vec![k - i * gap; rows];
        let to = vec![k - (i + 1) * gap; rows];
        a = denoise_step(denoiser, schedule, a.view(), &from, &to, obs, config, guide)?.next;
    }
    Ok(a)
}

/// As [`batch_sample_from`], starting from fresh standard normal noise.
pub fn batch_sample<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    obs: ArrayView2<f64>,
    steps: usize,
    config: &SamplerConfig,
    guide: Option<&GuideContext>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let shape = denoiser.shape();
    let initial = standard_normal((shape.horizon, shape.action_dim), rng);
    batch_sample_from(
        denoiser,
        schedule,
        initial.view(),
        obs,
        steps,
        config,
        guide,
    )
}

/// Bookkeeping for one queue slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotInfo {
    /// Tick at which the slot was enqueued (0 for warm-started slots).
    pub birth_tick: usize,
    /// Levels the slot has been at, starting with its initial level.
    pub level_history: Vec<usize>,
    /// Latent the slot started from at level K.
    pub initial: Vec<f64>,
}

impl SlotInfo {
    /// Denoiser applications so far.
    pub fn denoise_count(&self) -> usize {
        self.level_history.len() - 1
    }
}

/// `H` latent actions with strictly increasing noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionQueue {
    pub actions: Array2<f64>,
    pub levels: LevelVector,
    pub slots: Vec<SlotInfo>,
}

impl ActionQueue {
    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.nrows() == 0
    }

    pub fn is_steady(&self, schedule: &NoiseSchedule) -> bool {
        self.levels == schedule.monotone_levels()
    }
}

#[derive(Clone, Debug)]
pub struct WarmStart {
    pub queue: ActionQueue,
    /// `intermediates[j]` is the full window at level `(j + 1)·τ`.
    pub intermediates: Vec<Array2<f64>>,
}

/// Runs `H − 1` uniform DDIM steps from `initial` at level `Hτ`, keeps every
/// intermediate window and reads the queue off the diagonal: slot `h` is row
/// `h` of the window at level `(h + 1)·τ`.
pub fn warm_start_from<D: Denoiser>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    initial: ArrayView2<f64>,
    obs: ArrayView2<f64>,
    config: &SamplerConfig,
) -> Result<WarmStart> {
    let (h, tau) = (schedule.horizon(), schedule.tau());
    if initial.nrows() != h {
        return Err(Error::Shape(format!(
            "warm start needs {h} rows, got {}",
            initial.nrows()
        )));
    }
    let mut intermediates = vec![Array2::zeros((0, 0)); h];
    let mut a = initial.to_owned();
    intermediates[h - 1] = a.clone();
    for j in (0..h - 1).rev() {
        let from = vec![(j + 2) * tau; h];
        let to = vec![(j + 1) * tau; h];
        a = denoise_step(denoiser, schedule, a.view(), &from, &to, obs, config, None)?.next;
        intermediates[j] = a.clone();
    }
    let mut actions = Array2::zeros(initial.dim());
    let mut slots = Vec::with_capacity(h);
    for (slot, latent) in intermediates.iter().enumerate() {
        actions.row_mut(slot).assign(&latent.row(slot));
        let level_history = (slot + 1..=h).rev().map(|m| m * tau).collect();
        slots.push(SlotInfo {
            birth_tick: 0,
            level_history,
            initial: initial.row(slot).to_vec(),
        });
    }
    Ok(WarmStart {
        queue: ActionQueue {
            actions,
            levels: schedule.monotone_levels(),
            slots,
        },
        intermediates,
    })
}

pub fn warm_start<D: Denoiser, R: Rng + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    obs: ArrayView2<f64>,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<WarmStart> {
    let shape = denoiser.shape();
    let initial = standard_normal((shape.horizon, shape.action_dim), rng);
    warm_start_from(denoiser, schedule, initial.view(), obs, config)
}

/// Drops slot 0 and appends `fresh` at level `Hτ`.
pub(crate) fn shift_queue(
    queue: &mut ActionQueue,
    fresh: &[f64],
    tick: usize,
    schedule: &NoiseSchedule,
) -> SlotInfo {
    let h = queue.len();
    let mut actions = Array2::zeros(queue.actions.dim());
    actions
        .slice_mut(s![..h - 1, ..])
        .assign(&queue.actions.slice(s![1.., ..]));
    for (dst, &v) in actions.row_mut(h - 1).iter_mut().zip(fresh) {
        *dst = v;
    }
    queue.actions = actions;
    queue.levels = schedule.monotone_levels();
    let done = queue.slots.remove(0);
    queue.slots.push(SlotInfo {
        birth_tick: tick,
        level_history: vec![schedule.steps()],
        initial: fresh.to_vec(),
    });
    done
}
