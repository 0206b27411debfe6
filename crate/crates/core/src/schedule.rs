//! Diffusion step bookkeeping: the β / ᾱ tables, the monotone level vector
//! used by the action queue, and the mixed per-position level sampler used
//! during training.

use std::ops::Deref;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters from which a [`NoiseSchedule`] is rebuilt. This is what gets
/// persisted in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Total number of diffusion steps `K`.
    pub steps: usize,
    /// Prediction horizon `H`; must divide `steps`.
    pub horizon: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// The 1e-4 → 0.02 ramp is tuned for 1000 steps; it is rescaled by
    /// `1000 / steps` so that ᾱ at the last step stays close to zero for
    /// short chains.
    pub fn rescaled_linear(steps: usize, horizon: usize) -> Self {
        let scale = 1000.0 / steps as f64;
        Self {
            steps,
            horizon,
            beta_start: 1e-4 * scale,
            beta_end: 0.02 * scale,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::rescaled_linear(96, 16)
    }
}

/// Per-position diffusion levels, one entry per queue slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelVector(Vec<usize>);

impl LevelVector {
    pub fn new(levels: Vec<usize>) -> Self {
        Self(levels)
    }

    pub fn uniform(level: usize, len: usize) -> Self {
        Self(vec![level; len])
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Every entry lowered by `gap`, saturating at the clean level 0.
    pub fn lowered(&self, gap: usize) -> Self {
        Self(self.0.iter().map(|&k| k.saturating_sub(gap)).collect())
    }
}

impl Deref for LevelVector {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for LevelVector {
    fn from(levels: Vec<usize>) -> Self {
        Self(levels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    tau: usize,
    betas: Vec<f64>,
    /// `alpha_bar[0] = 1`, `alpha_bar[k] = ∏_{i ≤ k} (1 - β_i)`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn build(steps: usize, horizon: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_config(&ScheduleConfig {
            steps,
            horizon,
            beta_start,
            beta_end,
        })
    }

    pub fn from_config(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            horizon,
            beta_start,
            beta_end,
        } = *config;
        if steps == 0 || horizon == 0 {
            return Err(Error::Schedule(format!(
                "steps ({steps}) and horizon ({horizon}) must be positive"
            )));
        }
        if steps % horizon != 0 {
            return Err(Error::Schedule(format!(
                "steps ({steps}) is not divisible by horizon ({horizon})"
            )));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_start) || !in_unit(beta_end) || beta_start > beta_end {
            return Err(Error::Schedule(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got {beta_start} .. {beta_end}"
            )));
        }

        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for beta in &betas {
            let prev = *alpha_bar.last().expect("seeded with 1.0");
            alpha_bar.push(prev * (1.0 - beta));
        }

        Ok(Self {
            config: config.clone(),
            tau: steps / horizon,
            betas,
            alpha_bar,
        })
    }

    /// The desk-scale default: `K = 96`, `H = 16`, rescaled linear ramp.
    pub fn default_desk() -> Self {
        Self::from_config(&ScheduleConfig::default()).expect("default schedule is valid")
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    /// Gap between adjacent queue levels, `K / H`.
    pub fn tau(&self) -> usize {
        self.tau
    }

    /// β for step `k` in `1..=K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bar[level]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `[τ, 2τ, …, Hτ]`.
    pub fn monotone_levels(&self) -> LevelVector {
        LevelVector((1..=self.horizon()).map(|h| h * self.tau).collect())
    }

    /// With probability `mix_ratio` the levels are drawn independently and
    /// uniformly from `1..=K`; otherwise the monotone inference vector is
    /// returned.
    pub fn sample_training_levels<R: Rng + ?Sized>(
        &self,
        mix_ratio: f64,
        rng: &mut R,
    ) -> LevelVector {
        if rng.random::<f64>() < mix_ratio {
            LevelVector(
                (0..self.horizon())
                    .map(|_| rng.random_range(1..=self.steps()))
                    .collect(),
            )
        } else {
            self.monotone_levels()
        }
    }

    /// Forward-diffuses each row of `clean` to its own level with the given
    /// standard-normal `noise`.
    pub fn perturb_with_noise(
        &self,
        clean: ArrayView2<f64>,
        levels: &[usize],
        noise: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        if clean.nrows() != levels.len() || clean.dim() != noise.dim() {
            return Err(Error::Shape(format!(
                "perturb: window {:?}, noise {:?}, {} levels",
                clean.dim(),
                noise.dim(),
                levels.len()
            )));
        }
        let mut out = clean.to_owned();
        for (h, mut row) in out.rows_mut().into_iter().enumerate() {
            let k = levels[h];
            if k > self.steps() {
                return Err(Error::Shape(format!(
                    "level {k} exceeds K = {}",
                    self.steps()
                )));
            }
            if k == 0 {
                continue;
            }
            let ab = self.alpha_bar[k];
            let (signal, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (a, e) in row.iter_mut().zip(noise.row(h)) {
                *a = signal * *a + sigma * e;
            }
        }
        Ok(out)
    }

    /// Draws fresh noise and forward-diffuses `clean`. Returns the noisy
    /// window and the noise that was actually applied (zero on rows at
    /// level 0).
    pub fn perturb<R: Rng + ?Sized>(
        &self,
        clean: ArrayView2<f64>,
        levels: &[usize],
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut noise = standard_normal(clean.dim(), rng);
        for (h, mut row) in noise.rows_mut().into_iter().enumerate() {
            if levels.get(h) == Some(&0) {
                row.fill(0.0);
            }
        }
        let noisy = self.perturb_with_noise(clean, levels, noise.view())?;
        Ok((noisy, noise))
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(dim: (usize, usize), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}
