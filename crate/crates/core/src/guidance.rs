//! Training-free guidance: an energy on the predicted clean window, its
//! gradient pulled back through the denoiser, and the normalised update
//! applied to the next latent.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::denoiser::Denoiser;
use crate::error::Result;

/// Below this squared norm the guidance gradient is treated as zero. The
/// Polyak step moves the window by `η / ‖g‖`, which is largest where the
/// barrier has barely started to rise; skipping those corrections caps a
/// single move at `η / 30` (0.2 normalised units at `η = 6`).
pub const MIN_GRAD_NORM_SQ: f64 = 900.0;

fn default_min_grad_norm_sq() -> f64 {
    MIN_GRAD_NORM_SQ
}

/// A differentiable cost on a window of world-frame target positions.
pub trait Energy: Send + Sync + std::fmt::Debug {
    /// Energy value and its gradient with respect to `actions`.
    fn value_and_grad(
        &self,
        actions: ArrayView2<f64>,
        obstacles: &[Vec<f64>],
    ) -> (f64, Array2<f64>);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `‖a − c‖² − r`, as in the published barrier.
    #[default]
    SquaredMinusRadius,
    /// `‖a − c‖ − r`.
    DistanceMinusRadius,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `f = Σ_t Σ_obs ω · sigmoid(−λ (m(a_t, c) − r))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepulsiveEnergy {
    pub lambda: f64,
    pub omega: f64,
    pub radius: f64,
    #[serde(default)]
    pub metric: DistanceMetric,
}

impl Default for RepulsiveEnergy {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            omega: 100.0,
            radius: 0.6,
            metric: DistanceMetric::SquaredMinusRadius,
        }
    }
}

impl RepulsiveEnergy {
    /// Barrier value for a single action/obstacle pair at squared distance
    /// `dist_sq`.
    pub fn pair_value(&self, dist_sq: f64) -> f64 {
        let m = match self.metric {
            DistanceMetric::SquaredMinusRadius => dist_sq,
            DistanceMetric::DistanceMinusRadius => dist_sq.sqrt(),
        };
        self.omega * sigmoid(-(m - self.radius) * self.lambda)
    }
}

impl Energy for RepulsiveEnergy {
    fn value_and_grad(
        &self,
        actions: ArrayView2<f64>,
        obstacles: &[Vec<f64>],
    ) -> (f64, Array2<f64>) {
        let mut grad = Array2::zeros(actions.dim());
        let mut value = 0.0;
        for (t, a) in actions.rows().into_iter().enumerate() {
            for c in obstacles {
                let diff: Vec<f64> = a.iter().zip(c).map(|(x, y)| x - y).collect();
                let dist_sq: f64 = diff.iter().map(|d| d * d).sum();
                let (m, dm_scale) = match self.metric {
                    DistanceMetric::SquaredMinusRadius => (dist_sq, 2.0),
                    DistanceMetric::DistanceMinusRadius => {
                        let d = dist_sq.sqrt();
                        (d, if d > 0.0 { 1.0 / d } else { 0.0 })
                    }
                };
                let s = sigmoid(-(m - self.radius) * self.lambda);
                value += self.omega * s;
                // d/dm of ω·σ(−λ(m − r)) = −ωλσ(1 − σ)
                let df_dm = -self.omega * self.lambda * s * (1.0 - s);
                for (g, d) in grad.row_mut(t).iter_mut().zip(&diff) {
                    *g += df_dm * dm_scale * d;
                }
            }
        }
        (value, grad)
    }
}

/// Serializable guidance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Step size; 0 disables guidance.
    pub eta: f64,
    /// Corrections with a smaller squared gradient norm are skipped.
    #[serde(default = "default_min_grad_norm_sq")]
    pub min_grad_norm_sq: f64,
    #[serde(flatten)]
    pub energy: RepulsiveEnergy,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            eta: 6.0,
            min_grad_norm_sq: MIN_GRAD_NORM_SQ,
            energy: RepulsiveEnergy::default(),
        }
    }
}

impl GuidanceConfig {
    pub fn unguided() -> Self {
        Self {
            eta: 0.0,
            ..Self::default()
        }
    }

    pub fn build(&self) -> Guidance {
        Guidance {
            eta: self.eta,
            min_grad_norm_sq: self.min_grad_norm_sq,
            energy: Arc::new(self.energy.clone()),
        }
    }
}

/// Energy plus step size, as consumed by the samplers and engines.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub eta: f64,
    pub min_grad_norm_sq: f64,
    pub energy: Arc<dyn Energy>,
}

impl Guidance {
    pub fn is_enabled(&self) -> bool {
        self.eta > 0.0
    }
}

/// Energy of a normalised clean window after mapping it to world
/// coordinates, with the gradient taken in normalised coordinates.
pub fn energy_in_world(
    energy: &dyn Energy,
    clean: ArrayView2<f64>,
    obstacles: &[Vec<f64>],
    normalizer: &Normalizer,
) -> (f64, Array2<f64>) {
    let world = normalizer.action.denormalize(clean);
    let (value, mut grad) = energy.value_and_grad(world.view(), obstacles);
    for mut row in grad.rows_mut() {
        for (j, g) in row.iter_mut().enumerate() {
            *g *= normalizer.action.scale(j);
        }
    }
    (value, grad)
}

/// `g = ∇_{A^k} f(x_θ(A^k))`, reusing the forward tape of this tick.
pub fn guidance_gradient<D: Denoiser>(
    denoiser: &D,
    tape: &D::Tape,
    clean: ArrayView2<f64>,
    energy: &dyn Energy,
    obstacles: &[Vec<f64>],
    normalizer: &Normalizer,
) -> Result<(f64, Array2<f64>)> {
    if obstacles.is_empty() {
        return Ok((0.0, Array2::zeros(clean.dim())));
    }
    let (value, upstream) = energy_in_world(energy, clean, obstacles, normalizer);
    Ok((value, denoiser.vjp(tape, upstream.view())?))
}

/// `A − η · g / ‖g‖²`; unchanged when `η = 0` or `‖g‖² < min_norm_sq`.
pub fn apply_guidance(
    window: ArrayView2<f64>,
    g: ArrayView2<f64>,
    eta: f64,
    min_norm_sq: f64,
) -> Array2<f64> {
    let norm_sq: f64 = g.iter().map(|x| x * x).sum();
    if eta == 0.0 || norm_sq.is_nan() || norm_sq < min_norm_sq || norm_sq == 0.0 {
        return window.to_owned();
    }
    let scale = eta / norm_sq;
    &window - &(&g * scale)
}
