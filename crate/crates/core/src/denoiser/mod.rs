//! The sample predictor `x_θ(A^k, k, O)` and the interface the sampler,
//! guidance and engines consume.

mod doubles;
mod mlp;
mod train;

pub use doubles::{IdentityDouble, LinearDouble, ObsEchoDouble, SeparableDouble};
pub use mlp::{MlpConfig, MlpDenoiser, MlpTape, Preconditioner};
pub use train::{
    evaluate_loss, loss_and_grad, mse, train, Adam, TrainConfig, TrainState, TrainingBatch,
};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the windows a denoiser consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    /// Prediction horizon `H` (rows of an action window).
    pub horizon: usize,
    pub action_dim: usize,
    /// Number of stacked observations `N`.
    pub obs_len: usize,
    pub obs_dim: usize,
}

impl WindowShape {
    pub fn check(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<()> {
        if noisy.dim() != (self.horizon, self.action_dim) {
            return Err(Error::Shape(format!(
                "action window {:?}, expected ({}, {})",
                noisy.dim(),
                self.horizon,
                self.action_dim
            )));
        }
        if levels.len() != self.horizon {
            return Err(Error::Shape(format!(
                "{} levels for horizon {}",
                levels.len(),
                self.horizon
            )));
        }
        if obs.dim() != (self.obs_len, self.obs_dim) {
            return Err(Error::Shape(format!(
                "observation window {:?}, expected ({}, {})",
                obs.dim(),
                self.obs_len,
                self.obs_dim
            )));
        }
        Ok(())
    }

    pub fn check_upstream(&self, upstream: ArrayView2<f64>) -> Result<()> {
        if upstream.dim() != (self.horizon, self.action_dim) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?}, expected ({}, {})",
                upstream.dim(),
                self.horizon,
                self.action_dim
            )));
        }
        Ok(())
    }
}

/// A network mapping a noisy action window, its per-row levels and an
/// observation window to a predicted clean window of the same shape.
///
/// `forward_taped` keeps whatever the backward pass needs, so the guidance
/// gradient reuses the tick's forward pass instead of recomputing it.
pub trait Denoiser: Send + Sync {
    type Tape: Send;

    fn shape(&self) -> WindowShape;

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Tape)>;

    /// Vector-Jacobian product `upstreamᵀ · ∂Â⁰/∂A^k` for the taped inputs.
    fn vjp(&self, tape: &Self::Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn forward(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_taped(noisy, levels, obs)?.0)
    }

    fn input_grad(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let (_, tape) = self.forward_taped(noisy, levels, obs)?;
        self.vjp(&tape, upstream)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    type Tape = D::Tape;

    fn shape(&self) -> WindowShape {
        (**self).shape()
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Tape)> {
        (**self).forward_taped(noisy, levels, obs)
    }

    fn vjp(&self, tape: &Self::Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).vjp(tape, upstream)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    type Tape = D::Tape;

    fn shape(&self) -> WindowShape {
        (**self).shape()
    }

    fn forward_taped(
        &self,
        noisy: ArrayView2<f64>,
        levels: &[usize],
        obs: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Self::Tape)> {
        (**self).forward_taped(noisy, levels, obs)
    }

    fn vjp(&self, tape: &Self::Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).vjp(tape, upstream)
    }
}
