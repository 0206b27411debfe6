//! Sample-prediction training: `L = E‖A⁰ − x_θ(A^k, k, O)‖²` with a fresh
//! level vector per example.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, MlpDenoiser};
use crate::data::WindowTable;
use crate::error::{Error, Result};
use crate::schedule::standard_normal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of training on independent per-row levels instead of the
    /// monotone inference vector.
    pub mix_ratio: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    pub seed: u64,
    /// Cosine-anneal the learning rate to 10% over `epochs`.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            learning_rate: 1e-3,
            mix_ratio: 0.6,
            clip_norm: 1.0,
            seed: 0,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.clip_norm > 0.0;
        if !positive {
            return Err(Error::Config(format!(
                "epochs, batch size, learning rate and clip norm must be positive: {self:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::Config(format!(
                "mix_ratio {} not in [0, 1]",
                self.mix_ratio
            )));
        }
        Ok(())
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        if !self.cosine_decay || self.epochs <= 1 {
            return self.learning_rate;
        }
        let progress = epoch as f64 / (self.epochs - 1) as f64;
        let floor = 0.1;
        self.learning_rate
            * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Optimiser state and loss history; persisted with checkpoints so training
/// can resume exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: Adam,
    pub loss_history: Vec<f64>,
    pub initial_loss: Option<f64>,
}

impl TrainState {
    pub fn new(net: &MlpDenoiser) -> Self {
        Self {
            epochs_done: 0,
            adam: Adam::new(net.num_params()),
            loss_history: Vec::new(),
            initial_loss: None,
        }
    }
}

/// A minibatch of normalised clean windows stacked row-wise
/// (`B·H × d_a`) with one flattened observation window per example.
pub struct TrainingBatch<'a> {
    pub clean: ArrayView2<'a, f64>,
    pub obs: ArrayView2<'a, f64>,
}

pub fn mse(prediction: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = prediction.len().max(1) as f64;
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

/// Loss and parameter gradient on one minibatch. `batch_index` only feeds
/// the diagnostic when the loss is not finite.
pub fn loss_and_grad<R: Rng + ?Sized>(
    net: &MlpDenoiser,
    batch: &TrainingBatch,
    mix_ratio: f64,
    rng: &mut R,
    batch_index: usize,
) -> Result<(f64, Vec<f64>)> {
    let schedule = net.schedule();
    let horizon = schedule.horizon();
    let examples = batch.obs.nrows();
    if examples == 0 || batch.clean.nrows() != examples * horizon {
        return Err(Error::Shape(format!(
            "training batch: {} clean rows for {examples} examples of horizon {horizon}",
            batch.clean.nrows()
        )));
    }

    let mut levels = Vec::with_capacity(examples * horizon);
    for _ in 0..examples {
        levels.extend_from_slice(&schedule.sample_training_levels(mix_ratio, rng));
    }
    let noise = standard_normal(batch.clean.dim(), rng);
    let noisy = schedule.perturb_with_noise(batch.clean, &levels, noise.view())?;

    let (pred, tape) = net.forward_batch(noisy.view(), &levels, batch.obs)?;
    let diff = &pred - &batch.clean;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: batch_index,
            loss,
        });
    }
    let d_out = diff * (2.0 / n);
    let mut grad = vec![0.0; net.num_params()];
    net.backward(&tape, d_out.view(), Some(&mut grad), false);
    Ok((loss, grad))
}

/// Monte-Carlo estimate of the training loss for any denoiser, one window at
/// a time.
pub fn evaluate_loss<D: Denoiser, R: Rng + ?Sized>(
    net: &D,
    windows: &[(Array2<f64>, Array2<f64>)],
    mix_ratio: f64,
    schedule: &crate::schedule::NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for (clean, obs) in windows {
        let levels = schedule.sample_training_levels(mix_ratio, rng);
        let (noisy, _) = schedule.perturb(clean.view(), &levels, rng)?;
        let pred = net.forward(noisy.view(), &levels, obs.view())?;
        total += mse(pred.view(), clean.view());
    }
    Ok(total / windows.len().max(1) as f64)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1))
}

fn clip_global_norm(grad: &mut [f64], bound: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > bound {
        let scale = bound / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Runs epochs `state.epochs_done .. config.epochs`, or until `on_epoch`
/// returns false. Each epoch draws its randomness from `(seed, epoch)` alone,
/// so stopping after any epoch and resuming from the saved state continues
/// identically.
pub fn train(
    net: &mut MlpDenoiser,
    table: &WindowTable,
    config: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(usize, f64) -> bool,
) -> Result<()> {
    config.validate()?;
    let horizon = net.schedule().horizon();
    if table.horizon() != horizon {
        return Err(Error::Mismatch {
            what: "horizon",
            expected: horizon.to_string(),
            found: table.horizon().to_string(),
        });
    }
    let total = table.len();
    if total == 0 {
        return Err(Error::Config("empty training set".into()));
    }

    let mut order: Vec<usize> = (0..total).collect();
    let mut batch_counter = 0usize;
    for epoch in state.epochs_done..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let lr = config.learning_rate_at(epoch);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let clean = table.gather_actions(chunk);
            let obs = table.obs().select(Axis(0), chunk);
            let batch = TrainingBatch {
                clean: clean.view(),
                obs: obs.view(),
            };
            let (loss, mut grad) =
                loss_and_grad(net, &batch, config.mix_ratio, &mut rng, batch_counter)?;
            batch_counter += 1;
            let initial = *state.initial_loss.get_or_insert(loss);
            if loss > 1e3 * initial {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    initial,
                    seed: config.seed,
                    config: serde_json::to_string(config).unwrap_or_default(),
                });
            }
            clip_global_norm(&mut grad, config.clip_norm);
            state.adam.update(net.params_mut(), &grad, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        state.loss_history.push(mean);
        state.epochs_done = epoch + 1;
        if !on_epoch(epoch, mean) {
            break;
        }
    }
    Ok(())
}
