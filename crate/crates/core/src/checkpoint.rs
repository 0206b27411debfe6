//! Trained model container: architecture, weights, normaliser, schedule and
//! the training configuration (with its hash and optimiser state so runs can
//! resume).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{check_eq, hex_digest, Dataset, Normalizer};
use crate::denoiser::{MlpConfig, MlpDenoiser, TrainConfig, TrainState, WindowShape};
use crate::env::WorldConfig;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &str = "qplan-checkpoint";

/// A denoiser together with what it needs to act in world coordinates.
#[derive(Clone, Debug)]
pub struct Model<D> {
    pub denoiser: D,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: WindowShape,
    pub arch: MlpConfig,
    pub schedule: ScheduleConfig,
    pub norm_stats: Normalizer,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    /// Content hash of the training data payload.
    pub dataset_hash: String,
    pub params: Vec<f64>,
    pub state: TrainState,
}

/// Hash of everything that determines a training run.
pub fn config_hash(
    shape: &WindowShape,
    arch: &MlpConfig,
    schedule: &ScheduleConfig,
    train: &TrainConfig,
    dataset_hash: &str,
) -> String {
    let value = serde_json::json!({
        "shape": shape,
        "arch": arch,
        "schedule": schedule,
        "train": train,
        "dataset": dataset_hash,
    });
    hex_digest(value.to_string().as_bytes())
}

impl Checkpoint {
    pub fn new(
        net: &MlpDenoiser,
        normalizer: &Normalizer,
        world: &WorldConfig,
        train: &TrainConfig,
        dataset_hash: &str,
        state: &TrainState,
    ) -> Self {
        use crate::denoiser::Denoiser;
        let shape = net.shape();
        let schedule = net.schedule().config().clone();
        Self {
            format: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&shape, net.config(), &schedule, train, dataset_hash),
            shape,
            arch: net.config().clone(),
            schedule,
            norm_stats: normalizer.clone(),
            world: world.clone(),
            train: train.clone(),
            dataset_hash: dataset_hash.into(),
            params: net.params().to_vec(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            what: "checkpoint",
            detail: format!("{}: {e}", path.display()),
        })?;
        if ck.format != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt {
                what: "checkpoint",
                detail: format!("format '{}' is not a checkpoint", ck.format),
            });
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                expected: CHECKPOINT_VERSION,
                found: ck.version,
            });
        }
        Ok(ck)
    }

    /// Refuses checkpoints built for other window or schedule geometry.
    pub fn check_compatible(&self, shape: &WindowShape, steps: usize) -> Result<()> {
        check_eq("horizon H", shape.horizon, self.shape.horizon)?;
        check_eq("observation length N", shape.obs_len, self.shape.obs_len)?;
        check_eq("action dim d_a", shape.action_dim, self.shape.action_dim)?;
        check_eq("observation dim d_o", shape.obs_dim, self.shape.obs_dim)?;
        check_eq("diffusion steps K", steps, self.schedule.steps)
    }

    pub fn model(&self) -> Result<Model<MlpDenoiser>> {
        let schedule = NoiseSchedule::from_config(&self.schedule)?;
        check_eq(
            "action dim d_a",
            self.shape.action_dim,
            self.norm_stats.action.dim(),
        )?;
        check_eq(
            "observation dim d_o",
            self.shape.obs_dim,
            self.norm_stats.obs.dim(),
        )?;
        let denoiser = MlpDenoiser::from_params(
            self.shape,
            self.arch.clone(),
            schedule.clone(),
            self.params.clone(),
        )?;
        Ok(Model {
            denoiser,
            schedule,
            normalizer: self.norm_stats.clone(),
        })
    }
}

/// SHA-256 of a file's bytes.
pub fn content_hash(path: &Path) -> Result<String> {
    Ok(hex_digest(&std::fs::read(path)?))
}

/// Trains a fresh network on `dataset`, or continues `resume` when given
/// (its architecture, schedule and optimiser state are reused). `on_epoch`
/// returning false stops early with a resumable checkpoint.
pub fn train_checkpoint(
    dataset: &Dataset,
    arch: &MlpConfig,
    schedule: &ScheduleConfig,
    train: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: impl FnMut(usize, f64) -> bool,
) -> Result<Checkpoint> {
    let shape = WindowShape {
        horizon: dataset.windows.horizon,
        action_dim: dataset.action_dim(),
        obs_len: dataset.windows.obs_len,
        obs_dim: dataset.obs_dim(),
    };
    let dataset_hash = dataset.content_hash();
    let (mut net, mut state) = match resume {
        Some(ck) => {
            ck.check_compatible(&shape, schedule.steps)?;
            if ck.dataset_hash != dataset_hash {
                return Err(Error::Mismatch {
                    what: "training data",
                    expected: ck.dataset_hash.clone(),
                    found: dataset_hash,
                });
            }
            let model = ck.model()?;
            (model.denoiser, ck.state)
        }
        None => {
            let sched = NoiseSchedule::from_config(schedule)?;
            let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
            let net = MlpDenoiser::new(shape, arch.clone(), sched, &mut rng)?;
            let state = TrainState::new(&net);
            (net, state)
        }
    };
    let table = dataset.window_table()?;
    crate::denoiser::train(&mut net, &table, train, &mut state, on_epoch)?;
    Ok(Checkpoint::new(
        &net,
        &dataset.normalizer,
        &dataset.meta.world,
        train,
        &dataset_hash,
        &state,
    ))
}
