#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use std::sync::{Arc, OnceLock};

use qplan::checkpoint::{train_checkpoint, Checkpoint, Model};
use qplan::data::{generate_expert, ExpertStyle, WindowSpec};
use qplan::denoiser::{MlpConfig, MlpDenoiser, TrainConfig};
use qplan::scenario::Scenario;
use qplan::schedule::ScheduleConfig;

/// A briefly trained network: enough for plumbing tests, not for behaviour.
pub fn tiny_checkpoint() -> &'static Checkpoint {
    static CK: OnceLock<Checkpoint> = OnceLock::new();
    CK.get_or_init(|| {
        let ds = generate_expert(
            60,
            &Scenario::reach(),
            ExpertStyle::Straight,
            WindowSpec::default(),
            5,
        )
        .unwrap();
        let train = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        train_checkpoint(
            &ds,
            &MlpConfig::default(),
            &ScheduleConfig::default(),
            &train,
            None,
            |_, _| true,
        )
        .unwrap()
    })
}

pub fn tiny_model() -> Arc<Model<MlpDenoiser>> {
    static MODEL: OnceLock<Arc<Model<MlpDenoiser>>> = OnceLock::new();
    MODEL
        .get_or_init(|| Arc::new(tiny_checkpoint().model().unwrap()))
        .clone()
}
