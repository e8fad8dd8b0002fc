//! Stage-one training: objectives, the SGD loop with its schedule and
//! early stopping, and the self-supervised-only regime.

mod config;
mod losses;
mod runner;

pub use config::{Method, SslTask, TrainConfig, TrainEpisode};
pub use losses::{
    loss_cc, loss_location, loss_pn, loss_rotation, patch_batch, total_step_loss, FewShotBatch,
    StepLoss,
};
pub use runner::{
    initial_model, resolve_architecture, train, train_selfsup_only, train_stage1,
    validation_episodes, EarlyStopState, EpochLog, TrainData, TrainObserver, TrainOutcome,
};
