//! Trunk baselines and branch training regimes.

mod config;
mod run;
mod sgd;

pub use config::{
    candidate_set, lr_at, sample_resolution, Regime, ResolutionSampler, ResolutionScheme, Schedule, TrainConfig, INTERVAL_MIN,
    WEIGHTED_SET,
};
pub use run::{train_branch, train_mm, train_trunk, BranchOutcome, LogRow, TrainLog, TrunkOutcome, LOG_HEADER};
pub use sgd::Sgd;
