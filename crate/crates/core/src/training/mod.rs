//! Adversarial multi-task training: adaptive discriminator weighting, the
//! per-iteration update schedule, the epoch loop and trained-model I/O.

mod config;
mod fit;
mod forecaster;
mod step;
mod suite;
mod weighting;

pub use config::{Ablation, GammaMode, TrainConfig};
pub use fit::{
    epoch_batches, fit, initial_params, prepare, rng_stream, validation_score, AbortRecord,
    EpochRecord, FitOutput, Prepared, StatsRecord, Stream,
};
pub use forecaster::{
    persistence_report, strided, AttentionRecord, CheckpointMeta, Forecaster, CHECKPOINT_KIND,
};
pub use step::{StepRecord, Trainer};
pub use suite::{gradient_suite, GradFixture, GradScale, GradientCheck};
pub use weighting::{adaptive_weights, gamma, gamma_with, total_gen_loss, total_gen_loss_value};
