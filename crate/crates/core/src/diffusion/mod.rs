//! Forward noising, the adaptive mask-weighted objective, two-stage training
//! and guided DDIM sampling.

mod loss;
mod model;
mod sample;
mod schedule;
mod train;
mod weight;

pub use loss::{training_loss, weighted_mse, LossConfig, LossInput, LossOutput, Stage};
pub use model::{Cond, Model, ModelConfig};
pub use sample::{
    ddim_loop, ddim_sample, ddim_timesteps, from_pixels, initial_noise, non_target_task, to_pixels, NegativeMode,
    SampleConfig, ENHANCED_LAYOUT_SCALE,
};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{
    accumulate_gradients, read_loss_log, step_draws, train, Draw, StepLog, TrainConfig, TrainOptions, TrainSample,
    TrainSummary, FINAL_CHECKPOINT, LOSS_LOG,
};
pub use weight::{adaptive_weight, adaptive_weight_var, entity_attention_maps, AdaptiveWeightMap};
