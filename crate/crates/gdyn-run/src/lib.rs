//! Everything between a dataset and a predicted garment sequence: the model
//! context (garment + driver tables shared by all stages), loss terms, the
//! two training stages, the test-time collision resolver, autoregressive
//! rollout, and the runtime verification suites.

pub mod data;
pub mod dynamic_stage;
pub mod losses;
pub mod model;
pub mod resolver;
pub mod rollout;
pub mod static_stage;
pub mod verify;

pub use data::TrainingSet;
pub use dynamic_stage::{train_dynamic, DynEpochStats, TrainDynConfig};
pub use model::{ModelContext, ModelError};
pub use resolver::{collision_loss, resolve, ResolveReport, ResolverConfig};
pub use rollout::{
    layered_rollout, one_step_error, penetration_fraction, rollout, step, FrameMetrics,
    GarmentState, RolloutConfig, RolloutError, RolloutResult,
};
pub use static_stage::{train_static, EpochStats, TrainError, TrainStaticConfig};
