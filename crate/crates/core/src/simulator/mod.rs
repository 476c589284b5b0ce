//! Synthetic evolving-world benchmark: scene generator, toy detector,
//! set-matching loss, training loop and task-by-task experiment driver.

pub mod checkpoint;
pub mod detector;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod scene;
pub mod train;

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, Sidecar, TensorRecord};
pub use detector::{clamp_box, detector_forward, forward_on_tape, DetectorParams, ForwardVars, Mode, ParamLayout, Prediction, LAYERS};
pub use experiment::{predict_scenes, run_experiment, task_data, test_scenes, ExperimentConfig, ExperimentResult, PretrainConfig, TaskArtifacts, PRETRAIN_DOMAIN};
pub use gradcheck::{run_gradcheck, GradCheckConfig, GradCheckReport};
pub use loss::{match_and_loss, match_queries, matched_loss, LossWeights, MatchResult, Target};
pub use scene::{GtObject, Region, Scene, World, WorldConfig};
pub use train::{mean_loss, sample_loss, train_task, OptimConfig, TaskData, TrainSample, TrainSettings, TrainStats};
