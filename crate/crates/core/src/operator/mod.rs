//! Deep operator networks: branch/trunk MLPs with a dot-product readout, the
//! training loop, checkpoints, and the two learned maps used in closed loop.

mod checkpoint;
mod deeponet;
mod mlp;
mod surrogate;
mod train;

pub use checkpoint::{
    checkpoint_paths, load_checkpoint, save_checkpoint, CheckpointInfo, CheckpointManifest, CHECKPOINT_VERSION,
};
pub use deeponet::{
    deeponet_forward, loss_and_gradients, state_scale, Affine, Architecture, Batch, DeepOperator, FeedbackData,
    FieldNormalization, Gradients, Head, KernelData, OperatorData, SensorLayout, TargetNorm, TimeEncoding, TrainingSet,
};
pub use mlp::{Activation, Mlp, MlpGrads};
pub use surrogate::{predict_feedback, predict_gain_row, predict_kernel_slice, FeedbackSurrogate, KernelSurrogate};
pub use train::{corpus_mse, moving_average_monotone, train, TrainConfig, TrainReport};
