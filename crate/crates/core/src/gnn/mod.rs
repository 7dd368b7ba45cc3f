//! Graph convolutional calibrator: parameters, message passing with exact
//! gradients, and Adam training over batches of consistency graphs.

mod model;
mod propagate;
mod train;

pub use model::{GcnModel, DEFAULT_HIDDEN_DIMS};
pub use propagate::{
    backward, backward_from_trace, forward, forward_batch, loss, loss_from_logits, sigmoid,
    ForwardTrace, GraphBatch, NormalizedAdjacency,
};
pub use train::{
    calibrate, mean_loss, split_indices, train, train_with_validation, Adam, CalibrationScores,
    EpochLog, LabeledGraph, PlateauSchedule, QuestionScores, TrainConfig, TrainingLog,
};
