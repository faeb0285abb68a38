//! Training loop, evaluation and prediction.

mod early_stop;
mod inference;
mod optimizer;
mod trainer;

pub use early_stop::{simulate as simulate_early_stopping, EarlyStopping, StopDecision};
pub use inference::{argmax, evaluate, predict_batch, softmax_row, Classifier, LabelPick, Prediction, INFER_BATCH};
pub use optimizer::{adam_step, clip_grad_norm, AdamConfig, AdamState, OptimizerKind};
pub use trainer::{
    check_training_provenance, history_csv, prepare, retrain, train, write_history, Dataset, EpochRecord, Prepared,
    TrainConfig, TrainOutcome, HISTORY_HEADER,
};
