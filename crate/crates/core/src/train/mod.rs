//! Loss, optimizer, metrics and the training loop.

mod adam;
mod loss;
mod metrics;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use loss::{bce_loss, BCE_EPSILON};
pub use metrics::{
    confusion, parse_roc_csv, percent, roc_auc, scalar_metrics, scored_pixels, trapezoid,
    ConfusionCounts, Roc, RocPoint, ScalarMetrics,
};
pub use trainer::{
    eval_threads, evaluate, loss_and_grads, predict_sample, prepare, train, train_step, train_with,
    EpochLog, EvalReport, ImageEval, Prepared, TrainConfig, EPOCH_CSV_HEADER, METRICS_HEADER,
    THREADS_ENV,
};
