//! Residual 1-D CNN rhythm classifier and classification metrics.

mod metrics;
mod model;
mod train;

pub use metrics::{argmax, metrics_from_scores, roc_auc_binary, roc_auc_macro, ConfusionMatrix, MetricsReport};
pub use model::{stack_signals, Classifier, ClassifierConfig};
pub use train::{accuracy, evaluate, fine_tune_head, train_classifier, train_on_labels, History};
