//! Five-head per-foundation polarity classifier used to weak-label images.

mod metrics;
mod model;
mod train;

pub use metrics::{compass_metrics, head_metrics, CompassMetrics, HeadMetrics};
pub use model::{
    argmax_label, compass_loss, predict_labels, softmax_heads, CompassGrads, CompassModel, Head,
    HeadProbabilities, N_CLASSES, N_HEADS,
};
pub use train::{
    evaluate_compass, label_records, train_compass, CompassConfig, CompassEpoch, CompassHistory,
    CompassOutcome, EarlyStopping, PlateauScheduler, COMPASS_MODEL,
};
