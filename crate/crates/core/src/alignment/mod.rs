//! Contrastive image/text alignment with an additional moral-similarity term.

mod encoder;
mod gradcheck;
mod loss;
mod optim;
mod sweep;
mod train;

pub use encoder::{encode, EncoderGrads, ForwardCache, ProjectionEncoder};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with, flatten_pair_loss, GradCheckReport,
    DEFAULT_COORDINATES,
};
pub use loss::{
    clip_contrastive_loss, moral_loss, total_loss, LossReport, MoralScale, PairGradients,
};
pub use optim::{AdamW, LrSchedule};
pub use sweep::{lambda_sweep, parse_lambdas, SweepResult, SweepRow};
pub use train::{
    image_map, record_embeddings, selection_subset, train, EncoderPair, EpochRecord, TrainConfig,
    TrainHistory, TrainOutcome, ALIGNMENT_MODEL,
};
