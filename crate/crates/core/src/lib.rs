//! Moral-foundation aware contrastive alignment over precomputed features.
//!
//! The crate covers the label algebra, feature banks, the alignment objective
//! and its training loop, the per-foundation weak-labeling classifier, the
//! dataset pipeline, retrieval/cluster metrics, annotator agreement, and the
//! storage layer of the annotation workflow.

// `!(x > 0.0)` is the NaN-rejecting form used throughout for parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agreement;
pub mod alignment;
pub mod annotation;
pub mod checkpoint;
pub mod compass;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod labels;
pub mod linalg;
pub mod rng;

mod codec;

pub use alignment::{train, ProjectionEncoder, TrainConfig, TrainHistory};
pub use compass::{CompassConfig, CompassModel};
pub use config::KvConfig;
pub use dataset::{DatasetVariant, SampleRecord};
pub use error::{Error, FormatError, Result};
pub use features::FeatureBank;
pub use labels::{
    active_set, collapse_polarity, moral_similarity, parse_label, shares_label, ActiveSet,
    Foundation, MoralLabelVector, Polarity, PolarityClass,
};
pub use linalg::Matrix;
