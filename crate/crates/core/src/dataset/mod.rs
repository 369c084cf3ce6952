//! Record manifests, SMID preprocessing, stratified splits and training variants.

mod records;
mod smid;
mod split;
mod variants;

pub use records::{
    read_manifest, validate_records, write_manifest, Provenance, SampleRecord, Source, Split,
};
pub use smid::{
    classify_foundation, parse_smid_ratings, preprocess_smid, read_smid_ratings, ExclusionReport,
    FoundationOutcome, SmidOutcome, SmidRatingRow, HIGH_RELEVANCE_ABOVE, LOW_RELEVANCE_BELOW,
    VICE_VALENCE_BELOW, VIRTUE_VALENCE_ABOVE,
};
pub use split::{
    stratified_split, stratum_of, StratumKey, DEFAULT_TEST_FRACTION, DEFAULT_VAL_FRACTION,
};
pub use variants::{
    apply_variant, augment_replicate, mft_swap, DatasetVariant, SwapConfig, SwapEvent, SwapKind,
    SwapMode, SwapOutcome, DEFAULT_AUGMENT_COPIES, DEFAULT_MILD_CAP, DEFAULT_MIX_FRACTION,
};
