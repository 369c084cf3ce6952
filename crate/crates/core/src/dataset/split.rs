use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{SampleRecord, Source, Split};
use crate::error::{Error, Result};
use crate::labels::{collapse_polarity, PolarityClass};
use crate::rng::{stream_rng, streams};

pub const DEFAULT_VAL_FRACTION: f64 = 0.05;
pub const DEFAULT_TEST_FRACTION: f64 = 0.05;

pub type StratumKey = (Source, PolarityClass);

pub fn stratum_of(record: &SampleRecord) -> StratumKey {
    (record.source, collapse_polarity(&record.label))
}

/// Assigns train/val/test per (source, polarity class) stratum.
///
/// Each stratum of size `n` gets `round(n * val_fraction)` validation and
/// `round(n * test_fraction)` test records; record order is preserved.
pub fn stratified_split(
    mut records: Vec<SampleRecord>,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty record list"));
    }
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(val_fraction) || !in_unit(test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(Error::invalid(format!(
            "split fractions must lie in (0, 1) and sum below 1 (got {val_fraction}, {test_fraction})"
        )));
    }
    let mut strata: BTreeMap<StratumKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(stratum_of(r)).or_default().push(i);
    }
    let mut rng = stream_rng(seed, streams::SPLIT);
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let n = members.len();
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n);
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_val);
        for (k, &i) in members.iter().enumerate() {
            records[i].split = Some(if k < n_val {
                Split::Val
            } else if k < n_val + n_test {
                Split::Test
            } else {
                Split::Train
            });
        }
    }
    Ok(records)
}
