//! SMID rating preprocessing.
//!
//! Valence bands pick a candidate class (< 2.5 vice, > 3.5 virtue, otherwise
//! neither); relevance confirms it (> 2.84 for vice/virtue, < 2.15 for
//! neither). Anything else is excluded for that foundation. An image survives
//! when at least one foundation is not excluded, and its excluded foundations
//! are labeled Neither.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Provenance, SampleRecord, Source};
use crate::error::{Error, Result};
use crate::labels::{Foundation, MoralLabelVector, Polarity};

pub const VICE_VALENCE_BELOW: f64 = 2.5;
pub const VIRTUE_VALENCE_ABOVE: f64 = 3.5;
pub const LOW_RELEVANCE_BELOW: f64 = 2.15;
pub const HIGH_RELEVANCE_ABOVE: f64 = 2.84;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoundationOutcome {
    Vice,
    Virtue,
    Neither,
    Excluded,
}

impl FoundationOutcome {
    pub fn polarity(self) -> Option<Polarity> {
        match self {
            FoundationOutcome::Vice => Some(Polarity::Vice),
            FoundationOutcome::Virtue => Some(Polarity::Virtue),
            FoundationOutcome::Neither => Some(Polarity::Neither),
            FoundationOutcome::Excluded => None,
        }
    }
}

pub fn classify_foundation(valence: f64, relevance: f64) -> Result<FoundationOutcome> {
    if !valence.is_finite() || !relevance.is_finite() {
        return Err(Error::NonFinite(format!(
            "rating (valence {valence}, relevance {relevance})"
        )));
    }
    let outcome = if valence < VICE_VALENCE_BELOW {
        if relevance > HIGH_RELEVANCE_ABOVE {
            FoundationOutcome::Vice
        } else {
            FoundationOutcome::Excluded
        }
    } else if valence > VIRTUE_VALENCE_ABOVE {
        if relevance > HIGH_RELEVANCE_ABOVE {
            FoundationOutcome::Virtue
        } else {
            FoundationOutcome::Excluded
        }
    } else if relevance < LOW_RELEVANCE_BELOW {
        FoundationOutcome::Neither
    } else {
        FoundationOutcome::Excluded
    };
    Ok(outcome)
}

/// Mean moral valence (`x`) and relevance (`y`) ratings for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SmidRatingRow {
    pub image_id: String,
    /// `(valence, relevance)` per foundation, canonical order.
    pub ratings: [(f64, f64); 5],
}

#[derive(Deserialize)]
struct RawSmidRow {
    image_id: String,
    care_x: f64,
    care_y: f64,
    fairness_x: f64,
    fairness_y: f64,
    ingroup_x: f64,
    ingroup_y: f64,
    authority_x: f64,
    authority_y: f64,
    purity_x: f64,
    purity_y: f64,
}

impl From<RawSmidRow> for SmidRatingRow {
    fn from(r: RawSmidRow) -> Self {
        SmidRatingRow {
            image_id: r.image_id,
            ratings: [
                (r.care_x, r.care_y),
                (r.fairness_x, r.fairness_y),
                (r.ingroup_x, r.ingroup_y),
                (r.authority_x, r.authority_y),
                (r.purity_x, r.purity_y),
            ],
        }
    }
}

pub fn parse_smid_ratings<R: Read>(reader: R) -> Result<Vec<SmidRatingRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for raw in rdr.deserialize::<RawSmidRow>() {
        rows.push(raw?.into());
    }
    Ok(rows)
}

pub fn read_smid_ratings(path: impl AsRef<Path>) -> Result<Vec<SmidRatingRow>> {
    parse_smid_ratings(std::fs::File::open(path)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub total: usize,
    pub retained: usize,
    pub dropped: Vec<String>,
    /// Excluded-foundation counts over all input images, canonical order.
    pub excluded_per_foundation: [usize; 5],
}

#[derive(Clone, Debug)]
pub struct SmidOutcome {
    pub records: Vec<SampleRecord>,
    pub report: ExclusionReport,
}

/// Labels each image and keeps those not excluded on all five foundations.
///
/// `captions` must provide at least one caption for every retained image.
pub fn preprocess_smid(
    rows: &[SmidRatingRow],
    captions: &HashMap<String, Vec<String>>,
) -> Result<SmidOutcome> {
    let mut seen = HashSet::with_capacity(rows.len());
    let mut report = ExclusionReport {
        total: rows.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for row in rows {
        if !seen.insert(row.image_id.as_str()) {
            return Err(Error::validation(
                "image_id",
                format!("duplicate image id {:?}", row.image_id),
            ));
        }
        let mut label = MoralLabelVector::NEUTRAL;
        let mut excluded = 0;
        for (f, &(x, y)) in Foundation::ALL.into_iter().zip(&row.ratings) {
            match classify_foundation(x, y)?.polarity() {
                Some(p) => label.set(f, p),
                None => {
                    excluded += 1;
                    report.excluded_per_foundation[f.index()] += 1;
                }
            }
        }
        if excluded == Foundation::ALL.len() {
            report.dropped.push(row.image_id.clone());
            continue;
        }
        let caps = captions
            .get(&row.image_id)
            .filter(|c| !c.is_empty())
            .ok_or_else(|| {
                Error::validation(
                    "captions",
                    format!("no captions for image {:?}", row.image_id),
                )
            })?;
        records.push(SampleRecord {
            id: row.image_id.clone(),
            source: Source::Smid,
            image_feature_id: row.image_id.clone(),
            captions: caps.clone(),
            label,
            split: None,
            provenance: Provenance::Expert,
        });
    }
    report.retained = records.len();
    Ok(SmidOutcome { records, report })
}
