//! Human rating workflow: batch plans, an append-only rating log with
//! last-writer-wins reads, task issue and CSV export.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agreement::RatingsTable;
use crate::error::{Error, Result};
use crate::labels::{Foundation, MoralLabelVector, Polarity};
use crate::rng::{stream_rng, streams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub n_batches: usize,
    pub per_batch: usize,
    pub annotators_per_batch: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            n_batches: 4,
            per_batch: 50,
            annotators_per_batch: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub image_ids: Vec<String>,
    pub annotator_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
}

/// Draws `n_batches × per_batch` distinct images in seeded order and assigns
/// fresh annotator ids `ann01`, `ann02`, ... batch by batch.
pub fn plan_batches(image_ids: &[String], cfg: &PlanConfig) -> Result<BatchPlan> {
    if cfg.n_batches == 0 || cfg.per_batch == 0 || cfg.annotators_per_batch == 0 {
        return Err(Error::invalid("batch plan sizes must be positive"));
    }
    let mut unique = image_ids.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != image_ids.len() {
        return Err(Error::validation("image_ids", "duplicate image id"));
    }
    let need = cfg.n_batches * cfg.per_batch;
    if image_ids.len() < need {
        return Err(Error::invalid(format!(
            "plan needs {need} images, only {} given",
            image_ids.len()
        )));
    }
    let mut order = image_ids.to_vec();
    order.shuffle(&mut stream_rng(cfg.seed, streams::PLAN));
    let width = (cfg.n_batches * cfg.annotators_per_batch)
        .to_string()
        .len()
        .max(2);
    let batches = order[..need]
        .chunks(cfg.per_batch)
        .enumerate()
        .map(|(b, images)| Batch {
            batch_id: format!("batch{}", b + 1),
            image_ids: images.to_vec(),
            annotator_ids: (0..cfg.annotators_per_batch)
                .map(|k| format!("ann{:0width$}", b * cfg.annotators_per_batch + k + 1))
                .collect(),
        })
        .collect();
    Ok(BatchPlan { batches })
}

impl BatchPlan {
    pub fn batch_of(&self, annotator: &str) -> Option<&Batch> {
        self.batches
            .iter()
            .find(|b| b.annotator_ids.iter().any(|a| a == annotator))
    }

    pub fn validate(&self) -> Result<()> {
        let mut images = std::collections::HashSet::new();
        let mut annotators = std::collections::HashSet::new();
        for b in &self.batches {
            for i in &b.image_ids {
                if !images.insert(i) {
                    return Err(Error::validation(
                        "image_ids",
                        format!("image {i:?} appears in two batches"),
                    ));
                }
            }
            for a in &b.annotator_ids {
                if !annotators.insert(a) {
                    return Err(Error::validation(
                        "annotator_ids",
                        format!("annotator {a:?} appears in two batches"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let plan: BatchPlan = serde_json::from_str(&fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Wire names of the three choices; `neutral` is the neither polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingValue {
    Virtue,
    Neutral,
    Vice,
}

impl RatingValue {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "virtue" => Some(RatingValue::Virtue),
            "neutral" => Some(RatingValue::Neutral),
            "vice" => Some(RatingValue::Vice),
            _ => None,
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            RatingValue::Virtue => Polarity::Virtue,
            RatingValue::Neutral => Polarity::Neither,
            RatingValue::Vice => Polarity::Vice,
        }
    }

    pub fn from_polarity(p: Polarity) -> Self {
        match p {
            Polarity::Virtue => RatingValue::Virtue,
            Polarity::Neither => RatingValue::Neutral,
            Polarity::Vice => RatingValue::Vice,
        }
    }
}

/// Body of a rating submission, checked field by field by [`RatingSubmission::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub annotator_id: String,
    pub image_id: String,
    /// Foundation key to `virtue`, `neutral` or `vice`.
    pub ratings: BTreeMap<String, String>,
    #[serde(default)]
    pub note: Option<String>,
}

impl RatingSubmission {
    pub fn validate(&self) -> Result<MoralLabelVector> {
        if self.annotator_id.trim().is_empty() {
            return Err(Error::validation("annotator_id", "must not be empty"));
        }
        if self.image_id.trim().is_empty() {
            return Err(Error::validation("image_id", "must not be empty"));
        }
        if let Some(k) = self
            .ratings
            .keys()
            .find(|k| !Foundation::ALL.iter().any(|f| f.key() == k.as_str()))
        {
            return Err(Error::validation(
                format!("ratings.{k}"),
                "unknown foundation",
            ));
        }
        let mut label = MoralLabelVector::NEUTRAL;
        for f in Foundation::ALL {
            let field = format!("ratings.{}", f.key());
            let raw = self
                .ratings
                .get(f.key())
                .ok_or_else(|| Error::validation(&field, "missing rating"))?;
            let v = RatingValue::parse(raw).ok_or_else(|| {
                Error::validation(
                    &field,
                    format!("{raw:?} is not one of virtue, neutral, vice"),
                )
            })?;
            label.set(f, v.polarity());
        }
        Ok(label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub annotator_id: String,
    pub image_id: String,
    pub label: MoralLabelVector,
    pub note: Option<String>,
    pub submitted_at: DateTime<Utc>,
}

/// Append-only JSON-lines log of rating records.
///
/// On open, an unterminated or unparsable final line (a write cut short) is
/// discarded and truncated away; damage anywhere else is an error.
#[derive(Debug)]
pub struct RatingStore {
    path: PathBuf,
    file: File,
    latest: BTreeMap<(String, String), RatingRecord>,
    discarded_tail: usize,
}

impl RatingStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let mut latest = BTreeMap::new();
        let mut good_len = 0usize;
        let mut discarded_tail = 0usize;
        let mut offset = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (n, line) in lines.iter().enumerate() {
            let last = n + 1 == lines.len();
            offset += line.len();
            let terminated = line.ends_with('\n');
            let body = line.trim_end_matches('\n');
            if body.trim().is_empty() && terminated {
                good_len = offset;
                continue;
            }
            match serde_json::from_str::<RatingRecord>(body) {
                Ok(r) if terminated => {
                    good_len = offset;
                    latest.insert((r.annotator_id.clone(), r.image_id.clone()), r);
                }
                _ if last => discarded_tail = line.len(),
                Ok(_) => unreachable!("only the last line can lack a newline"),
                Err(e) => {
                    return Err(Error::validation(
                        format!("{}: line {}", path.display(), n + 1),
                        e.to_string(),
                    ))
                }
            }
        }
        if discarded_tail > 0 {
            file.set_len(good_len as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok(RatingStore {
            path,
            file,
            latest,
            discarded_tail,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Bytes dropped from a damaged final line when the log was opened.
    pub fn discarded_tail(&self) -> usize {
        self.discarded_tail
    }

    /// Returns only after the line has been synced to disk.
    pub fn append(&mut self, record: RatingRecord) -> Result<()> {
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        self.latest.insert(
            (record.annotator_id.clone(), record.image_id.clone()),
            record,
        );
        Ok(())
    }

    pub fn get(&self, annotator: &str, image: &str) -> Option<&RatingRecord> {
        self.latest.get(&(annotator.to_string(), image.to_string()))
    }

    /// Latest record per (annotator, image), ordered by image then annotator.
    pub fn latest(&self) -> Vec<&RatingRecord> {
        let mut out: Vec<&RatingRecord> = self.latest.values().collect();
        out.sort_by(|a, b| {
            (a.image_id.as_str(), a.annotator_id.as_str())
                .cmp(&(b.image_id.as_str(), b.annotator_id.as_str()))
        });
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationDescriptor {
    pub key: String,
    pub name: String,
    pub description: String,
}

pub fn foundation_descriptors() -> Vec<FoundationDescriptor> {
    let text = |f: Foundation| match f {
        Foundation::Care => "Caring for and protecting others, versus causing or allowing harm.",
        Foundation::Fairness => {
            "Justice, reciprocity and equal treatment, versus cheating or exploitation."
        }
        Foundation::InGroup => "Loyalty to one's group, family or nation, versus betrayal.",
        Foundation::Authority => {
            "Respect for legitimate authority and tradition, versus subversion."
        }
        Foundation::Purity => "Sanctity and cleanliness of body and spirit, versus degradation.",
    };
    Foundation::ALL
        .iter()
        .map(|&f| FoundationDescriptor {
            key: f.key().to_string(),
            name: f.display_name().to_string(),
            description: text(f).to_string(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub annotator_id: String,
    pub batch_id: String,
    pub rated: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub image_id: String,
    pub image_url: String,
    /// 0-based position within the batch.
    pub position: usize,
    pub foundations: Vec<FoundationDescriptor>,
    pub choices: Vec<RatingValue>,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub image_id: String,
    pub annotator_id: String,
    pub label: String,
    pub note: String,
    pub submitted_at: String,
}

pub const EXPORT_HEADER: [&str; 5] = ["image_id", "annotator_id", "label", "note", "submitted_at"];

/// Plan plus store; the single writer behind the annotation endpoints.
#[derive(Debug)]
pub struct AnnotationSession {
    pub plan: BatchPlan,
    store: RatingStore,
}

impl AnnotationSession {
    pub fn new(plan: BatchPlan, store: RatingStore) -> Result<Self> {
        plan.validate()?;
        Ok(AnnotationSession { plan, store })
    }

    pub fn store(&self) -> &RatingStore {
        &self.store
    }

    fn batch(&self, annotator: &str) -> Result<&Batch> {
        self.plan
            .batch_of(annotator)
            .ok_or_else(|| Error::UnknownId(annotator.to_string()))
    }

    pub fn progress(&self, annotator: &str) -> Result<Progress> {
        let batch = self.batch(annotator)?;
        let rated = batch
            .image_ids
            .iter()
            .filter(|i| self.store.get(annotator, i).is_some())
            .count();
        let total = batch.image_ids.len();
        Ok(Progress {
            annotator_id: annotator.to_string(),
            batch_id: batch.batch_id.clone(),
            rated,
            total,
            fraction: rated as f64 / total.max(1) as f64,
        })
    }

    /// First unrated image of the annotator's batch, or `None` when done.
    pub fn next_task(&self, annotator: &str) -> Result<Option<Task>> {
        let batch = self.batch(annotator)?;
        let Some((position, image)) = batch
            .image_ids
            .iter()
            .enumerate()
            .find(|(_, i)| self.store.get(annotator, i).is_none())
        else {
            return Ok(None);
        };
        Ok(Some(Task {
            image_id: image.clone(),
            image_url: format!("/images/{image}"),
            position,
            foundations: foundation_descriptors(),
            choices: vec![RatingValue::Virtue, RatingValue::Neutral, RatingValue::Vice],
            progress: self.progress(annotator)?,
        }))
    }

    /// Validates, stamps with `now` (whole seconds) and durably appends;
    /// a resubmission for the same image replaces the earlier rating.
    pub fn submit(&mut self, sub: &RatingSubmission, now: DateTime<Utc>) -> Result<RatingRecord> {
        let label = sub.validate()?;
        let batch = self.batch(&sub.annotator_id)?;
        if !batch.image_ids.contains(&sub.image_id) {
            return Err(Error::validation(
                "image_id",
                format!(
                    "{:?} is not in the batch of {:?}",
                    sub.image_id, sub.annotator_id
                ),
            ));
        }
        let submitted_at = DateTime::from_timestamp(now.timestamp(), 0).expect("in range");
        let record = RatingRecord {
            annotator_id: sub.annotator_id.clone(),
            image_id: sub.image_id.clone(),
            label,
            note: sub.note.clone().filter(|n| !n.is_empty()),
            submitted_at,
        };
        self.store.append(record.clone())?;
        Ok(record)
    }

    pub fn export(&self) -> Vec<ExportRow> {
        export_rows(&self.store)
    }
}

pub fn export_rows(store: &RatingStore) -> Vec<ExportRow> {
    store
        .latest()
        .into_iter()
        .map(|r| ExportRow {
            image_id: r.image_id.clone(),
            annotator_id: r.annotator_id.clone(),
            label: r.label.encode(),
            note: r.note.clone().unwrap_or_default(),
            submitted_at: r.submitted_at.to_rfc3339_opts(SecondsFormat::Secs, true),
        })
        .collect()
}

pub fn write_export_csv<W: Write>(rows: &[ExportRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(EXPORT_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ratings_table(rows: &[ExportRow]) -> Result<RatingsTable> {
    let mut t = RatingsTable::new();
    for r in rows {
        t.insert_label(
            &r.annotator_id,
            &r.image_id,
            crate::labels::parse_label(&r.label)?,
        );
    }
    Ok(t)
}
