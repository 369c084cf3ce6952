use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::MoralLabelVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Smid,
    Imagenet,
    Laion,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Who produced the moral label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Expert,
    Compass,
    Synthetic,
}

/// One image-text sample with its moral label.
///
/// The text feature of a record is looked up by its first caption; the image
/// feature by `image_feature_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: Source,
    pub image_feature_id: String,
    pub captions: Vec<String>,
    pub label: MoralLabelVector,
    pub split: Option<Split>,
    pub provenance: Provenance,
}

impl SampleRecord {
    pub fn primary_caption(&self) -> &str {
        &self.captions[0]
    }

    pub fn is_split(&self, split: Split) -> bool {
        self.split == Some(split)
    }
}

pub fn validate_records(records: &[SampleRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.captions.is_empty() {
            return Err(Error::validation(
                "captions",
                format!("record {:?} has no captions", r.id),
            ));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::validation(
                "id",
                format!("duplicate record id {:?}", r.id),
            ));
        }
    }
    Ok(())
}

/// Reads a line-delimited JSON manifest. Blank lines are ignored.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::validation("manifest", format!("line {}: {e}", n + 1)))?;
        records.push(record);
    }
    validate_records(&records)?;
    Ok(records)
}

pub fn write_manifest(records: &[SampleRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
