//! Training-set variants: caption-rotation replication and label-preserving swaps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SampleRecord, Split};
use crate::error::{Error, Result};
use crate::labels::MoralLabelVector;
use crate::rng::{stream_rng, streams};

pub const DEFAULT_AUGMENT_COPIES: usize = 4;
pub const DEFAULT_MIX_FRACTION: f64 = 0.75;
pub const DEFAULT_MILD_CAP: usize = 500;

/// Adds `copies` replicas of every training record.
///
/// Replica `k` leads with caption `(offset + k) % captions.len()`, where the
/// offset is drawn per record. Validation and test records pass through.
pub fn augment_replicate(
    records: &[SampleRecord],
    copies: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    if copies == 0 {
        return Err(Error::invalid("augmentation copies must be at least 1"));
    }
    let mut rng = stream_rng(seed, streams::AUGMENT);
    let train = records.iter().filter(|r| r.is_split(Split::Train)).count();
    let mut out = Vec::with_capacity(records.len() + train * copies);
    for r in records {
        out.push(r.clone());
        if !r.is_split(Split::Train) {
            continue;
        }
        if r.captions.is_empty() {
            return Err(Error::validation(
                "captions",
                format!("record {:?} has no captions", r.id),
            ));
        }
        let offset = rng.random_range(0..r.captions.len());
        for k in 0..copies {
            let mut replica = r.clone();
            replica.id = format!("{}#aug{}", r.id, k + 1);
            replica
                .captions
                .rotate_left((offset + k) % r.captions.len());
            out.push(replica);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Per-group swap cap, round-robin across groups.
    Mild,
    /// Targets drawn uniformly from all training records, so larger groups swap more.
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapKind {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapConfig {
    pub mode: SwapMode,
    pub mix_fraction: f64,
    pub per_group_cap: Option<usize>,
    pub seed: u64,
}

impl SwapConfig {
    pub fn mild(seed: u64) -> Self {
        SwapConfig {
            mode: SwapMode::Mild,
            mix_fraction: DEFAULT_MIX_FRACTION,
            per_group_cap: Some(DEFAULT_MILD_CAP),
            seed,
        }
    }

    pub fn strong(seed: u64) -> Self {
        SwapConfig {
            mode: SwapMode::Strong,
            mix_fraction: DEFAULT_MIX_FRACTION,
            per_group_cap: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub target: String,
    pub partner: String,
    pub kind: SwapKind,
}

#[derive(Clone, Debug)]
pub struct SwapOutcome {
    pub records: Vec<SampleRecord>,
    /// Number of swap targets selected (including skipped ones).
    pub n_targets: usize,
    pub swaps: Vec<SwapEvent>,
    pub swaps_per_group: BTreeMap<MoralLabelVector, usize>,
    /// Targets whose label group had no other member.
    pub skipped: Vec<String>,
}

/// Exchanges image references or captions between training records sharing an
/// identical label. Labels and non-training records are never modified.
pub fn mft_swap(records: &[SampleRecord], cfg: &SwapConfig) -> Result<SwapOutcome> {
    if !(0.0..=1.0).contains(&cfg.mix_fraction) {
        return Err(Error::invalid(format!(
            "mix_fraction must lie in [0, 1], got {}",
            cfg.mix_fraction
        )));
    }
    let mut out = records.to_vec();
    let train: Vec<usize> = (0..out.len())
        .filter(|&i| out[i].is_split(Split::Train))
        .collect();
    let mut groups: BTreeMap<MoralLabelVector, Vec<usize>> = BTreeMap::new();
    for &i in &train {
        groups.entry(out[i].label).or_default().push(i);
    }
    let wanted = (cfg.mix_fraction * train.len() as f64).floor() as usize;
    let cap = cfg.per_group_cap.unwrap_or(usize::MAX);
    let mut rng = stream_rng(cfg.seed, streams::SWAP);

    let targets = match cfg.mode {
        SwapMode::Mild => select_round_robin(&groups, wanted, cap, &mut rng),
        SwapMode::Strong => select_proportional(&train, &out, wanted, cap, &mut rng),
    };

    let mut swaps = Vec::new();
    let mut swaps_per_group = BTreeMap::new();
    let mut skipped = Vec::new();
    for &t in &targets {
        let label = out[t].label;
        let members = &groups[&label];
        if members.len() < 2 {
            skipped.push(out[t].id.clone());
            continue;
        }
        let partner = loop {
            let p = members[rng.random_range(0..members.len())];
            if p != t {
                break p;
            }
        };
        let kind = if rng.random_bool(0.5) {
            SwapKind::Image
        } else {
            SwapKind::Text
        };
        let (a, b) = pair_mut(&mut out, t, partner);
        match kind {
            SwapKind::Image => std::mem::swap(&mut a.image_feature_id, &mut b.image_feature_id),
            SwapKind::Text => std::mem::swap(&mut a.captions, &mut b.captions),
        }
        *swaps_per_group.entry(label).or_insert(0) += 1;
        swaps.push(SwapEvent {
            target: out[t].id.clone(),
            partner: out[partner].id.clone(),
            kind,
        });
    }

    Ok(SwapOutcome {
        records: out,
        n_targets: targets.len(),
        swaps,
        swaps_per_group,
        skipped,
    })
}

fn pair_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = v.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// One target per group per round, groups visited in shuffled order, each
/// group contributing at most `cap` targets.
fn select_round_robin<R: Rng>(
    groups: &BTreeMap<MoralLabelVector, Vec<usize>>,
    wanted: usize,
    cap: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut queues: Vec<Vec<usize>> = groups
        .values()
        .map(|members| {
            let mut q = members.clone();
            q.shuffle(rng);
            q.truncate(cap);
            q
        })
        .collect();
    queues.shuffle(rng);
    let mut targets = Vec::with_capacity(wanted);
    let mut round = 0;
    while targets.len() < wanted {
        let mut progressed = false;
        for q in &queues {
            if targets.len() == wanted {
                break;
            }
            if let Some(&i) = q.get(round) {
                targets.push(i);
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
        round += 1;
    }
    targets
}

fn select_proportional<R: Rng>(
    train: &[usize],
    records: &[SampleRecord],
    wanted: usize,
    cap: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut pool = train.to_vec();
    pool.shuffle(rng);
    let mut taken: BTreeMap<MoralLabelVector, usize> = BTreeMap::new();
    let mut targets = Vec::with_capacity(wanted);
    for i in pool {
        if targets.len() == wanted {
            break;
        }
        let n = taken.entry(records[i].label).or_insert(0);
        if *n < cap {
            *n += 1;
            targets.push(i);
        }
    }
    targets
}

/// Dataset variant applied to the training split before batching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    Normal,
    Augmented,
    SwapMild,
    SwapStrong,
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetVariant::Normal => "normal",
            DatasetVariant::Augmented => "augmented",
            DatasetVariant::SwapMild => "swap_mild",
            DatasetVariant::SwapStrong => "swap_strong",
        })
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(DatasetVariant::Normal),
            "augmented" => Ok(DatasetVariant::Augmented),
            "swap_mild" | "swap-mild" => Ok(DatasetVariant::SwapMild),
            "swap_strong" | "swap-strong" => Ok(DatasetVariant::SwapStrong),
            other => Err(Error::invalid(format!("unknown dataset variant {other:?}"))),
        }
    }
}

/// Swap variants build on the augmented set.
pub fn apply_variant(
    records: &[SampleRecord],
    variant: DatasetVariant,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    match variant {
        DatasetVariant::Normal => Ok(records.to_vec()),
        DatasetVariant::Augmented => augment_replicate(records, DEFAULT_AUGMENT_COPIES, seed),
        DatasetVariant::SwapMild | DatasetVariant::SwapStrong => {
            let augmented = augment_replicate(records, DEFAULT_AUGMENT_COPIES, seed)?;
            let cfg = if variant == DatasetVariant::SwapMild {
                SwapConfig::mild(seed)
            } else {
                SwapConfig::strong(seed)
            };
            Ok(mft_swap(&augmented, &cfg)?.records)
        }
    }
}
