//! Inter-annotator agreement: nominal Krippendorff's α, Cohen's κ against
//! majority labels, consensus coverage and low-variability screening.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::bootstrap;
use crate::labels::{parse_label, Foundation, MoralLabelVector, Polarity};

pub const DEFAULT_MIN_STD: f64 = 0.05;

/// Ratings per (image, annotator) and foundation; a rating may be missing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingsTable {
    cells: BTreeMap<(String, String), [Option<Polarity>; 5]>,
}

impl RatingsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        annotator: &str,
        image: &str,
        foundation: Foundation,
        rating: Polarity,
    ) {
        self.cells
            .entry((image.to_string(), annotator.to_string()))
            .or_insert([None; 5])[foundation.index()] = Some(rating);
    }

    /// Sets all five foundations at once.
    pub fn insert_label(&mut self, annotator: &str, image: &str, label: MoralLabelVector) {
        let mut row = [None; 5];
        for f in Foundation::ALL {
            row[f.index()] = Some(label.get(f));
        }
        self.cells
            .insert((image.to_string(), annotator.to_string()), row);
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn images(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.keys().map(|(i, _)| i.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn annotators(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.cells.keys().map(|(_, a)| a.as_str()).collect();
        set.into_iter().collect()
    }

    /// Ratings of every image for one foundation, images in sorted order.
    pub fn units(&self, foundation: Foundation) -> Vec<(String, Vec<Polarity>)> {
        let mut out: BTreeMap<&str, Vec<Polarity>> = BTreeMap::new();
        for ((image, _), row) in &self.cells {
            let unit = out.entry(image.as_str()).or_default();
            if let Some(r) = row[foundation.index()] {
                unit.push(r);
            }
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Drops every rating by the given annotators.
    pub fn without(&self, annotators: &[String]) -> RatingsTable {
        RatingsTable {
            cells: self
                .cells
                .iter()
                .filter(|((_, a), _)| !annotators.contains(a))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    /// Reads the annotation export: header with at least `image_id`,
    /// `annotator_id` and `label` (5-character encoding).
    pub fn from_export_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::validation(name, "missing column"))
        };
        let (ci, ca, cl) = (col("image_id")?, col("annotator_id")?, col("label")?);
        let mut table = RatingsTable::new();
        for row in rdr.records() {
            let row = row?;
            let field = |k: usize| row.get(k).unwrap_or("");
            table.insert_label(field(ca), field(ci), parse_label(field(cl))?);
        }
        Ok(table)
    }
}

/// Nominal α over units of categorical values; values in units with fewer
/// than two ratings are not pairable and are ignored.
pub fn krippendorff_alpha<T: Ord + Copy>(units: &[Vec<T>]) -> Result<f64> {
    let mut coincidence: BTreeMap<(T, T), f64> = BTreeMap::new();
    for unit in units.iter().filter(|u| u.len() >= 2) {
        let w = 1.0 / (unit.len() - 1) as f64;
        for (i, a) in unit.iter().enumerate() {
            for (j, b) in unit.iter().enumerate() {
                if i != j {
                    *coincidence.entry((*a, *b)).or_insert(0.0) += w;
                }
            }
        }
    }
    if coincidence.is_empty() {
        return Err(Error::UndefinedMetric("alpha: no pairable values".into()));
    }
    let mut marginals: BTreeMap<T, f64> = BTreeMap::new();
    for ((c, _), v) in &coincidence {
        *marginals.entry(*c).or_insert(0.0) += v;
    }
    let n: f64 = marginals.values().sum();
    let observed: f64 = coincidence
        .iter()
        .filter(|((c, k), _)| c != k)
        .map(|(_, v)| v)
        .sum();
    let m: Vec<f64> = marginals.values().cloned().collect();
    let mut expected = 0.0;
    for (i, a) in m.iter().enumerate() {
        for (j, b) in m.iter().enumerate() {
            if i != j {
                expected += a * b;
            }
        }
    }
    if expected == 0.0 {
        return Err(Error::UndefinedMetric(
            "alpha: only one category was used".into(),
        ));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Majority {
    Label(Polarity),
    NoConsensus,
}

/// Strict plurality; a tie for first place, or fewer than two ratings, is
/// no consensus.
pub fn majority_vote(ratings: &[Polarity]) -> Majority {
    if ratings.len() < 2 {
        return Majority::NoConsensus;
    }
    let mut counts = [0usize; 3];
    for r in ratings {
        counts[r.class_index()] += 1;
    }
    let top = *counts.iter().max().expect("three counts");
    let mut winners = Polarity::ALL
        .iter()
        .filter(|p| counts[p.class_index()] == top);
    match (winners.next(), winners.next()) {
        (Some(p), None) => Majority::Label(*p),
        _ => Majority::NoConsensus,
    }
}

/// Unweighted κ with chance agreement from the product of marginals.
pub fn cohen_kappa<T: Ord + Copy>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedMetric("kappa: fewer than 2 items".into()));
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ma: BTreeMap<T, f64> = BTreeMap::new();
    let mut mb: BTreeMap<T, f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(*x).or_insert(0.0) += 1.0;
        *mb.entry(*y).or_insert(0.0) += 1.0;
    }
    let p_o = agree / n;
    let p_e: f64 = ma
        .iter()
        .map(|(c, ca)| ca * mb.get(c).copied().unwrap_or(0.0))
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::UndefinedMetric(format!(
            "kappa: chance agreement is 1 (observed {p_o})"
        )));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// κ between model labels and majority labels, skipping items without consensus.
pub fn cohen_kappa_majority(model: &[Polarity], majority: &[Majority]) -> Result<f64> {
    if model.len() != majority.len() {
        return Err(Error::DimensionMismatch {
            expected: majority.len(),
            found: model.len(),
        });
    }
    let (a, b): (Vec<Polarity>, Vec<Polarity>) = model
        .iter()
        .zip(majority)
        .filter_map(|(m, j)| match j {
            Majority::Label(p) => Some((*m, *p)),
            Majority::NoConsensus => None,
        })
        .unzip();
    cohen_kappa(&a, &b)
}

/// Fraction of images with a consensus label; 0 for an empty table.
pub fn consensus_coverage(table: &RatingsTable, foundation: Foundation) -> f64 {
    let units = table.units(foundation);
    if units.is_empty() {
        return 0.0;
    }
    let covered = units
        .iter()
        .filter(|(_, r)| majority_vote(r) != Majority::NoConsensus)
        .count();
    covered as f64 / units.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorStat {
    pub annotator_id: String,
    /// Population standard deviation of vice = -1, neither = 0, virtue = +1.
    pub std: f64,
    pub n_ratings: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub retained: Vec<AnnotatorStat>,
    pub excluded: Vec<AnnotatorStat>,
}

fn numeric(p: Polarity) -> f64 {
    match p {
        Polarity::Vice => -1.0,
        Polarity::Neither => 0.0,
        Polarity::Virtue => 1.0,
    }
}

/// Excludes annotators whose responses, pooled across foundations, vary
/// less than `min_std`.
pub fn screen_annotators(table: &RatingsTable, min_std: f64) -> Result<Screening> {
    if !(min_std >= 0.0) {
        return Err(Error::validation("min_std", "must be >= 0"));
    }
    let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((_, annotator), row) in &table.cells {
        values
            .entry(annotator.as_str())
            .or_default()
            .extend(row.iter().flatten().map(|p| numeric(*p)));
    }
    let mut out = Screening {
        retained: Vec::new(),
        excluded: Vec::new(),
    };
    for (id, v) in values {
        let n = v.len();
        let std = if n == 0 {
            0.0
        } else {
            let mean = v.iter().sum::<f64>() / n as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        };
        let stat = AnnotatorStat {
            annotator_id: id.to_string(),
            std,
            n_ratings: n,
        };
        if std < min_std {
            out.excluded.push(stat);
        } else {
            out.retained.push(stat);
        }
    }
    Ok(out)
}

/// One foundation's agreement; NaN marks an undefined value or error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoundationAgreement {
    pub foundation: Foundation,
    pub alpha: f64,
    pub alpha_se: f64,
    pub kappa_majority: f64,
    pub kappa_se: f64,
    pub consensus_coverage: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub foundations: Vec<FoundationAgreement>,
    pub screening: Screening,
}

fn defined(r: Result<f64>) -> Result<f64> {
    match r {
        Ok(v) => Ok(v),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

fn with_se<F: Fn(&[usize]) -> Result<f64>>(
    name: &str,
    n_items: usize,
    metric: F,
    n_bootstrap: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..n_items).collect();
    let value = defined(metric(&all))?;
    if value.is_nan() {
        return Ok((f64::NAN, f64::NAN));
    }
    match bootstrap(name, n_items, metric, n_bootstrap, seed) {
        Ok(r) => Ok((value, r.se)),
        Err(Error::UndefinedMetric(_)) => Ok((value, f64::NAN)),
        Err(e) => Err(e),
    }
}

/// Screens annotators, then computes per-foundation statistics on the rest.
/// κ is computed only when `model_labels` (keyed by image id) is given;
/// standard errors resample images.
pub fn agreement_report(
    table: &RatingsTable,
    model_labels: Option<&BTreeMap<String, MoralLabelVector>>,
    min_std: f64,
    n_bootstrap: usize,
    seed: u64,
) -> Result<AgreementReport> {
    let screening = screen_annotators(table, min_std)?;
    let dropped: Vec<String> = screening
        .excluded
        .iter()
        .map(|s| s.annotator_id.clone())
        .collect();
    let kept = table.without(&dropped);
    let mut foundations = Vec::with_capacity(5);
    for f in Foundation::ALL {
        let units = kept.units(f);
        let values: Vec<Vec<Polarity>> = units.iter().map(|(_, r)| r.clone()).collect();
        let (alpha, alpha_se) = with_se(
            "alpha",
            values.len(),
            |idx: &[usize]| {
                let sample: Vec<Vec<Polarity>> = idx.iter().map(|&i| values[i].clone()).collect();
                krippendorff_alpha(&sample)
            },
            n_bootstrap,
            seed,
        )?;
        let (kappa_majority, kappa_se) = match model_labels {
            None => (f64::NAN, f64::NAN),
            Some(model) => {
                let mut pairs = Vec::new();
                for (image, ratings) in &units {
                    if let Some(label) = model.get(image) {
                        pairs.push((label.get(f), majority_vote(ratings)));
                    }
                }
                with_se(
                    "kappa",
                    pairs.len(),
                    |idx: &[usize]| {
                        let (m, j): (Vec<Polarity>, Vec<Majority>) =
                            idx.iter().map(|&i| pairs[i]).unzip();
                        cohen_kappa_majority(&m, &j)
                    },
                    n_bootstrap,
                    seed,
                )?
            }
        };
        foundations.push(FoundationAgreement {
            foundation: f,
            alpha,
            alpha_se,
            kappa_majority,
            kappa_se,
            consensus_coverage: consensus_coverage(&kept, f),
            n_images: units.len(),
        });
    }
    Ok(AgreementReport {
        foundations,
        screening,
    })
}

impl AgreementReport {
    /// Header `foundation,alpha,alpha_se,kappa_majority,kappa_se,consensus_coverage,n_images`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "foundation",
            "alpha",
            "alpha_se",
            "kappa_majority",
            "kappa_se",
            "consensus_coverage",
            "n_images",
        ])?;
        for r in &self.foundations {
            w.write_record([
                r.foundation.key().to_string(),
                r.alpha.to_string(),
                r.alpha_se.to_string(),
                r.kappa_majority.to_string(),
                r.kappa_se.to_string(),
                r.consensus_coverage.to_string(),
                r.n_images.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
