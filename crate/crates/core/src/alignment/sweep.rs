use std::io::Write;

use serde::{Deserialize, Serialize};

use super::train::{train, TrainConfig, TrainOutcome};
use crate::dataset::{DatasetVariant, SampleRecord};
use crate::error::{Error, Result};
use crate::features::FeatureBank;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub best_epoch: usize,
    pub val_map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub outcomes: Vec<TrainOutcome>,
}

impl SweepResult {
    /// Index of the row with the highest validation MAP (first on ties).
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if r.val_map.is_nan() {
                continue;
            }
            if best.is_none_or(|b| r.val_map > self.rows[b].val_map) {
                best = Some(i);
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "best_epoch", "val_map"])?;
        for r in &self.rows {
            w.write_record([
                r.lambda.to_string(),
                r.best_epoch.to_string(),
                r.val_map.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One training run per λ, every other setting taken from `base`.
pub fn lambda_sweep(
    base: &TrainConfig,
    records: &[SampleRecord],
    images: &FeatureBank,
    texts: &FeatureBank,
    variant: DatasetVariant,
    lambdas: &[f64],
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::validation("lambdas", "no values given"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::validation(
            "lambdas",
            format!("{l} lies outside [0, 1]"),
        ));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut outcomes = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..base.clone()
        };
        let out = train(&cfg, records, images, texts, variant)?;
        rows.push(SweepRow {
            lambda,
            best_epoch: out.best_epoch,
            val_map: out.best_val_map,
        });
        outcomes.push(out);
    }
    Ok(SweepResult { rows, outcomes })
}

/// Parses `0.1,0.2` or a `start:stop:step` range (inclusive, rounded to 1e-9).
pub fn parse_lambdas(spec: &str) -> Result<Vec<f64>> {
    let parse = |s: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::validation("lambdas", format!("not a number: {s:?}")))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let (start, stop, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if !(step > 0.0) || stop < start {
            return Err(Error::validation(
                "lambdas",
                "range needs step > 0 and stop >= start",
            ));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n)
            .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
            .collect());
    }
    spec.split(',').map(parse).collect()
}
