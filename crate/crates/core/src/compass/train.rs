use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{compass_metrics, CompassMetrics};
use super::model::{predict_labels, CompassModel};
use crate::alignment::AdamW;
use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KvConfig};
use crate::dataset::{Provenance, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::linalg::Matrix;
use crate::rng::{stream_rng, streams};

pub const COMPASS_MODEL: &str = "compass";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompassConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Epochs before early stopping starts watching.
    pub early_stop_warmup: usize,
    /// Trunk output width; `None` keeps the input dimension.
    pub trunk_dim: Option<usize>,
    pub seed: u64,
}

impl Default for CompassConfig {
    fn default() -> Self {
        CompassConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            plateau_factor: 0.1,
            plateau_patience: 3,
            early_stop_patience: 8,
            early_stop_warmup: 10,
            trunk_dim: None,
            seed: 0,
        }
    }
}

impl CompassConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::validation(field, msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            );
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail(
                "plateau_factor",
                format!("must lie in (0, 1), got {}", self.plateau_factor),
            );
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return fail(name, "must be positive".into());
            }
        }
        if self.trunk_dim == Some(0) {
            return fail("trunk_dim", "must be positive".into());
        }
        Ok(())
    }
}

impl KvConfig for CompassConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, value)?,
            "early_stop_warmup" => self.early_stop_warmup = parse_value(key, value)?,
            "trunk_dim" => {
                self.trunk_dim = match value {
                    "input" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("early_stop_warmup", self.early_stop_warmup.to_string()),
            (
                "trunk_dim",
                self.trunk_dim
                    .map_or_else(|| "input".to_string(), |d| d.to_string()),
            ),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Multiplies the learning rate by `factor` once the watched score has not
/// improved for more than `patience` consecutive epochs, then starts counting
/// again.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: None,
            bad_epochs: 0,
        }
    }

    /// True when the rate should be reduced after this epoch.
    pub fn observe(&mut self, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Stops once the watched score has not improved for `patience` consecutive
/// epochs. Epochs up to `warmup` are ignored entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub warmup: usize,
    best: Option<f64>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, warmup: usize) -> Self {
        EarlyStopping {
            patience,
            warmup,
            best: None,
            wait: 0,
        }
    }

    /// `epoch` is 1-based. True when training should halt after it.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if epoch <= self.warmup {
            return false;
        }
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        self.wait >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompassEpoch {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro F1 averaged over foundations.
    pub val_f1: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
    pub lr_reduced: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompassHistory {
    pub epochs: Vec<CompassEpoch>,
}

impl CompassHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "train_loss",
            "val_f1",
            "learning_rate",
            "lr_reduced",
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_f1.to_string(),
                e.learning_rate.to_string(),
                e.lr_reduced.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompassOutcome {
    /// Parameters at the epoch with the highest validation F1.
    pub best: CompassModel,
    pub last: CompassModel,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    /// Epoch after which early stopping fired, if it did.
    pub stopped_at: Option<usize>,
    pub history: CompassHistory,
}

fn image_matrix(records: &[SampleRecord], images: &FeatureBank) -> Result<Matrix> {
    let ids: Vec<&str> = records
        .iter()
        .map(|r| r.image_feature_id.as_str())
        .collect();
    images.gather(&ids)
}

/// Trains on the train split of `records`; plateau and early stopping watch
/// validation macro F1.
pub fn train_compass(
    cfg: &CompassConfig,
    records: &[SampleRecord],
    images: &FeatureBank,
) -> Result<CompassOutcome> {
    cfg.validate()?;
    let pick = |s: Split| -> Vec<SampleRecord> {
        records.iter().filter(|r| r.is_split(s)).cloned().collect()
    };
    let (train, val) = (pick(Split::Train), pick(Split::Val));
    if train.is_empty() {
        return Err(Error::validation("split", "train split is empty"));
    }
    if val.is_empty() {
        return Err(Error::validation("split", "validation split is empty"));
    }
    let x = image_matrix(&train, images)?;
    let y: Vec<_> = train.iter().map(|r| r.label).collect();
    let xv = image_matrix(&val, images)?;
    let yv: Vec<_> = val.iter().map(|r| r.label).collect();

    let mut init_rng = stream_rng(cfg.seed, streams::COMPASS_INIT);
    let input_dim = images.dim();
    let mut model =
        CompassModel::init(input_dim, cfg.trunk_dim.unwrap_or(input_dim), &mut init_rng)?;
    let lens: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut opt = AdamW::new(&lens, 0.0);
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience, cfg.early_stop_warmup);
    let mut shuffle_rng = stream_rng(cfg.seed, streams::COMPASS_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut history = CompassHistory::default();
    let mut best: Option<(usize, f64, CompassModel)> = None;
    let mut stopped_at = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<_> = chunk.iter().map(|&i| y[i]).collect();
            let (loss, grads) = model.loss_and_grads(&xb, &yb)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("compass loss at epoch {epoch}")));
            }
            opt.step(model.param_slices_mut(), grads.slices(), lr)?;
            loss_sum += loss * chunk.len() as f64;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!(
                "compass parameters after epoch {epoch}"
            )));
        }
        let val_f1 = compass_metrics(&predict_labels(&model, &xv)?, &yv)?
            .average
            .f1;
        if best.as_ref().is_none_or(|(_, b, _)| val_f1 > *b) {
            best = Some((epoch, val_f1, model.clone()));
        }
        let reduce = plateau.observe(val_f1);
        history.epochs.push(CompassEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_f1,
            learning_rate: lr,
            lr_reduced: reduce,
        });
        if reduce {
            lr *= cfg.plateau_factor;
        }
        if stopper.observe(epoch, val_f1) {
            stopped_at = Some(epoch);
            break;
        }
    }

    let (best_epoch, best_val_f1, best_model) = best.expect("at least one epoch");
    Ok(CompassOutcome {
        best: best_model,
        last: model,
        best_epoch,
        best_val_f1,
        stopped_at,
        history,
    })
}

pub fn evaluate_compass(
    model: &CompassModel,
    records: &[SampleRecord],
    images: &FeatureBank,
) -> Result<CompassMetrics> {
    if records.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let pred = predict_labels(model, &image_matrix(records, images)?)?;
    let truth: Vec<_> = records.iter().map(|r| r.label).collect();
    compass_metrics(&pred, &truth)
}

/// Replaces each record's label with the compass prediction for its image.
pub fn label_records(
    model: &CompassModel,
    records: &[SampleRecord],
    images: &FeatureBank,
) -> Result<Vec<SampleRecord>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let pred = predict_labels(model, &image_matrix(records, images)?)?;
    Ok(records
        .iter()
        .zip(pred)
        .map(|(r, label)| SampleRecord {
            label,
            provenance: Provenance::Compass,
            ..r.clone()
        })
        .collect())
}

impl CompassModel {
    pub fn to_checkpoint(&self, cfg: &CompassConfig) -> Checkpoint {
        Checkpoint::new(COMPASS_MODEL, cfg, self.named_tensors())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(CompassConfig, CompassModel)> {
        let cfg: CompassConfig = ckpt.config_as(COMPASS_MODEL)?;
        let model = CompassModel::from_named_tensors(|name| ckpt.get(name).cloned())?;
        Ok((cfg, model))
    }
}
