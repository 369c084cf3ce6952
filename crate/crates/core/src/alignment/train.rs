use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::ProjectionEncoder;
use super::loss::{total_loss, MoralScale};
use super::optim::{AdamW, LrSchedule};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_value, unknown_key, KvConfig};
use crate::dataset::{apply_variant, DatasetVariant, SampleRecord, Source, Split};
use crate::error::{Error, Result};
use crate::evaluation::{mean_average_precision, LabeledEmbeddings};
use crate::features::FeatureBank;
use crate::labels::MoralLabelVector;
use crate::linalg::Matrix;
use crate::rng::{stream_rng, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub include_diagonal_in_moral_loss: bool,
    pub moral_scale: MoralScale,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub linear_bypass: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.4,
            temperature: 0.07,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            schedule: LrSchedule::default(),
            include_diagonal_in_moral_loss: false,
            moral_scale: MoralScale::Literal,
            hidden_dim: 64,
            output_dim: 32,
            linear_bypass: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::validation(field, msg));
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda", format!("must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return fail(
                "temperature",
                format!("must be > 0, got {}", self.temperature),
            );
        }
        if self.batch_size < 2 {
            return fail(
                "batch_size",
                format!("must be >= 2, got {}", self.batch_size),
            );
        }
        if self.epochs == 0 {
            return fail("epochs", "must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            );
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return fail(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            );
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return fail("hidden_dim", "encoder dimensions must be positive".into());
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "schedule" => self.schedule = parse_value(key, value)?,
            "include_diagonal_in_moral_loss" => {
                self.include_diagonal_in_moral_loss = parse_value(key, value)?
            }
            "moral_scale" => {
                self.moral_scale = match value {
                    "literal" => MoralScale::Literal,
                    "match_scale" => MoralScale::MatchScale,
                    _ => return Err(Error::validation(key, format!("unknown mode {value:?}"))),
                }
            }
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "output_dim" => self.output_dim = parse_value(key, value)?,
            "linear_bypass" => self.linear_bypass = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda", self.lambda.to_string()),
            ("temperature", self.temperature.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("schedule", self.schedule.to_string()),
            (
                "include_diagonal_in_moral_loss",
                self.include_diagonal_in_moral_loss.to_string(),
            ),
            (
                "moral_scale",
                match self.moral_scale {
                    MoralScale::Literal => "literal",
                    MoralScale::MatchScale => "match_scale",
                }
                .to_string(),
            ),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("output_dim", self.output_dim.to_string()),
            ("linear_bypass", self.linear_bypass.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub total: f64,
    pub clip_term: f64,
    pub moral_term: f64,
    /// NaN when no validation query has a relevant item.
    pub val_map: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "total",
            "clip_term",
            "moral_term",
            "val_map",
            "learning_rate",
        ])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.total.to_string(),
                e.clip_term.to_string(),
                e.moral_term.to_string(),
                e.val_map.to_string(),
                e.learning_rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub image: ProjectionEncoder,
    pub text: ProjectionEncoder,
}

pub const ALIGNMENT_MODEL: &str = "alignment";

impl EncoderPair {
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut tensors = self.image.named_tensors("image");
        tensors.extend(self.text.named_tensors("text"));
        Checkpoint::new(ALIGNMENT_MODEL, cfg, tensors)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(TrainConfig, EncoderPair)> {
        let cfg: TrainConfig = ckpt.config_as(ALIGNMENT_MODEL)?;
        let lookup = |name: &str| ckpt.get(name).cloned();
        let pair = EncoderPair {
            image: ProjectionEncoder::from_named_tensors("image", lookup)?,
            text: ProjectionEncoder::from_named_tensors("text", lookup)?,
        };
        if pair.image.output_dim() != pair.text.output_dim() {
            return Err(Error::validation(
                "output_dim",
                "image and text encoders disagree on output dimension",
            ));
        }
        Ok((cfg, pair))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub last: EncoderPair,
    /// Parameters at the epoch with the highest validation MAP.
    pub best: EncoderPair,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub history: TrainHistory,
}

/// Validation records used for model selection: the SMID portion of the
/// validation split when there is one, otherwise the whole split.
pub fn selection_subset(records: &[SampleRecord]) -> Vec<SampleRecord> {
    let val: Vec<SampleRecord> = records
        .iter()
        .filter(|r| r.is_split(Split::Val))
        .cloned()
        .collect();
    let smid: Vec<SampleRecord> = val
        .iter()
        .filter(|r| r.source == Source::Smid)
        .cloned()
        .collect();
    if smid.is_empty() {
        val
    } else {
        smid
    }
}

/// Image-to-image moral MAP of `records` under the given image encoder.
pub fn image_map(
    encoder: &ProjectionEncoder,
    records: &[SampleRecord],
    images: &FeatureBank,
) -> Result<f64> {
    let ids: Vec<&str> = records
        .iter()
        .map(|r| r.image_feature_id.as_str())
        .collect();
    let emb = encoder.apply(&images.gather(&ids)?)?;
    let set = LabeledEmbeddings::new(
        records.iter().map(|r| r.id.clone()).collect(),
        &emb,
        records.iter().map(|r| r.label).collect(),
    )?;
    match mean_average_precision(&set, &set, true) {
        Ok(r) => Ok(r.value),
        Err(Error::UndefinedMetric(_)) => Ok(f64::NAN),
        Err(e) => Err(e),
    }
}

/// Image and primary-caption embeddings of `records`, keyed by record id.
/// Without an encoder pair the raw features are used.
pub fn record_embeddings(
    pair: Option<&EncoderPair>,
    records: &[SampleRecord],
    images: &FeatureBank,
    texts: &FeatureBank,
) -> Result<(LabeledEmbeddings, LabeledEmbeddings)> {
    let batch = gather_training(records, images, texts)?;
    let (img, txt) = match pair {
        Some(p) => (p.image.apply(&batch.image)?, p.text.apply(&batch.text)?),
        None => (batch.image, batch.text),
    };
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    Ok((
        LabeledEmbeddings::new(ids.clone(), &img, batch.labels.clone())?,
        LabeledEmbeddings::new(ids, &txt, batch.labels)?,
    ))
}

struct Batches {
    image: Matrix,
    text: Matrix,
    labels: Vec<MoralLabelVector>,
}

fn gather_training(
    records: &[SampleRecord],
    images: &FeatureBank,
    texts: &FeatureBank,
) -> Result<Batches> {
    for r in records {
        if !images.contains(&r.image_feature_id) {
            return Err(Error::UnknownId(r.image_feature_id.clone()));
        }
        if !texts.contains(r.primary_caption()) {
            return Err(Error::UnknownId(r.primary_caption().to_string()));
        }
    }
    let img_ids: Vec<&str> = records
        .iter()
        .map(|r| r.image_feature_id.as_str())
        .collect();
    let txt_ids: Vec<&str> = records.iter().map(|r| r.primary_caption()).collect();
    Ok(Batches {
        image: images.gather(&img_ids)?,
        text: texts.gather(&txt_ids)?,
        labels: records.iter().map(|r| r.label).collect(),
    })
}

/// Index chunks for one epoch; a trailing chunk of one sample is dropped.
fn epoch_chunks(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Trains an image and a text projection encoder on the train split of
/// `records` after applying `variant`, selecting on validation MAP.
pub fn train(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    images: &FeatureBank,
    texts: &FeatureBank,
    variant: DatasetVariant,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(r) = records.iter().find(|r| r.split.is_none()) {
        return Err(Error::validation(
            "split",
            format!("record {:?} has no split", r.id),
        ));
    }
    let base_train: Vec<SampleRecord> = records
        .iter()
        .filter(|r| r.is_split(Split::Train))
        .cloned()
        .collect();
    if base_train.len() < 2 {
        return Err(Error::validation(
            "split",
            "train split needs at least 2 records",
        ));
    }
    let val = selection_subset(records);
    if val.is_empty() {
        return Err(Error::validation("split", "validation split is empty"));
    }
    let train_records = apply_variant(&base_train, variant, cfg.seed)?;
    let data = gather_training(&train_records, images, texts)?;
    for r in &val {
        if !images.contains(&r.image_feature_id) {
            return Err(Error::UnknownId(r.image_feature_id.clone()));
        }
    }

    let mut init_rng = stream_rng(cfg.seed, streams::ENCODER_INIT);
    let mut enc_img = ProjectionEncoder::init(
        images.dim(),
        cfg.hidden_dim,
        cfg.output_dim,
        cfg.linear_bypass,
        &mut init_rng,
    )?;
    let mut enc_txt = ProjectionEncoder::init(
        texts.dim(),
        cfg.hidden_dim,
        cfg.output_dim,
        cfg.linear_bypass,
        &mut init_rng,
    )?;
    let lens = |e: &ProjectionEncoder| e.param_slices().iter().map(|s| s.len()).collect::<Vec<_>>();
    let mut block_lens = lens(&enc_img);
    block_lens.extend(lens(&enc_txt));
    let mut opt = AdamW::new(&block_lens, cfg.weight_decay);

    let n = train_records.len();
    let batches_per_epoch = epoch_chunks(&(0..n).collect::<Vec<_>>(), cfg.batch_size).len();
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut shuffle_rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, EncoderPair)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_total, mut sum_clip, mut sum_moral) = (0.0, 0.0, 0.0);
        let mut lr = cfg.learning_rate;
        let chunks = epoch_chunks(&order, cfg.batch_size);
        for chunk in &chunks {
            let xi = data.image.select_rows(chunk);
            let xt = data.text.select_rows(chunk);
            let labels: Vec<(MoralLabelVector, MoralLabelVector)> = chunk
                .iter()
                .map(|&i| (data.labels[i], data.labels[i]))
                .collect();
            let (ei, cache_i) = enc_img.forward(&xi)?;
            let (et, cache_t) = enc_txt.forward(&xt)?;
            let report = total_loss(&ei, &et, &labels, cfg)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, step {step}"
                )));
            }
            let gi = enc_img.backward(&cache_i, &report.gradients.image);
            let gt = enc_txt.backward(&cache_t, &report.gradients.text);
            lr = cfg.schedule.lr_at(cfg.learning_rate, step, total_steps);
            let mut params = enc_img.param_slices_mut();
            params.extend(enc_txt.param_slices_mut());
            let mut grads = gi.slices();
            grads.extend(gt.slices());
            opt.step(params, grads, lr)?;
            step += 1;
            sum_total += report.total;
            sum_clip += report.clip_term;
            sum_moral += report.moral_term;
        }
        if !enc_img.is_finite() || !enc_txt.is_finite() {
            return Err(Error::NonFinite(format!(
                "encoder parameters after epoch {epoch}"
            )));
        }
        let nb = chunks.len() as f64;
        let val_map = image_map(&enc_img, &val, images)?;
        history.epochs.push(EpochRecord {
            epoch,
            total: sum_total / nb,
            clip_term: sum_clip / nb,
            moral_term: sum_moral / nb,
            val_map,
            learning_rate: lr,
        });
        let improved = match &best {
            None => true,
            Some((_, best_map, _)) => {
                val_map > *best_map || (best_map.is_nan() && !val_map.is_nan())
            }
        };
        if improved {
            let pair = EncoderPair {
                image: enc_img.clone(),
                text: enc_txt.clone(),
            };
            best = Some((epoch, val_map, pair));
        }
    }

    let (best_epoch, best_val_map, best_pair) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: EncoderPair {
            image: enc_img,
            text: enc_txt,
        },
        best: best_pair,
        best_epoch,
        best_val_map,
        history,
    })
}
