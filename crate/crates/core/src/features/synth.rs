//! Desk-scale synthetic stand-in for extracted image/text features.
//!
//! Every sample gets a polarity class drawn from the configured distribution
//! and a concrete label consistent with that class. Image and caption vectors
//! share the class direction (scaled by `moral_signal_strength`) and a
//! per-sample content vector from a subspace orthogonal to the class
//! directions, plus modality-specific noise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FeatureBank;
use crate::config::{parse_value, unknown_key, KvConfig};
use crate::dataset::{Provenance, SampleRecord, Source};
use crate::error::{Error, Result};
use crate::labels::{collapse_polarity, Foundation, MoralLabelVector, Polarity, PolarityClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_samples: usize,
    pub feature_dim: usize,
    pub moral_signal_strength: f64,
    pub label_distribution: BTreeMap<PolarityClass, f64>,
    pub noise_scale: f64,
    /// Per-coordinate scale of the per-sample content vector shared by image
    /// and captions.
    pub content_scale: f64,
    /// Dimension of the content subspace, orthogonal to the class directions;
    /// clamped to the room left by them.
    pub content_dim: usize,
    /// Length of a per-foundation polarity direction added for every active
    /// foundation; makes each foundation's label linearly decodable.
    pub foundation_signal: f64,
    pub captions_per_sample: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_samples: 2000,
            feature_dim: 64,
            moral_signal_strength: 5.0,
            label_distribution: BTreeMap::from([
                (PolarityClass::Virtue, 0.3),
                (PolarityClass::Vice, 0.3),
                (PolarityClass::Neutral, 0.3),
                (PolarityClass::Mixed, 0.1),
            ]),
            noise_scale: 1.0,
            content_scale: 3.0,
            content_dim: 16,
            foundation_signal: 0.0,
            captions_per_sample: 3,
            seed: 0,
        }
    }
}

/// `label_distribution` is written `virtue:0.3,vice:0.3,neutral:0.3,mixed:0.1`.
impl KvConfig for SyntheticCorpusConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_samples" => self.n_samples = parse_value(key, value)?,
            "feature_dim" => self.feature_dim = parse_value(key, value)?,
            "moral_signal_strength" => self.moral_signal_strength = parse_value(key, value)?,
            "label_distribution" => {
                let mut dist = BTreeMap::new();
                for part in value.split(',').filter(|p| !p.trim().is_empty()) {
                    let (class, p) = part.split_once(':').ok_or_else(|| {
                        Error::validation(key, format!("expected class:probability, got {part:?}"))
                    })?;
                    let class: PolarityClass = class
                        .trim()
                        .parse()
                        .map_err(|_| Error::validation(key, format!("unknown class {class:?}")))?;
                    dist.insert(class, parse_value(key, p.trim())?);
                }
                self.label_distribution = dist;
            }
            "noise_scale" => self.noise_scale = parse_value(key, value)?,
            "content_scale" => self.content_scale = parse_value(key, value)?,
            "content_dim" => self.content_dim = parse_value(key, value)?,
            "foundation_signal" => self.foundation_signal = parse_value(key, value)?,
            "captions_per_sample" => self.captions_per_sample = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let dist = self
            .label_distribution
            .iter()
            .map(|(c, p)| format!("{c}:{p}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("n_samples", self.n_samples.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            (
                "moral_signal_strength",
                self.moral_signal_strength.to_string(),
            ),
            ("label_distribution", dist),
            ("noise_scale", self.noise_scale.to_string()),
            ("content_scale", self.content_scale.to_string()),
            ("content_dim", self.content_dim.to_string()),
            ("foundation_signal", self.foundation_signal.to_string()),
            ("captions_per_sample", self.captions_per_sample.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.captions_per_sample == 0 {
            return Err(Error::invalid("captions_per_sample must be positive"));
        }
        if !(self.moral_signal_strength >= 0.0) || !self.moral_signal_strength.is_finite() {
            return Err(Error::invalid(
                "moral_signal_strength must be finite and >= 0",
            ));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("noise_scale must be finite and > 0"));
        }
        if !(self.content_scale >= 0.0) || !self.content_scale.is_finite() {
            return Err(Error::invalid("content_scale must be finite and >= 0"));
        }
        if !(self.foundation_signal >= 0.0) || !self.foundation_signal.is_finite() {
            return Err(Error::invalid("foundation_signal must be finite and >= 0"));
        }
        if self.foundation_signal > 0.0
            && PolarityClass::ALL.len() + FOUNDATION_DIRECTIONS > self.feature_dim
        {
            return Err(Error::invalid(format!(
                "feature_dim {} is too small for per-foundation directions",
                self.feature_dim
            )));
        }
        if self.label_distribution.values().any(|p| !(*p >= 0.0)) {
            return Err(Error::invalid("label probabilities must be non-negative"));
        }
        let total: f64 = self.label_distribution.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "label distribution sums to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub records: Vec<SampleRecord>,
    /// Keyed by record id.
    pub images: FeatureBank,
    /// Keyed by caption text.
    pub texts: FeatureBank,
    /// Unit class directions, indexed by [`PolarityClass::index`].
    pub class_directions: Vec<Vec<f64>>,
    /// Orthonormal basis of the content subspace.
    pub content_basis: Vec<Vec<f64>>,
    /// `2·foundation + class_index` for virtue/vice; empty when
    /// `foundation_signal` is 0.
    pub foundation_directions: Vec<Vec<f64>>,
}

const FOUNDATION_DIRECTIONS: usize = 2 * Foundation::ALL.len();

pub fn synthesize_corpus(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.feature_dim;
    let n_foundation = if cfg.foundation_signal > 0.0 {
        FOUNDATION_DIRECTIONS
    } else {
        0
    };
    let content_dim = if cfg.content_scale > 0.0 {
        cfg.content_dim
            .min(dim.saturating_sub(PolarityClass::ALL.len() + n_foundation))
    } else {
        0
    };
    let mut basis = orthonormal_basis(
        dim,
        PolarityClass::ALL.len() + content_dim + n_foundation,
        &mut rng,
    );
    let foundation_directions = basis.split_off(PolarityClass::ALL.len() + content_dim);
    let content_basis = basis.split_off(PolarityClass::ALL.len());
    let directions = basis;
    let classes: Vec<(PolarityClass, f64)> = cfg
        .label_distribution
        .iter()
        .map(|(c, p)| (*c, *p))
        .collect();

    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut images = FeatureBank::with_capacity(dim, cfg.n_samples)?;
    let mut texts = FeatureBank::with_capacity(dim, cfg.n_samples * cfg.captions_per_sample)?;
    let width = cfg.n_samples.max(1).to_string().len();

    for i in 0..cfg.n_samples {
        let class = draw_class(&classes, &mut rng);
        let label = draw_label(class, &mut rng);
        let id = format!("syn-{i:0width$}");
        let mut signal: Vec<f64> = directions[class.index()]
            .iter()
            .map(|d| d * cfg.moral_signal_strength)
            .collect();
        if n_foundation > 0 {
            for f in Foundation::ALL {
                let p = label.get(f);
                if p != Polarity::Neither {
                    let d = &foundation_directions[2 * f.index() + p.class_index()];
                    signal
                        .iter_mut()
                        .zip(d)
                        .for_each(|(s, v)| *s += cfg.foundation_signal * v);
                }
            }
        }
        let mut content = vec![0.0; dim];
        for b in &content_basis {
            let z = cfg.content_scale * gauss(&mut rng);
            content.iter_mut().zip(b).for_each(|(c, v)| *c += z * v);
        }
        let sample_vec = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..dim)
                .map(|k| (signal[k] + content[k] + cfg.noise_scale * gauss(rng)) as f32)
                .collect()
        };
        images.push(id.clone(), &sample_vec(&mut rng))?;
        let mut captions = Vec::with_capacity(cfg.captions_per_sample);
        for k in 0..cfg.captions_per_sample {
            let caption = format!("synthetic scene {i}, description {}", k + 1);
            texts.push(caption.clone(), &sample_vec(&mut rng))?;
            captions.push(caption);
        }
        records.push(SampleRecord {
            id: id.clone(),
            source: Source::Synthetic,
            image_feature_id: id,
            captions,
            label,
            split: None,
            provenance: Provenance::Synthetic,
        });
    }

    Ok(SyntheticCorpus {
        records,
        images,
        texts,
        class_directions: directions,
        content_basis,
        foundation_directions,
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `count` unit directions, mutually orthogonal while `count <= dim`.
fn orthonormal_basis(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        if basis.len() < dim {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

fn draw_class(classes: &[(PolarityClass, f64)], rng: &mut ChaCha8Rng) -> PolarityClass {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (class, p) in classes {
        acc += p;
        if u < acc {
            return *class;
        }
    }
    classes
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(c, _)| *c)
        .expect("validated distribution has positive mass")
}

/// A concrete label whose collapsed class is `class`. Each foundation is
/// active independently with probability 1/2 (Virtue, Vice) or takes a
/// uniform ternary value (Mixed), redrawn until the class matches.
fn draw_label(class: PolarityClass, rng: &mut ChaCha8Rng) -> MoralLabelVector {
    loop {
        let mut label = MoralLabelVector::NEUTRAL;
        for f in Foundation::ALL {
            let p = match class {
                PolarityClass::Neutral => Polarity::Neither,
                PolarityClass::Virtue if rng.random_bool(0.5) => Polarity::Virtue,
                PolarityClass::Vice if rng.random_bool(0.5) => Polarity::Vice,
                PolarityClass::Virtue | PolarityClass::Vice => Polarity::Neither,
                PolarityClass::Mixed => {
                    Polarity::from_class_index(rng.random_range(0..3)).expect("class index below 3")
                }
            };
            label.set(f, p);
        }
        if collapse_polarity(&label) == class {
            return label;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = SyntheticCorpusConfig::default();
        cfg.apply_kv_text(
            "n_samples = 50\nlabel_distribution = virtue:0.5,vice:0.5\nfoundation_signal = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.label_distribution.len(), 2);
        let back = SyntheticCorpusConfig::from_kv_text(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("label_distribution", "sideways:1").is_err());
        assert!(cfg.set("bogus", "1").is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SyntheticCorpusConfig {
            n_samples: 50,
            feature_dim: 8,
            seed: 42,
            ..Default::default()
        };
        let a = synthesize_corpus(&cfg).unwrap();
        let b = synthesize_corpus(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.images, b.images);
        assert_eq!(a.texts, b.texts);
        let c = synthesize_corpus(&SyntheticCorpusConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn labels_match_drawn_class_and_banks_cover_records() {
        let cfg = SyntheticCorpusConfig {
            n_samples: 400,
            feature_dim: 16,
            ..Default::default()
        };
        let corpus = synthesize_corpus(&cfg).unwrap();
        let mut counts = BTreeMap::new();
        for r in &corpus.records {
            *counts.entry(collapse_polarity(&r.label)).or_insert(0usize) += 1;
            assert!(corpus.images.contains(&r.image_feature_id));
            assert_eq!(r.captions.len(), 3);
            assert!(r.captions.iter().all(|c| corpus.texts.contains(c)));
        }
        // 400 draws at p = 0.3 stay well inside [80, 160]
        for class in [
            PolarityClass::Virtue,
            PolarityClass::Vice,
            PolarityClass::Neutral,
        ] {
            assert!(
                (80..160).contains(&counts[&class]),
                "{class}: {}",
                counts[&class]
            );
        }
    }

    #[test]
    fn rejects_bad_distribution() {
        let mut cfg = SyntheticCorpusConfig::default();
        cfg.label_distribution.insert(PolarityClass::Mixed, 0.2);
        assert!(synthesize_corpus(&cfg).is_err());
        let cfg = SyntheticCorpusConfig {
            noise_scale: 0.0,
            ..Default::default()
        };
        assert!(synthesize_corpus(&cfg).is_err());
    }

    #[test]
    fn class_and_content_directions_are_orthonormal() {
        let corpus = synthesize_corpus(&SyntheticCorpusConfig {
            n_samples: 1,
            feature_dim: 24,
            content_dim: 8,
            ..Default::default()
        })
        .unwrap();
        let dirs: Vec<_> = corpus
            .class_directions
            .iter()
            .chain(&corpus.content_basis)
            .collect();
        assert_eq!(dirs.len(), 12);
        for (i, a) in dirs.iter().enumerate() {
            for (j, b) in dirs.iter().enumerate() {
                let d: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-12);
            }
        }
    }
}
