use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::N_CLASSES;
use crate::error::{Error, Result};
use crate::labels::{Foundation, MoralLabelVector};

/// Macro scores over the three classes; precision or recall of a class with
/// no predicted or no true members counts as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompassMetrics {
    /// In [`Foundation::ALL`] order.
    pub per_foundation: Vec<(Foundation, HeadMetrics)>,
    /// Unweighted mean over foundations.
    pub average: HeadMetrics,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `confusion[true][pred]`.
pub fn head_metrics(confusion: &[[usize; N_CLASSES]; N_CLASSES]) -> HeadMetrics {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..N_CLASSES).map(|c| confusion[c][c]).sum();
    let (mut p, mut r, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..N_CLASSES {
        let tp = confusion[c][c];
        let predicted: usize = (0..N_CLASSES).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let pc = ratio(tp, predicted);
        let rc = ratio(tp, actual);
        p += pc;
        r += rc;
        f1 += if pc + rc > 0.0 {
            2.0 * pc * rc / (pc + rc)
        } else {
            0.0
        };
    }
    let k = N_CLASSES as f64;
    HeadMetrics {
        accuracy: ratio(correct, total),
        precision: p / k,
        recall: r / k,
        f1: f1 / k,
    }
}

pub fn compass_metrics(
    predicted: &[MoralLabelVector],
    truth: &[MoralLabelVector],
) -> Result<CompassMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let per_foundation: Vec<(Foundation, HeadMetrics)> = Foundation::ALL
        .iter()
        .map(|&f| {
            let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
            for (p, t) in predicted.iter().zip(truth) {
                confusion[t.get(f).class_index()][p.get(f).class_index()] += 1;
            }
            (f, head_metrics(&confusion))
        })
        .collect();
    let k = per_foundation.len() as f64;
    let mean =
        |g: fn(&HeadMetrics) -> f64| per_foundation.iter().map(|(_, m)| g(m)).sum::<f64>() / k;
    let average = HeadMetrics {
        accuracy: mean(|m| m.accuracy),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(CompassMetrics {
        per_foundation,
        average,
    })
}

impl CompassMetrics {
    /// Header `foundation,accuracy,precision,recall,f1`; last row is `average`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["foundation", "accuracy", "precision", "recall", "f1"])?;
        let rows = self
            .per_foundation
            .iter()
            .map(|(f, m)| (f.key(), m))
            .chain(std::iter::once(("average", &self.average)));
        for (name, m) in rows {
            w.write_record([
                name.to_string(),
                m.accuracy.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::parse_label;

    #[test]
    fn perfect_predictions() {
        let t: Vec<_> = ["vxnnn", "nnnnn", "xvvxn"]
            .iter()
            .map(|s| parse_label(s).unwrap())
            .collect();
        let m = compass_metrics(&t, &t).unwrap();
        assert_eq!(m.average.accuracy, 1.0);
        // classes absent from both truth and predictions score 0
        let (_, purity) = m.per_foundation[4];
        assert_eq!(purity.accuracy, 1.0);
        assert!((purity.f1 - 1.0 / 3.0).abs() < 1e-15);
        let (_, care) = m.per_foundation[0];
        assert_eq!(care.f1, 1.0);
    }

    #[test]
    fn all_neither_on_balanced_classes() {
        // one head: 2 virtue, 2 vice, 2 neither, all predicted neither
        let c = [[0, 0, 2], [0, 0, 2], [0, 0, 2]];
        let m = head_metrics(&c);
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - (2.0 / 6.0) / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        // neither: p = 1/3, r = 1, f1 = 0.5
        assert!((m.f1 - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_confusion() {
        let c = [[3, 1, 0], [1, 2, 1], [0, 0, 2]];
        let m = head_metrics(&c);
        let p = [3.0 / 4.0, 2.0 / 3.0, 2.0 / 3.0];
        let r = [3.0 / 4.0, 2.0 / 4.0, 1.0];
        let f: f64 = (0..3).map(|k| 2.0 * p[k] * r[k] / (p[k] + r[k])).sum();
        assert!((m.precision - p.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        assert!((m.recall - r.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        assert!((m.f1 - f / 3.0).abs() < 1e-15);
        assert!((m.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(compass_metrics(&[], &[]).is_err());
        assert!(compass_metrics(&[MoralLabelVector::NEUTRAL], &[]).is_err());
    }
}
