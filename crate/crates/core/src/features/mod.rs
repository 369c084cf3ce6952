//! Feature banks, normalization and cosine similarity.

mod format;
mod synth;

use std::collections::HashMap;

pub use format::{decode_bank, encode_bank, read_bank, write_bank, BANK_MAGIC, BANK_VERSION};
pub use synth::{synthesize_corpus, SyntheticCorpus, SyntheticCorpusConfig};

use crate::error::{Error, FormatError, Result};
use crate::linalg::{dot, l2_norm, Matrix};

/// Dense matrix of `f32` vectors keyed by unique sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureBank {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature bank dimension must be at least 1"));
        }
        Ok(FeatureBank {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Result<Self> {
        let mut bank = FeatureBank::new(dim)?;
        bank.ids.reserve(rows);
        bank.data.reserve(rows * dim);
        bank.index.reserve(rows);
        Ok(bank)
    }

    /// Builds a bank from `f64` rows, rounding to `f32`.
    pub fn from_matrix<S: AsRef<str>>(ids: &[S], matrix: &Matrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::DimensionMismatch {
                expected: matrix.rows(),
                found: ids.len(),
            });
        }
        let mut bank = FeatureBank::with_capacity(matrix.cols(), ids.len())?;
        for (id, row) in ids.iter().zip(matrix.row_iter()) {
            let v: Vec<f32> = row.iter().map(|&x| x as f32).collect();
            bank.push(id.as_ref(), &v)?;
        }
        Ok(bank)
    }

    pub fn push(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(FormatError::IdTooLong(id.len()).into());
        }
        if self.index.contains_key(&id) {
            return Err(FormatError::DuplicateId(id).into());
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .map(String::as_str)
            .zip(self.data.chunks_exact(self.dim))
    }

    /// All rows widened to `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|&x| x as f64).collect();
        Matrix::from_vec(self.len(), self.dim, data).expect("bank shape is consistent")
    }

    /// Rows for the given ids, in the given order, widened to `f64`.
    pub fn gather<S: AsRef<str>>(&self, ids: &[S]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let row = self
                .get(id.as_ref())
                .ok_or_else(|| Error::UnknownId(id.as_ref().to_string()))?;
            data.extend(row.iter().map(|&x| x as f64));
        }
        Matrix::from_vec(ids.len(), self.dim, data)
    }

    pub(crate) fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.dim, p % self.dim))
    }
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Row-normalized copy of a matrix.
pub fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let unit = normalize(m.row(i))
            .map_err(|_| Error::DegenerateInput(format!("row {i} has zero norm")))?;
        out.row_mut(i).copy_from_slice(&unit);
    }
    Ok(out)
}

/// Pairwise similarities, row-major, optionally divided by a temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub temperature_applied: bool,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }
}

/// Entry `(i, j)` is the cosine of `a_i` and `b_j`, divided by `temperature` when given.
pub fn cosine_matrix(
    a: &FeatureBank,
    b: &FeatureBank,
    temperature: Option<f64>,
) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if let Some(t) = temperature {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {t}"
            )));
        }
    }
    let an = normalize_rows(&a.to_matrix())?;
    let bn = normalize_rows(&b.to_matrix())?;
    let scale = temperature.map_or(1.0, |t| 1.0 / t);
    let mut values = Vec::with_capacity(an.rows() * bn.rows());
    for ra in an.row_iter() {
        for rb in bn.row_iter() {
            values.push(dot(ra, rb) * scale);
        }
    }
    Ok(SimilarityMatrix {
        n_rows: an.rows(),
        n_cols: bn.rows(),
        values,
        temperature_applied: temperature.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(rows: &[&[f32]]) -> FeatureBank {
        let mut b = FeatureBank::new(rows[0].len()).unwrap();
        for (i, r) in rows.iter().enumerate() {
            b.push(format!("s{i}"), r).unwrap();
        }
        b
    }

    #[test]
    fn normalize_examples() {
        let v = normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = bank(&[&[1.0, 0.0], &[0.3, 0.7], &[-2.0, 1.0]]);
        let m = cosine_matrix(&a, &a, None).unwrap();
        for i in 0..3 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-12);
        }
        assert!(!m.temperature_applied);

        let x = bank(&[&[1.0, 0.0]]);
        let y = bank(&[&[0.0, 2.0]]);
        assert_eq!(cosine_matrix(&x, &y, Some(0.07)).unwrap().get(0, 0), 0.0);

        let z = bank(&[&[5.0, 0.0]]);
        let parallel = cosine_matrix(&x, &z, Some(0.07)).unwrap();
        assert!((parallel.get(0, 0) - 1.0 / 0.07).abs() < 1e-12);
        assert!((parallel.get(0, 0) - 14.2857).abs() < 1e-4);
    }

    #[test]
    fn cosine_errors() {
        let a = bank(&[&[1.0, 0.0]]);
        let b = bank(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            cosine_matrix(&a, &b, None),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(cosine_matrix(&a, &a, Some(0.0)).is_err());
        assert!(cosine_matrix(&a, &a, Some(-1.0)).is_err());
    }

    #[test]
    fn push_rejects_duplicates_and_bad_dims() {
        let mut b = FeatureBank::new(2).unwrap();
        b.push("a", &[1.0, 2.0]).unwrap();
        assert!(matches!(
            b.push("a", &[1.0, 2.0]),
            Err(Error::Format(FormatError::DuplicateId(_)))
        ));
        assert!(matches!(
            b.push("b", &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(FeatureBank::new(0).is_err());
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, dim)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..20)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-6))) {
            let once = normalize(&v).unwrap();
            prop_assert!((l2_norm(&once) - 1.0).abs() < 1e-6);
            let twice = normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_bounded_and_transposable(
            rows_a in prop::collection::vec(vec_strategy(4), 1..6),
            rows_b in prop::collection::vec(vec_strategy(4), 1..6),
        ) {
            let a = bank(&rows_a.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let b = bank(&rows_b.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let ab = cosine_matrix(&a, &b, None).unwrap();
            let ba = cosine_matrix(&b, &a, None).unwrap();
            for i in 0..a.len() {
                for j in 0..b.len() {
                    prop_assert!(ab.get(i, j).abs() <= 1.0 + 1e-6);
                    prop_assert!((ab.get(i, j) - ba.get(j, i)).abs() < 1e-6);
                }
            }
        }
    }
}
