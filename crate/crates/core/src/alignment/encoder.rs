//! Two-layer projection head: `W2 · tanh(W1 x + b1) + b2`, plus an optional
//! trainable linear bypass `P x`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionEncoder {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bypass: Option<Matrix>,
}

/// Activations kept from the forward pass for backpropagation.
pub struct ForwardCache {
    input: Matrix,
    hidden: Matrix,
}

/// Same layout as [`ProjectionEncoder`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub bypass: Option<Matrix>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl ProjectionEncoder {
    /// Uniform Glorot weights, zero biases.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        linear_bypass: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        let w1 = glorot(hidden_dim, input_dim, rng);
        let w2 = glorot(output_dim, hidden_dim, rng);
        let bypass = linear_bypass.then(|| glorot(output_dim, input_dim, rng));
        Ok(ProjectionEncoder {
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; output_dim],
            bypass,
        })
    }

    pub fn zeros(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        linear_bypass: bool,
    ) -> Self {
        ProjectionEncoder {
            w1: Matrix::zeros(hidden_dim, input_dim),
            b1: vec![0.0; hidden_dim],
            w2: Matrix::zeros(output_dim, hidden_dim),
            b2: vec![0.0; output_dim],
            bypass: linear_bypass.then(|| Matrix::zeros(output_dim, input_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: input.cols(),
            });
        }
        let mut hidden = input.matmul_t(&self.w1);
        for i in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(i).iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
        }
        let mut out = hidden.matmul_t(&self.w2);
        if let Some(p) = &self.bypass {
            out.add_scaled(&input.matmul_t(p), 1.0);
        }
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.b2) {
                *o += b;
            }
        }
        Ok((
            out,
            ForwardCache {
                input: input.clone(),
                hidden,
            },
        ))
    }

    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        self.forward(input).map(|(out, _)| out)
    }

    pub fn backward(&self, cache: &ForwardCache, d_out: &Matrix) -> EncoderGrads {
        let w2 = d_out.t_matmul(&cache.hidden);
        let b2 = column_sums(d_out);
        let bypass = self.bypass.as_ref().map(|_| d_out.t_matmul(&cache.input));
        let mut dz = d_out.matmul(&self.w2);
        for (d, h) in dz.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            *d *= 1.0 - h * h;
        }
        let w1 = dz.t_matmul(&cache.input);
        let b1 = column_sums(&dz);
        EncoderGrads {
            w1,
            b1,
            w2,
            b2,
            bypass,
        }
    }

    /// Parameter blocks in a fixed order: w1, b1, w2, b2, bypass.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
        ];
        if let Some(p) = &mut self.bypass {
            v.push(p.as_mut_slice());
        }
        v
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2];
        if let Some(p) = &self.bypass {
            v.push(p.as_slice());
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Named parameter tensors for checkpointing (biases as 1-row matrices).
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let row = |v: &Vec<f64>| Matrix::from_vec(1, v.len(), v.clone()).expect("shape");
        let mut out = vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), row(&self.b1)),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), row(&self.b2)),
        ];
        if let Some(p) = &self.bypass {
            out.push((format!("{prefix}.bypass"), p.clone()));
        }
        out
    }

    pub fn from_named_tensors(
        prefix: &str,
        lookup: impl Fn(&str) -> Option<Matrix>,
    ) -> Result<Self> {
        let need = |name: &str| {
            lookup(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {prefix}.{name}")))
        };
        let w1 = need("w1")?;
        let b1 = need("b1")?.into_vec();
        let w2 = need("w2")?;
        let b2 = need("b2")?.into_vec();
        let bypass = lookup(&format!("{prefix}.bypass"));
        let enc = ProjectionEncoder {
            w1,
            b1,
            w2,
            b2,
            bypass,
        };
        enc.check_shapes()?;
        Ok(enc)
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, i) = self.w1.shape();
        let o = self.w2.rows();
        let ok = self.b1.len() == h
            && self.w2.cols() == h
            && self.b2.len() == o
            && self.bypass.as_ref().is_none_or(|p| p.shape() == (o, i));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("inconsistent encoder tensor shapes"))
        }
    }
}

impl EncoderGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2];
        if let Some(p) = &self.bypass {
            v.push(p.as_slice());
        }
        v
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Embeds every row of a feature bank; output rows keep the bank's ids and order.
pub fn encode(encoder: &ProjectionEncoder, features: &FeatureBank) -> Result<FeatureBank> {
    if features.dim() != encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.input_dim(),
            found: features.dim(),
        });
    }
    let out = encoder.apply(&features.to_matrix())?;
    FeatureBank::from_matrix(features.ids(), &out)
}
