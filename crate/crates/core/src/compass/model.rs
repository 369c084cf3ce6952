use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::{Foundation, MoralLabelVector, Polarity};
use crate::linalg::Matrix;

pub const N_HEADS: usize = 5;
pub const N_CLASSES: usize = 3;

/// Class probabilities per foundation, indexed by [`Polarity::class_index`].
pub type HeadProbabilities = [[f64; N_CLASSES]; N_HEADS];

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `3 × trunk_dim`.
    pub weight: Matrix,
    pub bias: [f64; N_CLASSES],
}

/// Shared affine trunk `W x + b` followed by five affine 3-way heads.
#[derive(Clone, Debug, PartialEq)]
pub struct CompassModel {
    /// `trunk_dim × input_dim`.
    pub trunk_weight: Matrix,
    pub trunk_bias: Vec<f64>,
    /// One per foundation, in [`Foundation::ALL`] order.
    pub heads: Vec<Head>,
}

/// Same layout as [`CompassModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct CompassGrads {
    pub trunk_weight: Matrix,
    pub trunk_bias: Vec<f64>,
    pub heads: Vec<Head>,
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl CompassModel {
    pub fn zeros(input_dim: usize, trunk_dim: usize) -> Self {
        CompassModel {
            trunk_weight: Matrix::zeros(trunk_dim, input_dim),
            trunk_bias: vec![0.0; trunk_dim],
            heads: (0..N_HEADS)
                .map(|_| Head {
                    weight: Matrix::zeros(N_CLASSES, trunk_dim),
                    bias: [0.0; N_CLASSES],
                })
                .collect(),
        }
    }

    /// Identity-like trunk (Glorot when the dims differ) and Glorot heads, zero biases.
    pub fn init<R: Rng>(input_dim: usize, trunk_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || trunk_dim == 0 {
            return Err(Error::invalid("compass dimensions must be positive"));
        }
        let mut m = CompassModel::zeros(input_dim, trunk_dim);
        m.trunk_weight = if input_dim == trunk_dim {
            Matrix::identity(input_dim)
        } else {
            glorot(trunk_dim, input_dim, rng)
        };
        for h in &mut m.heads {
            h.weight = glorot(N_CLASSES, trunk_dim, rng);
        }
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.trunk_weight.cols()
    }

    pub fn trunk_dim(&self) -> usize {
        self.trunk_weight.rows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let t = self.trunk_dim();
        let bad = |what: &str| {
            Err(Error::invalid(format!(
                "compass {what} has the wrong shape"
            )))
        };
        if self.trunk_bias.len() != t {
            return bad("trunk bias");
        }
        if self.heads.len() != N_HEADS {
            return Err(Error::invalid(format!(
                "compass needs {N_HEADS} heads, found {}",
                self.heads.len()
            )));
        }
        if self
            .heads
            .iter()
            .any(|h| h.weight.shape() != (N_CLASSES, t))
        {
            return bad("head weight");
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.trunk_weight.is_finite()
            && self.trunk_bias.iter().all(|v| v.is_finite())
            && self
                .heads
                .iter()
                .all(|h| h.weight.is_finite() && h.bias.iter().all(|v| v.is_finite()))
    }

    fn trunk(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let mut h = x.matmul_t(&self.trunk_weight);
        for i in 0..h.rows() {
            h.row_mut(i)
                .iter_mut()
                .zip(&self.trunk_bias)
                .for_each(|(v, b)| *v += b);
        }
        Ok(h)
    }

    /// Raw logits, `[sample][head][class]`.
    pub fn logits(&self, x: &Matrix) -> Result<Vec<HeadProbabilities>> {
        let h = self.trunk(x)?;
        Ok(head_logits(self, &h))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Vec<HeadProbabilities>> {
        Ok(self.logits(x)?.iter().map(softmax_heads).collect())
    }

    /// Summed per-head mean cross-entropy and its gradients, computed from
    /// logits for numerical stability.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        labels: &[MoralLabelVector],
    ) -> Result<(f64, CompassGrads)> {
        if labels.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                found: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = x.rows();
        let h = self.trunk(x)?;
        let logits = head_logits(self, &h);
        let mut loss = 0.0;
        let mut grads = CompassModel::zeros(self.input_dim(), self.trunk_dim());
        let mut dh = Matrix::zeros(n, self.trunk_dim());
        for (i, (z, label)) in logits.iter().zip(labels).enumerate() {
            for (f, found) in Foundation::ALL.iter().enumerate() {
                let y = label.get(*found).class_index();
                let lse = log_sum_exp(&z[f]);
                loss += (lse - z[f][y]) / n as f64;
                let head = &self.heads[f];
                let g = &mut grads.heads[f];
                for c in 0..N_CLASSES {
                    let mut d = (z[f][c] - lse).exp();
                    if c == y {
                        d -= 1.0;
                    }
                    d /= n as f64;
                    g.bias[c] += d;
                    let hi = h.row(i);
                    let gw = g.weight.row_mut(c);
                    for k in 0..hi.len() {
                        gw[k] += d * hi[k];
                    }
                    let wc = head.weight.row(c);
                    let dhi = dh.row_mut(i);
                    for k in 0..wc.len() {
                        dhi[k] += d * wc[k];
                    }
                }
            }
        }
        grads.trunk_weight = dh.t_matmul(x);
        for i in 0..n {
            grads
                .trunk_bias
                .iter_mut()
                .zip(dh.row(i))
                .for_each(|(b, d)| *b += d);
        }
        Ok((
            loss,
            CompassGrads {
                trunk_weight: grads.trunk_weight,
                trunk_bias: grads.trunk_bias,
                heads: grads.heads,
            },
        ))
    }

    /// Parameter blocks in a fixed order: trunk weight, trunk bias, then
    /// weight and bias of each head.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.trunk_weight.as_slice(), self.trunk_bias.as_slice()];
        for h in &self.heads {
            out.push(h.weight.as_slice());
            out.push(&h.bias);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.trunk_weight.as_mut_slice(),
            self.trunk_bias.as_mut_slice(),
        ];
        for h in &mut self.heads {
            out.push(h.weight.as_mut_slice());
            out.push(&mut h.bias);
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let row = |v: &[f64]| Matrix::from_vec(1, v.len(), v.to_vec()).expect("shape");
        let mut out = vec![
            ("trunk.weight".to_string(), self.trunk_weight.clone()),
            ("trunk.bias".to_string(), row(&self.trunk_bias)),
        ];
        for (f, h) in Foundation::ALL.iter().zip(&self.heads) {
            out.push((format!("head.{}.weight", f.key()), h.weight.clone()));
            out.push((format!("head.{}.bias", f.key()), row(&h.bias)));
        }
        out
    }

    pub fn from_named_tensors(lookup: impl Fn(&str) -> Option<Matrix>) -> Result<Self> {
        let need = |name: &str| {
            lookup(name).ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))
        };
        let mut heads = Vec::with_capacity(N_HEADS);
        for f in Foundation::ALL {
            let bias = need(&format!("head.{}.bias", f.key()))?.into_vec();
            heads.push(Head {
                weight: need(&format!("head.{}.weight", f.key()))?,
                bias: bias
                    .try_into()
                    .map_err(|_| Error::invalid("compass head bias must have 3 entries"))?,
            });
        }
        let m = CompassModel {
            trunk_weight: need("trunk.weight")?,
            trunk_bias: need("trunk.bias")?.into_vec(),
            heads,
        };
        m.check_shapes()?;
        Ok(m)
    }
}

impl CompassGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.trunk_weight.as_slice(), self.trunk_bias.as_slice()];
        for h in &self.heads {
            out.push(h.weight.as_slice());
            out.push(&h.bias);
        }
        out
    }
}

fn head_logits(m: &CompassModel, h: &Matrix) -> Vec<HeadProbabilities> {
    (0..h.rows())
        .map(|i| {
            let hi = h.row(i);
            let mut z = [[0.0; N_CLASSES]; N_HEADS];
            for (f, head) in m.heads.iter().enumerate() {
                for c in 0..N_CLASSES {
                    z[f][c] = head.bias[c]
                        + head
                            .weight
                            .row(c)
                            .iter()
                            .zip(hi)
                            .map(|(w, x)| w * x)
                            .sum::<f64>();
                }
            }
            z
        })
        .collect()
}

fn log_sum_exp(z: &[f64; N_CLASSES]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_heads(z: &HeadProbabilities) -> HeadProbabilities {
    let mut p = [[0.0; N_CLASSES]; N_HEADS];
    for f in 0..N_HEADS {
        let lse = log_sum_exp(&z[f]);
        for c in 0..N_CLASSES {
            p[f][c] = (z[f][c] - lse).exp();
        }
    }
    p
}

/// Sum over foundations of the mean cross-entropy of that head.
pub fn compass_loss(
    probabilities: &[HeadProbabilities],
    labels: &[MoralLabelVector],
) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probabilities.len(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    for (i, p) in probabilities.iter().enumerate() {
        for (f, triple) in p.iter().enumerate() {
            let s: f64 = triple.iter().sum();
            if (s - 1.0).abs() > 1e-6 || triple.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::invalid(format!(
                    "sample {i}, head {f}: probabilities sum to {s}"
                )));
            }
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for f in Foundation::ALL {
        let head: f64 = probabilities
            .iter()
            .zip(labels)
            .map(|(p, l)| -p[f.index()][l.get(f).class_index()].ln())
            .sum();
        total += head / n;
    }
    Ok(total)
}

/// Argmax per head; ties resolve to neither, then vice, then virtue.
pub fn argmax_label(p: &HeadProbabilities) -> MoralLabelVector {
    const PRIORITY: [Polarity; 3] = [Polarity::Neither, Polarity::Vice, Polarity::Virtue];
    let mut out = MoralLabelVector::NEUTRAL;
    for f in Foundation::ALL {
        let row = &p[f.index()];
        let mut best = PRIORITY[0];
        for cand in &PRIORITY[1..] {
            if row[cand.class_index()] > row[best.class_index()] {
                best = *cand;
            }
        }
        out.set(f, best);
    }
    out
}

pub fn predict_labels(model: &CompassModel, x: &Matrix) -> Result<Vec<MoralLabelVector>> {
    Ok(model.logits(x)?.iter().map(argmax_label).collect())
}
