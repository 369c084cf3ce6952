//! Contrastive and moral alignment losses with analytic gradients.
//!
//! Both terms work on cosine similarities of row-normalized embeddings; the
//! returned gradients are with respect to the raw (unnormalized) embeddings.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::labels::{moral_similarity, MoralLabelVector};
use crate::linalg::{l2_norm, Matrix};

/// Gradients with respect to the image and text embedding batches.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGradients {
    pub image: Matrix,
    pub text: Matrix,
}

impl PairGradients {
    fn zeros_like(img: &Matrix, txt: &Matrix) -> Self {
        PairGradients {
            image: Matrix::zeros(img.rows(), img.cols()),
            text: Matrix::zeros(txt.rows(), txt.cols()),
        }
    }
}

/// How the moral target is compared with embedding similarity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoralScale {
    /// Temperature-scaled cosine against the [-1, 1] Jaccard target.
    #[default]
    Literal,
    /// Unscaled cosine against the same target.
    MatchScale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub clip_term: f64,
    pub moral_term: f64,
    pub gradients: PairGradients,
}

struct Normalized {
    unit: Matrix,
    norms: Vec<f64>,
}

fn normalize_batch(m: &Matrix, what: &str) -> Result<Normalized> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "{what} row {i} has norm {n}"
            )));
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows:
/// `dx = (du - u (u·du)) / |x|`.
fn through_normalization(n: &Normalized, d_unit: &Matrix) -> Matrix {
    let mut out = d_unit.clone();
    for i in 0..out.rows() {
        let u = n.unit.row(i);
        let proj: f64 = u.iter().zip(d_unit.row(i)).map(|(a, b)| a * b).sum();
        let inv = 1.0 / n.norms[i];
        for (o, ui) in out.row_mut(i).iter_mut().zip(u) {
            *o = (*o - ui * proj) * inv;
        }
    }
    out
}

fn check_pair(img: &Matrix, txt: &Matrix) -> Result<()> {
    if img.rows() == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if img.rows() != txt.rows() {
        return Err(Error::DimensionMismatch {
            expected: img.rows(),
            found: txt.rows(),
        });
    }
    if img.cols() != txt.cols() {
        return Err(Error::DimensionMismatch {
            expected: img.cols(),
            found: txt.cols(),
        });
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Backpropagates `d_logits` of `logits = scale * U_img U_txtᵀ`.
fn logits_backward(
    img: &Normalized,
    txt: &Normalized,
    d_logits: &Matrix,
    scale: f64,
) -> PairGradients {
    let d_img_unit = d_logits.matmul(&txt.unit).scaled(scale);
    let d_txt_unit = d_logits.t_matmul(&img.unit).scaled(scale);
    PairGradients {
        image: through_normalization(img, &d_img_unit),
        text: through_normalization(txt, &d_txt_unit),
    }
}

/// Symmetric cross-entropy over the temperature-scaled cosine logit matrix,
/// averaged over the image→text and text→image directions.
pub fn clip_contrastive_loss(img: &Matrix, txt: &Matrix, tau: f64) -> Result<(f64, PairGradients)> {
    check_pair(img, txt)?;
    check_temperature(tau)?;
    let n = img.rows();
    let ni = normalize_batch(img, "image")?;
    let nt = normalize_batch(txt, "text")?;
    let logits = ni.unit.matmul_t(&nt.unit).scaled(1.0 / tau);

    let row_soft = softmax_rows(&logits);
    let col_soft = softmax_rows(&logits.transpose()).transpose();

    let mut loss_rows = 0.0;
    let mut loss_cols = 0.0;
    for i in 0..n {
        loss_rows -= row_soft.ln_diag[i];
        loss_cols -= col_soft.ln_diag[i];
    }
    let loss = 0.5 * (loss_rows + loss_cols) / n as f64;

    let mut d_logits = row_soft.probs;
    d_logits.add_scaled(&col_soft.probs, 1.0);
    for i in 0..n {
        d_logits[(i, i)] -= 2.0;
    }
    d_logits.scale(0.5 / n as f64);
    let grads = logits_backward(&ni, &nt, &d_logits, 1.0 / tau);
    Ok((loss, grads))
}

struct Softmax {
    probs: Matrix,
    ln_diag: Vec<f64>,
}

impl Softmax {
    fn transpose(self) -> Softmax {
        Softmax {
            probs: self.probs.transpose(),
            ln_diag: self.ln_diag,
        }
    }
}

/// Row-wise softmax plus the log-probability of each diagonal entry.
fn softmax_rows(logits: &Matrix) -> Softmax {
    let mut probs = logits.clone();
    let mut ln_diag = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let row = probs.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let lse = max + sum.ln();
        ln_diag.push(logits[(i, i)] - lse);
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Softmax { probs, ln_diag }
}

/// Mean squared error between embedding similarity and moral similarity over
/// all image/text pairs `(i, j)`, with the diagonal excluded unless
/// `include_diagonal` is set.
pub fn moral_loss(
    img: &Matrix,
    txt: &Matrix,
    labels: &[(MoralLabelVector, MoralLabelVector)],
    tau: f64,
    include_diagonal: bool,
    scale_mode: MoralScale,
) -> Result<(f64, PairGradients)> {
    check_pair(img, txt)?;
    check_temperature(tau)?;
    let n = img.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if !include_diagonal && n < 2 {
        return Err(Error::invalid(
            "moral loss without the diagonal needs at least 2 samples",
        ));
    }
    let scale = match scale_mode {
        MoralScale::Literal => 1.0 / tau,
        MoralScale::MatchScale => 1.0,
    };
    let ni = normalize_batch(img, "image")?;
    let nt = normalize_batch(txt, "text")?;
    let sims = ni.unit.matmul_t(&nt.unit).scaled(scale);

    let count = if include_diagonal { n * n } else { n * (n - 1) };
    let mut d_sims = Matrix::zeros(n, n);
    let mut sum_sq = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j && !include_diagonal {
                continue;
            }
            let r = sims[(i, j)] - moral_similarity(&labels[i].0, &labels[j].1);
            sum_sq += r * r;
            d_sims[(i, j)] = 2.0 * r / count as f64;
        }
    }
    let grads = logits_backward(&ni, &nt, &d_sims, scale);
    Ok((sum_sq / count as f64, grads))
}

/// `(1 - λ)·contrastive + λ·moral`, with matching gradient combination.
///
/// A term whose weight is zero is still evaluated so the report always
/// carries both values.
pub fn total_loss(
    img: &Matrix,
    txt: &Matrix,
    labels: &[(MoralLabelVector, MoralLabelVector)],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let lambda = cfg.lambda;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let (clip, clip_g) = clip_contrastive_loss(img, txt, cfg.temperature)?;
    let (moral, moral_g) = moral_loss(
        img,
        txt,
        labels,
        cfg.temperature,
        cfg.include_diagonal_in_moral_loss,
        cfg.moral_scale,
    )?;
    let mut gradients = PairGradients::zeros_like(img, txt);
    gradients.image.add_scaled(&clip_g.image, 1.0 - lambda);
    gradients.image.add_scaled(&moral_g.image, lambda);
    gradients.text.add_scaled(&clip_g.text, 1.0 - lambda);
    gradients.text.add_scaled(&moral_g.text, lambda);
    Ok(LossReport {
        total: (1.0 - lambda) * clip + lambda * moral,
        clip_term: clip,
        moral_term: moral,
        gradients,
    })
}
