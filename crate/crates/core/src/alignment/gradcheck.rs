//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::PairGradients;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{stream_rng, streams};

pub const DEFAULT_COORDINATES: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
}

/// Max relative error between the analytic gradient returned by `loss_fn`
/// and central differences, over [`DEFAULT_COORDINATES`] random coordinates
/// (or all of them when there are fewer).
pub fn finite_difference_check<F>(loss_fn: F, params: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    finite_difference_check_with(loss_fn, params, step, DEFAULT_COORDINATES, 0)
        .map(|r| r.max_relative_error)
}

pub fn finite_difference_check_with<F>(
    mut loss_fn: F,
    params: &[f64],
    step: f64,
    coordinates: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    if params.is_empty() {
        return Err(Error::invalid("no parameters to check"));
    }
    let (base, analytic) = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: analytic.len(),
        });
    }
    let picks: Vec<usize> = if params.len() <= coordinates {
        (0..params.len()).collect()
    } else {
        let mut rng = stream_rng(seed, streams::GRADCHECK);
        sample(&mut rng, params.len(), coordinates).into_vec()
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_coordinate: picks[0],
        coordinates_checked: picks.len(),
    };
    for &k in &picks {
        let orig = probe[k];
        probe[k] = orig + step;
        let (up, _) = loss_fn(&probe)?;
        probe[k] = orig - step;
        let (down, _) = loss_fn(&probe)?;
        probe[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss while probing coordinate {k}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_coordinate = k;
        }
    }
    Ok(report)
}

/// Adapts a loss over an (image, text) embedding pair to the flat-parameter
/// form expected by [`finite_difference_check`]. Image entries come first.
pub fn flatten_pair_loss<'a, F>(
    rows: usize,
    cols: usize,
    f: F,
) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a
where
    F: Fn(&Matrix, &Matrix) -> Result<(f64, PairGradients)> + 'a,
{
    move |flat: &[f64]| {
        let half = rows * cols;
        let img = Matrix::from_vec(rows, cols, flat[..half].to_vec())?;
        let txt = Matrix::from_vec(rows, cols, flat[half..].to_vec())?;
        let (loss, g) = f(&img, &txt)?;
        let mut grad = g.image.into_vec();
        grad.extend(g.text.into_vec());
        Ok((loss, grad))
    }
}
