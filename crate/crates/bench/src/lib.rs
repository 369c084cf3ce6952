//! Fixtures shared by the benches.

use moral_align_core::{Matrix, MoralLabelVector, Polarity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub fn random_labels(n: usize, seed: u64) -> Vec<MoralLabelVector> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let p = [Polarity::Virtue, Polarity::Vice, Polarity::Neither];
    (0..n)
        .map(|_| MoralLabelVector::new(std::array::from_fn(|_| p[r.random_range(0..3)])))
        .collect()
}

/// Every one of the 243 labels.
pub fn all_labels() -> Vec<MoralLabelVector> {
    let p = [Polarity::Virtue, Polarity::Vice, Polarity::Neither];
    (0..243usize)
        .map(|mut k| {
            MoralLabelVector::new(std::array::from_fn(|_| {
                let v = p[k % 3];
                k /= 3;
                v
            }))
        })
        .collect()
}
