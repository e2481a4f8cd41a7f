//! Seeded parameter initialization.

use rand::Rng;

use super::{Scalar, Tensor};

/// Xavier/Glorot uniform for a weight of shape [rows, cols] with the given
/// fan-in and fan-out.
pub fn xavier<S: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)).unwrap())
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

/// Uniform vector in [-bound, bound], for biases and embeddings.
pub fn uniform_vec<S: Scalar, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Tensor<S> {
    let data = (0..len)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)).unwrap())
        .collect();
    Tensor::vector(data)
}

/// Embedding table [vocab, d] with N(0, 1)/sqrt(d)-scale uniform entries.
pub fn embedding<S: Scalar, R: Rng>(rng: &mut R, vocab: usize, d: usize) -> Tensor<S> {
    let bound = (1.0 / d as f64).sqrt();
    let data = (0..vocab * d)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)).unwrap())
        .collect();
    Tensor::matrix(vocab, d, data).expect("consistent dims")
}
