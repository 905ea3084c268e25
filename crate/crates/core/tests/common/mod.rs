#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neuraldb::{DenseMatrix, DenseVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn dense(m: DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::try_from_na(m).unwrap()
}

pub fn vector(v: &[f64]) -> DenseVector {
    DenseVector::from_vec(v.to_vec()).unwrap()
}

pub fn random_vector(dim: usize, rng: &mut ChaCha8Rng) -> DenseVector {
    vector(normal(dim, 1, rng).as_slice())
}

/// Index and cosine of the most similar column, lowest index on ties.
pub fn scan_oracle(keys: &DMatrix<f64>, q: &[f64]) -> Option<(usize, f64)> {
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best: Option<(usize, f64)> = None;
    for j in 0..keys.ncols() {
        let k = keys.column(j);
        let c = if qn < 1e-12 {
            0.0
        } else {
            k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (k.norm() * qn)
        };
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((j, c));
        }
    }
    best
}
