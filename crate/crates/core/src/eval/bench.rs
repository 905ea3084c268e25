//! Build/query timing and memory of databases of growing size.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvdb::{NeuralKVDatabase, Scan};
use crate::tensor::DenseMatrix;

/// Database of `m` standard-normal keys and residuals.
pub fn random_database(m: usize, d1: usize, d2: usize, gamma: f64, layer: usize, seed: u64) -> Result<NeuralKVDatabase> {
    let (keys, residuals) = random_entries(m, d1, d2, seed)?;
    NeuralKVDatabase::build(&keys, &residuals, gamma, layer)
}

fn random_entries(m: usize, d1: usize, d2: usize, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let keys = DenseMatrix::from_column_major(d1, m, normal(d1 * m))?;
    let residuals = DenseMatrix::from_column_major(d2, m, normal(d2 * m))?;
    Ok((keys, residuals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub m: usize,
    pub build_secs: f64,
    pub query_p50_secs: f64,
    pub query_p99_secs: f64,
    /// Bytes held by the database's entry storage.
    pub bytes: usize,
    /// `(d₁ + d₂) · m`.
    pub formula_scalars: usize,
}

impl ScalingRow {
    /// `bytes / (8 · (d₁ + d₂) · m)`.
    pub fn memory_ratio(&self) -> f64 {
        self.bytes as f64 / (8.0 * self.formula_scalars as f64)
    }
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Builds a random database for each size and times `queries` lookups
/// with a single-threaded scan. Fails if memory strays outside 2× of the
/// `(d₁ + d₂)·m` formula.
pub fn bench_scaling(sizes: &[usize], d1: usize, d2: usize, queries: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("sizes must be ascending, got {sizes:?}")));
    }
    if queries == 0 {
        return Err(Error::InvalidArgument("bench_scaling needs at least one query".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let (keys, residuals) = random_entries(m, d1, d2, seed ^ m as u64)?;
        let start = Instant::now();
        let db = NeuralKVDatabase::build(&keys, &residuals, crate::kvdb::DEFAULT_GAMMA, 0)?;
        let build_secs = start.elapsed().as_secs_f64();
        drop((keys, residuals));

        let (probes, _) = random_entries(queries, d1, 1, seed.wrapping_add(1))?;
        let mut times = Vec::with_capacity(queries);
        for j in 0..queries {
            let t = Instant::now();
            std::hint::black_box(db.best_match(probes.column(j), Scan::Sequential)?);
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let row = ScalingRow {
            m,
            build_secs,
            query_p50_secs: percentile(&times, 0.5),
            query_p99_secs: percentile(&times, 0.99),
            bytes: db.heap_bytes(),
            formula_scalars: db.formula_scalars(),
        };
        if m > 0 && !(0.5..=2.0).contains(&row.memory_ratio()) {
            return Err(Error::InvalidArgument(format!(
                "database of {m} entries holds {} bytes, {:.2}x the formula",
                row.bytes,
                row.memory_ratio()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("m,build_secs,query_p50_secs,query_p99_secs,bytes,formula_scalars,memory_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6e},{:.6e},{:.6e},{},{},{:.4}\n",
            r.m,
            r.build_secs,
            r.query_p50_secs,
            r.query_p99_secs,
            r.bytes,
            r.formula_scalars,
            r.memory_ratio()
        ));
    }
    out
}
