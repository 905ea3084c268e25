//! Neural key-value database with gated retrieval.
//!
//! Entries pair a key `kᵢ ∈ ℝ^{d₁}` with a residual `rᵢ ∈ ℝ^{d₂}`. A query
//! returns the residual of the most cosine-similar key when that similarity
//! is strictly above `γ`, and the exact zero vector otherwise:
//!
//! ```text
//! g(k) = r_j · 1[cos(k, k_j) > γ],   j = argmax_i cos(k, k_i)
//! ```
//!
//! Retrieval is an exact linear scan. Keys are normalised once on insert so
//! the scan is a single inner product per entry; ties go to the lowest entry
//! index, so duplicate keys resolve to the earliest insert.
//!
//! `query` takes `&self` and mutation takes `&mut self`, which gives the
//! many-readers-or-one-writer contract for free; wrap the database in an
//! `RwLock` to share it across threads with writers.

mod format;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{self, DenseMatrix, DenseVector, ZERO_NORM};

pub use format::{DB_MAGIC, DB_VERSION};

/// Gate threshold used across models.
pub const DEFAULT_GAMMA: f64 = 0.65;

/// Databases at least this large are scanned in parallel by [`NeuralKVDatabase::query`].
pub const PARALLEL_SCAN_MIN: usize = 16_384;

const SCAN_CHUNK: usize = 2_048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactId(pub u64);

impl std::fmt::Display for FactId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub hit: bool,
    /// Entry holding the maximal similarity; `None` only for an empty database.
    pub index: Option<usize>,
    /// The matched fact; `Some` iff `hit`.
    pub fact: Option<FactId>,
    /// Maximal cosine similarity (0 for an empty database).
    pub similarity: f64,
    /// `r_j` on a hit, the exact zero vector otherwise.
    pub residual: DenseVector,
}

/// Scan strategy for [`NeuralKVDatabase::query_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scan {
    Auto,
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralKVDatabase {
    d1: usize,
    d2: usize,
    gamma: f64,
    layer: usize,
    /// Unit-normalised keys, column-major `d₁ × m`.
    unit_keys: Vec<f64>,
    /// Original key norms; `unit_keys[:, i] * key_norms[i]` recovers the raw key.
    key_norms: Vec<f64>,
    /// Residuals, column-major `d₂ × m`.
    residuals: Vec<f64>,
    ids: Vec<FactId>,
    meta: Vec<Option<String>>,
    next_id: u64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    Ok(())
}

fn normalise(key: &[f64]) -> Result<(Vec<f64>, f64)> {
    if key.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("key"));
    }
    let norm = tensor::dot(key, key).sqrt();
    if norm < ZERO_NORM {
        return Err(Error::ZeroKey);
    }
    Ok((key.iter().map(|x| x / norm).collect(), norm))
}

impl NeuralKVDatabase {
    pub fn new(d1: usize, d2: usize, gamma: f64, layer: usize) -> Result<Self> {
        check_gamma(gamma)?;
        if d1 == 0 || d2 == 0 {
            return Err(Error::InvalidArgument("database dimensions must be non-zero".into()));
        }
        Ok(Self {
            d1,
            d2,
            gamma,
            layer,
            unit_keys: Vec::new(),
            key_norms: Vec::new(),
            residuals: Vec::new(),
            ids: Vec::new(),
            meta: Vec::new(),
            next_id: 0,
        })
    }

    /// Builds a database from stacked keys `K₁` (`d₁×m`) and residuals
    /// `R₁` (`d₂×m`); entry `i` gets `FactId(i)`.
    pub fn build(keys: &DenseMatrix, residuals: &DenseMatrix, gamma: f64, layer: usize) -> Result<Self> {
        if keys.cols() != residuals.cols() {
            return Err(Error::dims("build: column counts", keys.cols(), residuals.cols()));
        }
        let m = keys.cols();
        let (d1, d2) = (keys.rows(), residuals.rows());
        let mut db = Self::new(d1, d2, gamma, layer)?;
        db.unit_keys.reserve_exact(d1 * m);
        db.key_norms.reserve_exact(m);
        db.residuals.reserve_exact(d2 * m);
        db.ids.reserve_exact(m);
        db.meta.reserve_exact(m);
        for j in 0..m {
            let (unit, norm) = normalise(keys.column(j))?;
            db.unit_keys.extend_from_slice(&unit);
            db.key_norms.push(norm);
            db.residuals.extend_from_slice(residuals.column(j));
            db.ids.push(FactId(j as u64));
            db.meta.push(None);
        }
        db.next_id = m as u64;
        Ok(db)
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(())
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[FactId] {
        &self.ids
    }

    pub fn position(&self, id: FactId) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn unit_key(&self, index: usize) -> &[f64] {
        &self.unit_keys[index * self.d1..(index + 1) * self.d1]
    }

    pub fn key_norm(&self, index: usize) -> f64 {
        self.key_norms[index]
    }

    /// The stored key rescaled to its original norm.
    pub fn raw_key(&self, index: usize) -> DenseVector {
        let n = self.key_norms[index];
        DenseVector::from_na(nalgebra::DVector::from_iterator(
            self.d1,
            self.unit_key(index).iter().map(|x| x * n),
        ))
    }

    pub fn residual(&self, index: usize) -> &[f64] {
        &self.residuals[index * self.d2..(index + 1) * self.d2]
    }

    pub fn meta(&self, index: usize) -> Option<&str> {
        self.meta[index].as_deref()
    }

    /// Bytes held by the entry storage (capacity, not length).
    pub fn heap_bytes(&self) -> usize {
        use std::mem::size_of;
        self.unit_keys.capacity() * size_of::<f64>()
            + self.key_norms.capacity() * size_of::<f64>()
            + self.residuals.capacity() * size_of::<f64>()
            + self.ids.capacity() * size_of::<FactId>()
            + self.meta.capacity() * size_of::<Option<String>>()
            + self.meta.iter().flatten().map(|s| s.capacity()).sum::<usize>()
    }

    /// `(d₁ + d₂) · m`, the scalar count of the stacked `K₁` and `R₁`.
    pub fn formula_scalars(&self) -> usize {
        (self.d1 + self.d2) * self.len()
    }

    fn check_key(&self, k: &[f64]) -> Result<()> {
        if k.len() != self.d1 {
            return Err(Error::dims("query key", self.d1, k.len()));
        }
        Ok(())
    }

    /// Argmax cosine over all entries: `(index, similarity)`.
    pub fn best_match(&self, k: &[f64], scan: Scan) -> Result<Option<(usize, f64)>> {
        self.check_key(k)?;
        if self.is_empty() {
            return Ok(None);
        }
        let norm = tensor::dot(k, k).sqrt();
        if !(norm >= ZERO_NORM) {
            // cosine with a zero query is 0 everywhere; first entry wins the tie
            return Ok(Some((0, 0.0)));
        }
        let q: Vec<f64> = k.iter().map(|x| x / norm).collect();
        let parallel = match scan {
            Scan::Sequential => false,
            Scan::Parallel => true,
            Scan::Auto => self.len() >= PARALLEL_SCAN_MIN,
        };
        let exec = if parallel { Exec::Parallel } else { Exec::Sequential };
        let chunks = self.len().div_ceil(SCAN_CHUNK);
        let best = exec
            .map_range(chunks, |c| {
                let start = c * SCAN_CHUNK;
                let end = (start + SCAN_CHUNK).min(self.len());
                scan_range(&self.unit_keys, self.d1, &q, start, end)
            })
            .into_iter()
            .reduce(better)
            .expect("non-empty");
        Ok(Some(best))
    }

    /// Gated lookup for the forward pass: the hit entry index and similarity.
    pub fn lookup(&self, k: &[f64]) -> Result<Option<(usize, f64)>> {
        Ok(self
            .best_match(k, Scan::Auto)?
            .filter(|&(_, sim)| sim > self.gamma))
    }

    pub fn query(&self, k: &DenseVector) -> Result<RetrievalResult> {
        self.query_with(k, Scan::Auto)
    }

    pub fn query_with(&self, k: &DenseVector, scan: Scan) -> Result<RetrievalResult> {
        let best = self.best_match(k.as_slice(), scan)?;
        Ok(match best {
            Some((index, similarity)) if similarity > self.gamma => RetrievalResult {
                hit: true,
                index: Some(index),
                fact: Some(self.ids[index]),
                similarity,
                residual: DenseVector::from_na(nalgebra::DVector::from_column_slice(self.residual(index))),
            },
            Some((index, similarity)) => RetrievalResult {
                hit: false,
                index: Some(index),
                fact: None,
                similarity,
                residual: DenseVector::zeros(self.d2),
            },
            None => RetrievalResult {
                hit: false,
                index: None,
                fact: None,
                similarity: 0.0,
                residual: DenseVector::zeros(self.d2),
            },
        })
    }

    /// Cosine similarity of `k` against every entry, in entry order.
    pub fn similarities(&self, k: &[f64]) -> Result<Vec<f64>> {
        self.check_key(k)?;
        let norm = tensor::dot(k, k).sqrt();
        if !(norm >= ZERO_NORM) {
            return Ok(vec![0.0; self.len()]);
        }
        Ok(self
            .unit_keys
            .chunks_exact(self.d1)
            .map(|u| tensor::dot(u, k) / norm)
            .collect())
    }

    pub fn insert(&mut self, key: &DenseVector, residual: &DenseVector, meta: Option<String>) -> Result<FactId> {
        self.insert_with_id(FactId(self.next_id), key, residual, meta)
    }

    /// Like [`insert`](Self::insert) but with a caller-chosen id, which must
    /// not already be present. Later automatic ids continue above it.
    pub fn insert_with_id(
        &mut self,
        id: FactId,
        key: &DenseVector,
        residual: &DenseVector,
        meta: Option<String>,
    ) -> Result<FactId> {
        self.check_key(key.as_slice())?;
        if residual.dim() != self.d2 {
            return Err(Error::dims("insert residual", self.d2, residual.dim()));
        }
        if residual.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("residual"));
        }
        if id.0 < self.next_id && self.position(id).is_some() {
            return Err(Error::DuplicateId(id.0));
        }
        let (unit, norm) = normalise(key.as_slice())?;
        self.next_id = self.next_id.max(id.0.saturating_add(1));
        self.unit_keys.extend_from_slice(&unit);
        self.key_norms.push(norm);
        self.residuals.extend_from_slice(residual.as_slice());
        self.ids.push(id);
        self.meta.push(meta);
        Ok(id)
    }

    /// Removes an entry; other ids are untouched. Returns whether it existed.
    pub fn remove(&mut self, id: FactId) -> bool {
        let Some(i) = self.position(id) else {
            return false;
        };
        self.unit_keys.drain(i * self.d1..(i + 1) * self.d1);
        self.residuals.drain(i * self.d2..(i + 1) * self.d2);
        self.key_norms.remove(i);
        self.ids.remove(i);
        self.meta.remove(i);
        true
    }

    /// Replaces an entry's residual (and optionally key) in place.
    pub fn update(&mut self, id: FactId, new_residual: &DenseVector, new_key: Option<&DenseVector>) -> Result<bool> {
        if new_residual.dim() != self.d2 {
            return Err(Error::dims("update residual", self.d2, new_residual.dim()));
        }
        if new_residual.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("residual"));
        }
        let normalised = match new_key {
            Some(k) => {
                self.check_key(k.as_slice())?;
                Some(normalise(k.as_slice())?)
            }
            None => None,
        };
        let Some(i) = self.position(id) else {
            return Ok(false);
        };
        self.residuals[i * self.d2..(i + 1) * self.d2].copy_from_slice(new_residual.as_slice());
        if let Some((unit, norm)) = normalised {
            self.unit_keys[i * self.d1..(i + 1) * self.d1].copy_from_slice(&unit);
            self.key_norms[i] = norm;
        }
        Ok(true)
    }

    /// Stacked raw keys `K₁` (`d₁×m`).
    pub fn key_matrix(&self) -> DenseMatrix {
        let cols: Vec<DenseVector> = (0..self.len()).map(|i| self.raw_key(i)).collect();
        DenseMatrix::from_columns(self.d1, &cols).expect("consistent dims")
    }

    /// Stacked residuals `R₁` (`d₂×m`).
    pub fn residual_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_na(nalgebra::DMatrix::from_column_slice(self.d2, self.len(), &self.residuals))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::binfmt::write_atomic(path, &format::encode(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::binfmt::read_file(path)?;
        Ok(format::decode(&bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(format::decode(bytes)?)
    }
}

fn scan_range(unit_keys: &[f64], d1: usize, q: &[f64], start: usize, end: usize) -> (usize, f64) {
    let mut best = (start, f64::NEG_INFINITY);
    for i in start..end {
        let sim = tensor::dot(&unit_keys[i * d1..(i + 1) * d1], q);
        if sim > best.1 {
            best = (i, sim);
        }
    }
    best
}

fn better(a: (usize, f64), b: (usize, f64)) -> (usize, f64) {
    if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
        b
    } else {
        a
    }
}
