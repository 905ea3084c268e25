//! Dense 64-bit kernels shared by the solvers, the database and the model.
//!
//! [`DenseMatrix`] and [`DenseVector`] are thin column-major wrappers around
//! `nalgebra` storage whose public constructors refuse NaN/Inf.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff used by [`null_space_projector`] when callers
/// have no better value.
pub const DEFAULT_EPS_RANK: f64 = 1e-10;

/// Ridge factor: `ridge = RIDGE_FACTOR * trace(A) / rows`.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// Norms below this are treated as zero by [`cosine`].
pub const ZERO_NORM: f64 = 1e-12;

// A Cholesky pivot this small relative to the largest diagonal entry means
// the matrix is numerically singular even if the factorisation "succeeded".
const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct DenseVector(DVector<f64>);

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

impl DenseMatrix {
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix data", rows * cols, data.len()));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("DenseMatrix data"));
        }
        Ok(Self(DMatrix::from_vec(rows, cols, data)))
    }

    /// Builds from row slices (handy for small literals in tests).
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            data.extend(rows.iter().map(|row| row[j]));
        }
        Self::from_column_major(r, c, data)
    }

    /// Stacks equal-length columns side by side.
    pub fn from_columns(rows: usize, columns: &[DenseVector]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * columns.len());
        for c in columns {
            if c.dim() != rows {
                return Err(Error::dims("DenseMatrix column", rows, c.dim()));
            }
            data.extend_from_slice(c.as_slice());
        }
        Ok(Self(DMatrix::from_vec(rows, columns.len(), data)))
    }

    pub fn try_from_na(m: DMatrix<f64>) -> Result<Self> {
        if !all_finite(m.as_slice()) {
            return Err(Error::NonFinite("DenseMatrix"));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix produced by arithmetic on finite inputs.
    pub(crate) fn from_na(m: DMatrix<f64>) -> Self {
        debug_assert!(all_finite(m.as_slice()));
        Self(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    /// Column-major backing data.
    pub fn data(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let r = self.rows();
        &self.0.as_slice()[j * r..(j + 1) * r]
    }

    pub fn column_vector(&self, j: usize) -> DenseVector {
        DenseVector(DVector::from_column_slice(self.column(j)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_na(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_na(self) -> DMatrix<f64> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<Self> {
        if self.cols() != rhs.rows() {
            return Err(Error::dims(
                "matmul",
                format!("rhs rows = {}", self.cols()),
                rhs.rows(),
            ));
        }
        Ok(Self(&self.0 * &rhs.0))
    }

    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector> {
        if self.cols() != v.dim() {
            return Err(Error::dims("matvec", self.cols(), v.dim()));
        }
        Ok(DenseVector(&self.0 * &v.0))
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<Self> {
        self.same_shape(rhs, "sub")?;
        Ok(Self(&self.0 - &rhs.0))
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<Self> {
        self.same_shape(rhs, "add")?;
        Ok(Self(&self.0 + &rhs.0))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    /// `‖self − rhs‖_F / ‖rhs‖_F`, with `0/0 = 0`.
    pub fn relative_error(&self, reference: &DenseMatrix) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let denom = reference.frobenius_norm();
        Ok(if diff == 0.0 {
            0.0
        } else {
            diff / denom.max(f64::MIN_POSITIVE)
        })
    }

    /// Largest absolute deviation from symmetry.
    pub fn asymmetry(&self) -> f64 {
        if self.rows() != self.cols() {
            return f64::INFINITY;
        }
        (&self.0 - self.0.transpose()).amax()
    }

    fn same_shape(&self, rhs: &DenseMatrix, context: &'static str) -> Result<()> {
        if self.0.shape() != rhs.0.shape() {
            return Err(Error::dims(
                context,
                format!("{:?}", self.0.shape()),
                format!("{:?}", rhs.0.shape()),
            ));
        }
        Ok(())
    }
}

impl DenseVector {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if !all_finite(&data) {
            return Err(Error::NonFinite("DenseVector data"));
        }
        Ok(Self(DVector::from_vec(data)))
    }

    pub fn try_from_na(v: DVector<f64>) -> Result<Self> {
        if !all_finite(v.as_slice()) {
            return Err(Error::NonFinite("DenseVector"));
        }
        Ok(Self(v))
    }

    pub(crate) fn from_na(v: DVector<f64>) -> Self {
        debug_assert!(all_finite(v.as_slice()));
        Self(v)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    /// Standard basis vector `e_i` in `dim` dimensions.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        Self(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_na(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_na(self) -> DVector<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self(&self.0 * alpha)
    }

    pub fn dot(&self, rhs: &DenseVector) -> Result<f64> {
        if self.dim() != rhs.dim() {
            return Err(Error::dims("dot", self.dim(), rhs.dim()));
        }
        Ok(self.0.dot(&rhs.0))
    }
}

/// A Cholesky factorisation, possibly of `A + ridge·I`.
pub(crate) struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    ridge: Option<f64>,
}

impl SpdFactor {
    pub(crate) fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::dims("solve_spd: A must be square", n, a.ncols()));
        }
        if !all_finite(a.as_slice()) {
            return Err(Error::NonFinite("solve_spd: A"));
        }
        let sym = (a + a.transpose()) * 0.5;
        let max_diag = sym.diagonal().amax();
        if let Some(chol) = well_posed_cholesky(&sym, max_diag) {
            return Ok(Self { chol, ridge: None });
        }
        let trace = sym.trace();
        let ridge = RIDGE_FACTOR * trace.abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
        let mut ridged = sym.clone();
        for i in 0..n {
            ridged[(i, i)] += ridge;
        }
        match well_posed_cholesky(&ridged, max_diag + ridge) {
            Some(chol) => Ok(Self {
                chol,
                ridge: Some(ridge),
            }),
            None => Err(Error::Singular {
                dim: n,
                trace,
                ridge,
                min_pivot: Cholesky::new(ridged)
                    .map(|c| min_pivot(&c))
                    .unwrap_or(f64::NEG_INFINITY),
            }),
        }
    }

    pub(crate) fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub(crate) fn ridge(&self) -> Option<f64> {
        self.ridge
    }
}

fn min_pivot(c: &Cholesky<f64, Dyn>) -> f64 {
    c.l_dirty()
        .diagonal()
        .iter()
        .map(|d| d * d)
        .fold(f64::INFINITY, f64::min)
}

fn well_posed_cholesky(a: &DMatrix<f64>, max_diag: f64) -> Option<Cholesky<f64, Dyn>> {
    if a.nrows() == 0 {
        return Cholesky::new(a.clone());
    }
    let chol = Cholesky::new(a.clone())?;
    (min_pivot(&chol) > PIVOT_FLOOR * max_diag).then_some(chol)
}

/// Result of [`solve_spd`]: the solution plus the ridge, if one was needed.
#[derive(Clone, Debug)]
pub struct SpdSolution {
    pub x: DenseMatrix,
    pub ridge: Option<f64>,
}

/// Solves `A·X = B` for symmetric positive (semi-)definite `A` by Cholesky.
///
/// When `A` is numerically singular, `RIDGE_FACTOR · trace(A)/rows` is added
/// to the diagonal and reported in [`SpdSolution::ridge`]. No explicit
/// inverse is formed.
pub fn solve_spd(a: &DenseMatrix, b: &DenseMatrix) -> Result<SpdSolution> {
    if a.rows() != b.rows() {
        return Err(Error::dims("solve_spd: A.rows = B.rows", a.rows(), b.rows()));
    }
    let factor = SpdFactor::new(a.as_na())?;
    let x = factor.solve(b.as_na());
    Ok(SpdSolution {
        x: DenseMatrix::try_from_na(x)?,
        ridge: factor.ridge(),
    })
}

/// Orthogonal projector onto the null space of `K₀ᵀ`, i.e. `P·K₀ ≈ 0`.
#[derive(Clone, Debug)]
pub struct NullSpaceProjector {
    pub matrix: DenseMatrix,
    /// Dimension of the retained (null) subspace; the rank of `P`.
    pub null_dim: usize,
    /// Eigenvalues of `K₀K₀ᵀ`, ascending.
    pub spectrum: Vec<f64>,
}

/// Builds `P` from the eigendecomposition of the `d₁×d₁` Gram matrix
/// `K₀·K₀ᵀ`, keeping eigenvectors whose eigenvalue is below
/// `eps_rank × λ_max`. An empty `K₀` gives `P = I`.
pub fn null_space_projector(k0: &DenseMatrix, eps_rank: f64) -> Result<NullSpaceProjector> {
    if !(eps_rank > 0.0 && eps_rank.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eps_rank must be positive, got {eps_rank}"
        )));
    }
    let d = k0.rows();
    if k0.cols() == 0 {
        return Ok(NullSpaceProjector {
            matrix: DenseMatrix::identity(d),
            null_dim: d,
            spectrum: vec![0.0; d],
        });
    }
    let gram = k0.as_na() * k0.as_na().transpose();
    let eig = SymmetricEigen::new(gram);
    let lambda_max = eig.eigenvalues.amax();
    let cutoff = eps_rank * lambda_max;

    let mut p = DMatrix::zeros(d, d);
    let mut null_dim = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda_max == 0.0 || lambda < cutoff {
            let u = eig.eigenvectors.column(i);
            p += u * u.transpose();
            null_dim += 1;
        }
    }
    // symmetric by construction up to rounding; make it exact
    let p = (&p + p.transpose()) * 0.5;
    let mut spectrum: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    spectrum.sort_by(|a, b| a.total_cmp(b));
    Ok(NullSpaceProjector {
        matrix: DenseMatrix::try_from_na(p)?,
        null_dim,
        spectrum,
    })
}

/// Cosine similarity; zero when either norm is below [`ZERO_NORM`].
pub fn cosine(a: &DenseVector, b: &DenseVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims("cosine", a.dim(), b.dim()));
    }
    Ok(cosine_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return 0.0;
    }
    (ab / (na * nb)).clamp(-1.0, 1.0)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
