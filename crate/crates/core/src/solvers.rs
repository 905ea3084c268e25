//! Closed-form single-layer editing solvers.
//!
//! Both MEMIT and AlphaEdit produce an update of the form
//! `Δ = R₁ K₁ᵀ S` for a method-specific symmetric kernel `S`, so that for
//! any query key `k`
//!
//! ```text
//! (W + Δ)·k = W·k + R₁·ω,   ω = K₁ᵀ S k
//! ```
//!
//! i.e. the edited layer answers a query with a weighted sum of the stored
//! residuals. [`weighted_scores`] exposes `ω` directly.
//!
//! When the system is singular and gets a ridge, `S` itself has norm around
//! `1/ridge`, so `K₁ᵀ(S k)` cancels badly. Each solution therefore keeps the
//! score map `M = K₁ᵀS` solved directly against `K₁`, and both `Δ = R₁M`
//! and `ω = M k` are formed from it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, DenseVector, NullSpaceProjector, SpdFactor};

pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMethod {
    Memit,
    AlphaEdit,
}

/// One single-layer editing problem.
#[derive(Debug, Clone)]
pub struct EditProblem {
    /// Target out-projection, `d₂×d₁`.
    pub w: DenseMatrix,
    /// Edited-fact keys, `d₁×m`.
    pub k1: DenseMatrix,
    /// Desired values, `d₂×m`.
    pub vhat1: DenseMatrix,
    /// Preserved-knowledge keys, `d₁×n` (`n` may be zero).
    pub k0: DenseMatrix,
    pub beta: f64,
}

impl EditProblem {
    pub fn new(
        w: DenseMatrix,
        k1: DenseMatrix,
        vhat1: DenseMatrix,
        k0: DenseMatrix,
        beta: f64,
    ) -> Result<Self> {
        let (d2, d1) = (w.rows(), w.cols());
        if k1.rows() != d1 {
            return Err(Error::dims("EditProblem: K1 rows", d1, k1.rows()));
        }
        if k1.cols() == 0 {
            return Err(Error::InvalidArgument("EditProblem needs m >= 1 edited keys".into()));
        }
        if vhat1.rows() != d2 || vhat1.cols() != k1.cols() {
            return Err(Error::dims(
                "EditProblem: Vhat1 shape",
                format!("{d2}x{}", k1.cols()),
                format!("{}x{}", vhat1.rows(), vhat1.cols()),
            ));
        }
        if k0.rows() != d1 {
            return Err(Error::dims("EditProblem: K0 rows", d1, k0.rows()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be finite and positive, got {beta}")));
        }
        Ok(Self { w, k1, vhat1, k0, beta })
    }

    /// Builds the problem from residuals instead of target values
    /// (`V̂₁ = W·K₁ + R₁`).
    pub fn from_residuals(
        w: DenseMatrix,
        k1: DenseMatrix,
        r1: &DenseMatrix,
        k0: DenseMatrix,
        beta: f64,
    ) -> Result<Self> {
        let vhat1 = w.matmul(&k1)?.add(r1)?;
        Self::new(w, k1, vhat1, k0, beta)
    }

    pub fn d1(&self) -> usize {
        self.w.cols()
    }

    pub fn d2(&self) -> usize {
        self.w.rows()
    }

    pub fn m(&self) -> usize {
        self.k1.cols()
    }
}

/// Numerical notes attached to a solve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolverProvenance {
    pub beta: f64,
    /// Diagonal ridge added because the system was singular.
    pub ridge: Option<f64>,
    /// Rank of the null-space projector (AlphaEdit only).
    pub projector_rank: Option<usize>,
    /// Eigenvalues of `K₀K₀ᵀ` used for the projector (AlphaEdit only).
    pub projector_spectrum: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct EditSolution {
    pub delta: DenseMatrix,
    pub method: EditMethod,
    /// `S₁` or `S₂`, `d₁×d₁`, symmetric.
    pub kernel: DenseMatrix,
    /// `R₁`, `d₂×m`.
    pub residuals: DenseMatrix,
    /// `K₁`.
    pub keys: DenseMatrix,
    /// `M = K₁ᵀ S`, `m×d₁`.
    pub score_map: DenseMatrix,
    pub provenance: SolverProvenance,
}

/// `R₁ = V̂₁ − W·K₁`.
pub fn residual_matrix(w: &DenseMatrix, k1: &DenseMatrix, vhat1: &DenseMatrix) -> Result<DenseMatrix> {
    vhat1.sub(&w.matmul(k1)?)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `Δ = R₁K₁ᵀ(K₁K₁ᵀ + β₁K₀K₀ᵀ)⁻¹`, the minimiser of
/// `‖(W+Δ)K₁ − V̂₁‖² + β₁‖ΔK₀‖²`.
pub fn memit_delta(p: &EditProblem) -> Result<EditSolution> {
    let r1 = residual_matrix(&p.w, &p.k1, &p.vhat1)?;
    let k1 = p.k1.as_na();
    let k0 = p.k0.as_na();
    let a = k1 * k1.transpose() + (k0 * k0.transpose()) * p.beta;
    let factor = SpdFactor::new(&a)?;

    // M = K₁ᵀA⁻¹ = (A⁻¹K₁)ᵀ since A is symmetric
    let score_map = factor.solve(k1).transpose();
    let delta = r1.as_na() * &score_map;
    let kernel = symmetrize(factor.solve(&DMatrix::identity(p.d1(), p.d1())));

    Ok(EditSolution {
        delta: DenseMatrix::try_from_na(delta)?,
        method: EditMethod::Memit,
        kernel: DenseMatrix::try_from_na(kernel)?,
        residuals: r1,
        keys: p.k1.clone(),
        score_map: DenseMatrix::try_from_na(score_map)?,
        provenance: SolverProvenance {
            beta: p.beta,
            ridge: factor.ridge(),
            ..Default::default()
        },
    })
}

/// `Δ = R₁K₁ᵀPᵀ(PK₁K₁ᵀPᵀ + β₂I)⁻¹P`, the minimiser over `δ` of
/// `‖(W+δP)K₁ − V̂₁‖² + β₂‖δP‖²` written back as `Δ = δP`.
pub fn alphaedit_delta(p: &EditProblem, projector: &NullSpaceProjector) -> Result<EditSolution> {
    let pm = projector.matrix.as_na();
    if pm.nrows() != p.d1() || pm.ncols() != p.d1() {
        return Err(Error::dims(
            "alphaedit_delta: projector",
            format!("{0}x{0}", p.d1()),
            format!("{}x{}", pm.nrows(), pm.ncols()),
        ));
    }
    let r1 = residual_matrix(&p.w, &p.k1, &p.vhat1)?;
    let pk1 = pm * p.k1.as_na();
    let mut a = &pk1 * pk1.transpose();
    for i in 0..p.d1() {
        a[(i, i)] += p.beta;
    }
    let factor = SpdFactor::new(&a)?;

    // S₂ = Pᵀ A⁻¹ P, M = (Pᵀ A⁻¹ P K₁)ᵀ
    let kernel = symmetrize(pm.transpose() * factor.solve(pm));
    let score_map = (pm.transpose() * factor.solve(&pk1)).transpose();
    let delta = r1.as_na() * &score_map;

    Ok(EditSolution {
        delta: DenseMatrix::try_from_na(delta)?,
        method: EditMethod::AlphaEdit,
        kernel: DenseMatrix::try_from_na(kernel)?,
        residuals: r1,
        keys: p.k1.clone(),
        score_map: DenseMatrix::try_from_na(score_map)?,
        provenance: SolverProvenance {
            beta: p.beta,
            ridge: factor.ridge(),
            projector_rank: Some(projector.null_dim),
            projector_spectrum: Some(projector.spectrum.clone()),
        },
    })
}

/// `ω = K₁ᵀS·k`, one score per edited fact.
pub fn weighted_scores(sol: &EditSolution, k: &DenseVector) -> Result<DenseVector> {
    let d1 = sol.score_map.cols();
    if k.dim() != d1 {
        return Err(Error::dims("weighted_scores: key", d1, k.dim()));
    }
    Ok(DenseVector::from_na(sol.score_map.as_na() * k.as_na()))
}

/// Scores for every column of `probes` at once (`m × probes`).
pub fn weighted_scores_batch(sol: &EditSolution, probes: &DenseMatrix) -> Result<DenseMatrix> {
    if probes.rows() != sol.score_map.cols() {
        return Err(Error::dims("weighted_scores_batch", sol.score_map.cols(), probes.rows()));
    }
    Ok(DenseMatrix::from_na(sol.score_map.as_na() * probes.as_na()))
}

/// The MEMIT objective `‖(W+Δ)K₁ − V̂₁‖² + β‖ΔK₀‖²`.
pub fn memit_objective(p: &EditProblem, delta: &DenseMatrix) -> Result<f64> {
    let fit = p.w.add(delta)?.matmul(&p.k1)?.sub(&p.vhat1)?.frobenius_norm();
    let keep = delta.matmul(&p.k0)?.frobenius_norm();
    Ok(fit * fit + p.beta * keep * keep)
}

/// The AlphaEdit objective `‖(W+Δ)K₁ − V̂₁‖² + β‖Δ‖²` evaluated at `Δ = δP`.
pub fn alphaedit_objective(p: &EditProblem, delta: &DenseMatrix) -> Result<f64> {
    let fit = p.w.add(delta)?.matmul(&p.k1)?.sub(&p.vhat1)?.frobenius_norm();
    let reg = delta.frobenius_norm();
    Ok(fit * fit + p.beta * reg * reg)
}
