//! Locate-and-edit model editing viewed as querying a key-value database.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense 64-bit matrices, SPD solves, null-space projectors, cosine.
//! - [`solvers`]: closed-form MEMIT and AlphaEdit updates and their kernel
//!   matrices, plus the weighted-score view `ω = K₁ᵀ S k`.
//! - [`kvdb`]: the neural key-value database with gated retrieval and
//!   CRUD maintenance, and its binary on-disk format.
//! - [`model`]: a small synthetic transformer whose FFN layers can carry
//!   gated or linear edits, key extraction, residual fitting and the two
//!   multi-layer editing schemes.
//! - [`facts`] and [`eval`]: fact records, metric evaluation, score
//!   diagnostics and scaling benchmarks.
//!
//! The `parallel` feature (on by default) lets retrieval scans and per-fact
//! work fan out over rayon; without it every path runs sequentially and
//! produces the same results.

pub mod binfmt;
pub mod error;
pub mod eval;
pub mod exec;
pub mod facts;
pub mod kvdb;
pub mod model;
pub mod solvers;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use exec::Exec;
pub use facts::{Fact, NeighborhoodPrompt, PromptTemplate};
pub use kvdb::{FactId, NeuralKVDatabase, RetrievalResult};
pub use model::{Attachment, EditAttachment, ResidualFitConfig, ToyConfig, ToyModel};
pub use solvers::{EditMethod, EditProblem, EditSolution};
pub use tensor::{DenseMatrix, DenseVector};
