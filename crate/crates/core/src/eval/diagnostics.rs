//! Weighted-score diagnostics: how sharply an edit's implicit retrieval
//! weights single out the fact a probe belongs to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvdb::NeuralKVDatabase;
use crate::solvers::{weighted_scores_batch, EditSolution};
use crate::tensor::DenseMatrix;

/// What produces the per-entry scores of a probe.
#[derive(Clone, Copy)]
pub enum ScoreSource<'a> {
    /// `ω = K₁ᵀ S k` of a closed-form solution.
    Linear(&'a EditSolution),
    /// Cosine similarity to each stored key.
    Gated(&'a NeuralKVDatabase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    /// Score of each labelled probe against its own entry.
    pub positive: Vec<f64>,
    /// Scores against every other entry, pooled.
    pub negative: Vec<f64>,
    pub positive_mean: f64,
    pub positive_std: f64,
    pub negative_mean: f64,
    pub negative_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ScoreDiagnostics {
    /// `mean(positive) − mean(negative)`.
    pub fn gap(&self) -> f64 {
        self.positive_mean - self.negative_mean
    }

    /// Raw pools as `pool,score` rows.
    pub fn pools_csv(&self) -> String {
        let mut out = String::from("pool,score\n");
        for x in &self.positive {
            out.push_str(&format!("positive,{x:.17e}\n"));
        }
        for x in &self.negative {
            out.push_str(&format!("negative,{x:.17e}\n"));
        }
        out
    }
}

/// Scores every probe (a column of `probes`) against every entry.
/// `labels[j] = Some(i)` marks probe `j` as belonging to entry `i`; its
/// score at `i` goes to the positive pool and the rest to the negative
/// pool. Unlabelled probes contribute only negatives.
pub fn diagnose_scores(source: ScoreSource<'_>, probes: &DenseMatrix, labels: &[Option<usize>]) -> Result<ScoreDiagnostics> {
    if labels.len() != probes.cols() {
        return Err(Error::dims("diagnose_scores: labels vs probes", probes.cols(), labels.len()));
    }
    let scores: Vec<Vec<f64>> = match source {
        ScoreSource::Linear(sol) => {
            let omega = weighted_scores_batch(sol, probes)?;
            (0..omega.cols()).map(|j| omega.column(j).to_vec()).collect()
        }
        ScoreSource::Gated(db) => (0..probes.cols())
            .map(|j| db.similarities(probes.column(j)))
            .collect::<Result<_>>()?,
    };
    let entries = match source {
        ScoreSource::Linear(sol) => sol.keys.cols(),
        ScoreSource::Gated(db) => db.len(),
    };
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (row, label) in scores.iter().zip(labels) {
        if let Some(i) = *label {
            if i >= entries {
                return Err(Error::InvalidArgument(format!("label {i} out of range for {entries} entries")));
            }
        }
        for (i, &s) in row.iter().enumerate() {
            if *label == Some(i) {
                positive.push(s);
            } else {
                negative.push(s);
            }
        }
    }
    let (positive_mean, positive_std) = mean_std(&positive);
    let (negative_mean, negative_std) = mean_std(&negative);
    Ok(ScoreDiagnostics {
        positive,
        negative,
        positive_mean,
        positive_std,
        negative_mean,
        negative_std,
    })
}
