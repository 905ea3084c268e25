//! Edit metrics, score diagnostics, synthetic facts and scaling benchmarks.
//!
//! Two metric modes are supported and never mixed within one report:
//!
//! - [`Mode::Preference`]: a prompt succeeds when the model assigns the
//!   wanted object a higher sequence log-probability than the competing one
//!   (`P[ô] > P[o]` for efficacy and generalization, `P[o] > P[ô]` on
//!   neighborhood prompts).
//! - [`Mode::Top1`]: a prompt succeeds when greedy teacher-forced decoding
//!   reproduces the wanted object token by token.
//!
//! Facts without paraphrases (or neighborhood prompts) are left out of the
//! corresponding denominator and counted as skipped.

mod bench;
mod diagnostics;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::facts::Fact;
use crate::kvdb::NeuralKVDatabase;
use crate::model::{EditAttachment, ToyModel};
use crate::tensor::DenseMatrix;

pub use bench::{bench_scaling, random_database, scaling_csv, ScalingRow};
pub use diagnostics::{diagnose_scores, ScoreDiagnostics, ScoreSource};
pub use synth::{controlled_probes, synth_facts, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Preference,
    Top1,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "preference" => Ok(Mode::Preference),
            "top1" => Ok(Mode::Top1),
            _ => Err(format!("unknown metric mode `{s}` (expected preference or top1)")),
        }
    }
}

/// One scored prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub fact: u64,
    /// Index of the prompt within the fact (0 for efficacy).
    pub prompt: usize,
    pub success: bool,
    /// Log-probability of the wanted object (similarity for retrieval probes).
    pub wanted_score: f64,
    /// Log-probability of the competing object (γ for retrieval probes).
    pub rival_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub successes: usize,
    pub attempts: usize,
    /// Facts with no prompts of this kind.
    pub skipped: usize,
    pub items: Vec<ItemOutcome>,
}

impl MetricResult {
    fn from_items(per_fact: Vec<Vec<ItemOutcome>>) -> Self {
        let skipped = per_fact.iter().filter(|v| v.is_empty()).count();
        let items: Vec<ItemOutcome> = per_fact.into_iter().flatten().collect();
        Self {
            successes: items.iter().filter(|i| i.success).count(),
            attempts: items.len(),
            skipped,
            items,
        }
    }

    /// `successes / attempts`; 0 when nothing was attempted.
    pub fn fraction(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

/// A model with its attachments, evaluated under one execution strategy.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub model: &'a ToyModel,
    pub attachments: &'a [EditAttachment],
    pub exec: Exec,
}

impl<'a> EvalContext<'a> {
    pub fn new(model: &'a ToyModel, attachments: &'a [EditAttachment]) -> Self {
        Self {
            model,
            attachments,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(self, exec: Exec) -> Self {
        Self { exec, ..self }
    }

    fn outcome(&self, fact: u64, prompt_index: usize, prompt: &[u32], wanted: &[u32], rival: &[u32], mode: Mode) -> Result<ItemOutcome> {
        let (wanted_logprob, greedy) = self.model.score_object(prompt, wanted, self.attachments)?;
        let rival_logprob = self.model.sequence_logprob(prompt, rival, self.attachments)?;
        let success = match mode {
            Mode::Preference => wanted_logprob > rival_logprob,
            Mode::Top1 => greedy,
        };
        Ok(ItemOutcome {
            fact,
            prompt: prompt_index,
            success,
            wanted_score: wanted_logprob,
            rival_score: rival_logprob,
        })
    }

    fn collect<F>(&self, facts: &[Fact], per_fact: F) -> Result<MetricResult>
    where
        F: Fn(&Fact) -> Result<Vec<ItemOutcome>> + Sync + Send,
    {
        Ok(MetricResult::from_items(self.exec.try_map(facts, per_fact)?))
    }
}

/// Edit prompts: does the model now produce the new object?
pub fn eval_efficacy(ctx: &EvalContext<'_>, facts: &[Fact], mode: Mode) -> Result<MetricResult> {
    ctx.collect(facts, |f| {
        let (prompt, _) = f.rendered_prompt();
        Ok(vec![ctx.outcome(f.id, 0, &prompt, &f.new_object, &f.old_object, mode)?])
    })
}

/// Paraphrased prompts.
pub fn eval_generalization(ctx: &EvalContext<'_>, facts: &[Fact], mode: Mode) -> Result<MetricResult> {
    ctx.collect(facts, |f| {
        f.rendered_paraphrases()
            .iter()
            .enumerate()
            .map(|(i, (p, _))| ctx.outcome(f.id, i, p, &f.new_object, &f.old_object, mode))
            .collect()
    })
}

/// Neighborhood prompts: does the model still give their own objects?
pub fn eval_specificity(ctx: &EvalContext<'_>, facts: &[Fact], mode: Mode) -> Result<MetricResult> {
    ctx.collect(facts, |f| {
        f.neighborhood
            .iter()
            .enumerate()
            .map(|(i, n)| ctx.outcome(f.id, i, &n.prompt, &n.object, &f.new_object, mode))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub efficacy: MetricResult,
    pub generalization: MetricResult,
    pub specificity: MetricResult,
    /// Free-form echo of the run configuration.
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn evaluate(ctx: &EvalContext<'_>, facts: &[Fact], mode: Mode, config: serde_json::Value) -> Result<Self> {
        Ok(Self {
            mode,
            efficacy: eval_efficacy(ctx, facts, mode)?,
            generalization: eval_generalization(ctx, facts, mode)?,
            specificity: eval_specificity(ctx, facts, mode)?,
            config,
        })
    }

    /// `metric,successes,attempts,skipped,fraction` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mode,successes,attempts,skipped,fraction\n");
        let mode = serde_json::to_value(self.mode).unwrap();
        for (name, m) in [
            ("efficacy", &self.efficacy),
            ("generalization", &self.generalization),
            ("specificity", &self.specificity),
        ] {
            out.push_str(&format!(
                "{name},{},{},{},{},{:.6}\n",
                mode.as_str().unwrap(),
                m.successes,
                m.attempts,
                m.skipped,
                m.fraction()
            ));
        }
        out
    }

    /// Per-prompt log, one row per scored item.
    pub fn items_csv(&self) -> String {
        let mut out = String::from("metric,fact,prompt,success,wanted_score,rival_score\n");
        for (name, m) in [
            ("efficacy", &self.efficacy),
            ("generalization", &self.generalization),
            ("specificity", &self.specificity),
        ] {
            for i in &m.items {
                out.push_str(&format!(
                    "{name},{},{},{},{:.17e},{:.17e}\n",
                    i.fact, i.prompt, i.success as u8, i.wanted_score, i.rival_score
                ));
            }
        }
        out
    }
}

/// Key-level generalization: probe `j` succeeds when the database returns
/// the residual of entry `expected[j]`.
pub fn retrieval_generalization(
    db: &NeuralKVDatabase,
    probes: &DenseMatrix,
    expected: &[usize],
    exec: Exec,
) -> Result<MetricResult> {
    if probes.cols() != expected.len() {
        return Err(Error::dims("retrieval probes vs expected", expected.len(), probes.cols()));
    }
    let outcomes = exec.try_map_range(probes.cols(), |j| {
        let found = db.lookup(probes.column(j))?;
        let success = matches!(found, Some((i, _)) if i == expected[j]);
        let similarity = found.map_or(0.0, |(_, s)| s);
        Ok::<_, Error>(vec![ItemOutcome {
            fact: db.ids().get(expected[j]).map_or(u64::MAX, |id| id.0),
            prompt: j,
            success,
            wanted_score: similarity,
            rival_score: db.gamma(),
        }])
    })?;
    Ok(MetricResult::from_items(outcomes))
}
