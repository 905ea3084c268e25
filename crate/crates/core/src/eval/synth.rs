//! Synthetic facts for the toy model, and probes at a chosen cosine.

use std::collections::HashSet;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::facts::{Fact, NeighborhoodPrompt, PromptTemplate};
use crate::model::{argmax, ToyModel};
use crate::tensor::{DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub subject_len: usize,
    /// Number of distinct relations; each is a fixed two-token lead-in
    /// `r₁ r₂ {subject}` drawn from tokens no subject uses.
    pub relations: usize,
    pub paraphrases: usize,
    /// Paraphrases put 1 to this many random tokens in front of the prompt.
    pub max_paraphrase_prefix: usize,
    pub neighbors: usize,
    pub exec: Exec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subject_len: 3,
            relations: 8,
            paraphrases: 2,
            max_paraphrase_prefix: 3,
            neighbors: 2,
            exec: Exec::default(),
        }
    }
}

/// Random draws for one fact, made up front so that the forward passes can
/// run in any order.
struct Draft {
    subject: Vec<u32>,
    relation: usize,
    paraphrase_prefixes: Vec<Vec<u32>>,
    neighbor_subjects: Vec<Vec<u32>>,
    pick: f64,
}

impl SynthConfig {
    /// Generates `count` facts. Subjects (including neighborhood subjects)
    /// are all distinct; the old object is the unedited model's answer and
    /// the new object is drawn from the less likely half of its vocabulary.
    pub fn generate(&self, model: &ToyModel, count: usize, seed: u64) -> Result<Vec<Fact>> {
        if count == 0 {
            return Err(Error::InvalidArgument("synth_facts needs count >= 1".into()));
        }
        let vocab = model.config().vocab;
        let needed = self.subject_len + 2 + self.max_paraphrase_prefix + 1;
        if self.subject_len == 0 || self.relations == 0 || needed > model.config().max_seq {
            return Err(Error::InvalidArgument(format!("synthetic prompts do not fit this model: {self:?}")));
        }
        // the top eighth of the vocabulary is reserved for relation tokens
        let entity_vocab = (vocab - vocab / 8) as u32;
        let space = (entity_vocab as f64).powi(self.subject_len as i32);
        if (count * (1 + self.neighbors)) as f64 > 0.5 * space {
            return Err(Error::InvalidArgument(format!(
                "{count} facts need more distinct subjects than {entity_vocab}^{} allows",
                self.subject_len
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let relations: Vec<[u32; 2]> = (0..self.relations)
            .map(|_| [rng.random_range(entity_vocab..vocab as u32), rng.random_range(entity_vocab..vocab as u32)])
            .collect();
        let mut used = HashSet::new();
        let mut fresh_subject = |rng: &mut ChaCha8Rng| loop {
            let s: Vec<u32> = (0..self.subject_len).map(|_| rng.random_range(0..entity_vocab)).collect();
            if used.insert(s.clone()) {
                return s;
            }
        };
        let drafts: Vec<Draft> = (0..count)
            .map(|_| {
                let subject = fresh_subject(&mut rng);
                let relation = rng.random_range(0..self.relations);
                let paraphrase_prefixes = (0..self.paraphrases)
                    .map(|_| {
                        let len = rng.random_range(1..=self.max_paraphrase_prefix.max(1));
                        (0..len).map(|_| rng.random_range(0..entity_vocab)).collect()
                    })
                    .collect();
                let neighbor_subjects = (0..self.neighbors).map(|_| fresh_subject(&mut rng)).collect();
                Draft {
                    subject,
                    relation,
                    paraphrase_prefixes,
                    neighbor_subjects,
                    pick: rng.random(),
                }
            })
            .collect();

        let indices: Vec<usize> = (0..count).collect();
        self.exec.try_map(&indices, |&i| {
            let d = &drafts[i];
            let rel = relations[d.relation].to_vec();
            let prompt = PromptTemplate::new(rel.clone(), Vec::new());
            let (tokens, _) = prompt.render(&d.subject);
            let logits = model.next_logits(&tokens, &[])?;
            let old = argmax(&logits) as u32;

            let mut neighborhood = Vec::with_capacity(d.neighbor_subjects.len());
            for s in &d.neighbor_subjects {
                let mut p = rel.clone();
                p.extend_from_slice(s);
                let object = argmax(&model.next_logits(&p, &[])?) as u32;
                neighborhood.push(NeighborhoodPrompt {
                    prompt: p,
                    object: vec![object],
                });
            }

            // less likely half of the vocabulary, excluding neighbor answers
            let mut ranked: Vec<u32> = (0..vocab as u32).collect();
            ranked.sort_by(|&a, &b| logits[b as usize].total_cmp(&logits[a as usize]).then(a.cmp(&b)));
            let candidates: Vec<u32> = ranked[vocab / 2..]
                .iter()
                .copied()
                .filter(|t| *t != old && neighborhood.iter().all(|n| n.object[0] != *t))
                .collect();
            let new = candidates[((d.pick * candidates.len() as f64) as usize).min(candidates.len() - 1)];

            Ok(Fact {
                id: i as u64,
                subject: d.subject.clone(),
                paraphrases: d.paraphrase_prefixes.iter().map(|p| prompt.with_prefix(p)).collect(),
                prompt,
                old_object: vec![old],
                new_object: vec![new],
                neighborhood,
            })
        })
    }
}

/// `synth_facts` with the default shape: three-token subjects, eight
/// relations, two paraphrases and two neighborhood prompts per fact.
pub fn synth_facts(model: &ToyModel, count: usize, seed: u64) -> Result<Vec<Fact>> {
    SynthConfig::default().generate(model, count, seed)
}

/// For each column `k` of `keys`, a probe `q` with `cos(q, k) = c` for a `c`
/// drawn uniformly from `[lo, hi]`; `q` has the same norm as `k`. Returns
/// the probes and the drawn cosines.
pub fn controlled_probes(keys: &DenseMatrix, lo: f64, hi: f64, seed: u64) -> Result<(DenseMatrix, Vec<f64>)> {
    if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::InvalidArgument(format!("cosine range [{lo}, {hi}] is invalid")));
    }
    let d = keys.rows();
    if d < 2 {
        return Err(Error::InvalidArgument("controlled probes need at least two dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(keys.cols());
    let mut cosines = Vec::with_capacity(keys.cols());
    for j in 0..keys.cols() {
        let k = DVector::from_column_slice(keys.column(j));
        let norm = k.norm();
        if norm < crate::tensor::ZERO_NORM {
            return Err(Error::ZeroKey);
        }
        let unit = &k / norm;
        let c = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let ortho = loop {
            let g = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let o: DVector<f64> = &g - &unit * unit.dot(&g);
            let n = o.norm();
            if n > 1e-6 {
                break o / n;
            }
        };
        let q = (unit * c + ortho * (1.0 - c * c).max(0.0).sqrt()) * norm;
        probes.push(DenseVector::try_from_na(q)?);
        cosines.push(c);
    }
    Ok((DenseMatrix::from_columns(d, &probes)?, cosines))
}
