//! Turning facts into layer edits: key extraction, residual fitting, and the
//! single- and multi-layer editing drivers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::{optimize_residual, ResidualFitConfig};
use super::keys::{extract_key_with_prefixes, PrefixSpec};
use super::{EditAttachment, ToyModel};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::facts::Fact;
use crate::kvdb::{FactId, NeuralKVDatabase, DEFAULT_GAMMA};
use crate::solvers::{alphaedit_delta, memit_delta, EditProblem, EditSolution, DEFAULT_BETA};
use crate::tensor::{null_space_projector, DenseMatrix, DenseVector, DEFAULT_EPS_RANK};

/// How a layer's edit is materialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum LayerEditMethod {
    /// Store keys and residuals in a gated database.
    NeuralDb { gamma: f64 },
    /// Closed-form MEMIT update preserving `preserve` synthetic keys.
    Memit { beta: f64, preserve: usize },
    /// Closed-form AlphaEdit update in the null space of `preserve` synthetic keys.
    AlphaEdit { beta: f64, preserve: usize, eps_rank: f64 },
}

impl Default for LayerEditMethod {
    fn default() -> Self {
        LayerEditMethod::NeuralDb { gamma: DEFAULT_GAMMA }
    }
}

impl LayerEditMethod {
    pub fn memit() -> Self {
        LayerEditMethod::Memit {
            beta: DEFAULT_BETA,
            preserve: 64,
        }
    }

    pub fn alphaedit() -> Self {
        LayerEditMethod::AlphaEdit {
            beta: DEFAULT_BETA,
            preserve: 64,
            eps_rank: DEFAULT_EPS_RANK,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerEditMethod::NeuralDb { .. } => "neuraldb",
            LayerEditMethod::Memit { .. } => "memit",
            LayerEditMethod::AlphaEdit { .. } => "alphaedit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub method: LayerEditMethod,
    pub fit: ResidualFitConfig,
    /// Prefixes averaged into each key. The default is the bare context, so
    /// replaying the edit prompt reproduces the stored key exactly.
    pub key_prefixes: PrefixSpec,
    /// Seed for the synthetic preserved keys of the linear methods.
    pub preserve_seed: u64,
    pub exec: Exec,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            method: LayerEditMethod::default(),
            fit: ResidualFitConfig::default(),
            key_prefixes: PrefixSpec::EXACT,
            preserve_seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Tokens up to and including the subject's last token.
pub fn key_context(fact: &Fact) -> Vec<u32> {
    let mut tokens = fact.prompt.before.clone();
    tokens.extend_from_slice(&fact.subject);
    tokens
}

/// Keys `K₁` (`d₁×m`) of the facts at `layer`.
pub fn compute_keys(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layer: usize,
    prefixes: &PrefixSpec,
    exec: Exec,
) -> Result<DenseMatrix> {
    model.check_layer(layer)?;
    let prefixes = prefixes.prefixes(model)?;
    let keys = exec.try_map(facts, |f| {
        extract_key_with_prefixes(model, attachments, &key_context(f), layer, &prefixes)
    })?;
    DenseMatrix::from_columns(model.cfg.d_ffn, &keys)
}

/// Fitted residuals `R₁` (`d₂×m`) of the facts at `layer`.
pub fn compute_residuals(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layer: usize,
    fit: &ResidualFitConfig,
    exec: Exec,
) -> Result<DenseMatrix> {
    let rs = exec.try_map(facts, |f| Ok::<_, Error>(optimize_residual(model, attachments, f, layer, fit)?.residual))?;
    DenseMatrix::from_columns(model.cfg.d_model, &rs)
}

/// Keys of `n` random token strings at `layer`, standing in for the
/// preserved-knowledge keys `K₀`.
pub fn preserved_keys(
    model: &ToyModel,
    attachments: &[EditAttachment],
    layer: usize,
    n: usize,
    seed: u64,
) -> Result<DenseMatrix> {
    model.check_layer(layer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_len = model.cfg.max_seq.min(8);
    let mut cols = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..model.cfg.vocab as u32)).collect();
        let trace = model.forward(&tokens, attachments)?;
        cols.push(DenseVector::from_na(trace.keys[layer][len - 1].clone()));
    }
    DenseMatrix::from_columns(model.cfg.d_ffn, &cols)
}

/// One layer's edit and the data it was built from.
#[derive(Debug, Clone)]
pub struct LayerEdit {
    pub layer: usize,
    pub keys: DenseMatrix,
    /// Residuals written at this layer.
    pub residuals: DenseMatrix,
    pub attachment: EditAttachment,
    /// Present for the linear methods.
    pub solution: Option<EditSolution>,
}

fn materialise(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layer: usize,
    keys: DenseMatrix,
    residuals: DenseMatrix,
    cfg: &EditConfig,
) -> Result<LayerEdit> {
    let (attachment, solution) = match cfg.method {
        LayerEditMethod::NeuralDb { gamma } => {
            let mut db = NeuralKVDatabase::new(model.cfg.d_ffn, model.cfg.d_model, gamma, layer)?;
            for (i, f) in facts.iter().enumerate() {
                db.insert_with_id(FactId(f.id), &keys.column_vector(i), &residuals.column_vector(i), None)?;
            }
            (EditAttachment::gated(db), None)
        }
        LayerEditMethod::Memit { beta, preserve } => {
            let k0 = preserved_keys(model, attachments, layer, preserve, cfg.preserve_seed)?;
            let problem = EditProblem::from_residuals(model.w_out(layer)?, keys.clone(), &residuals, k0, beta)?;
            let sol = memit_delta(&problem)?;
            (EditAttachment::linear(layer, sol.delta.clone()), Some(sol))
        }
        LayerEditMethod::AlphaEdit {
            beta,
            preserve,
            eps_rank,
        } => {
            let k0 = preserved_keys(model, attachments, layer, preserve, cfg.preserve_seed)?;
            let projector = null_space_projector(&k0, eps_rank)?;
            let problem = EditProblem::from_residuals(model.w_out(layer)?, keys.clone(), &residuals, k0, beta)?;
            let sol = alphaedit_delta(&problem, &projector)?;
            (EditAttachment::linear(layer, sol.delta.clone()), Some(sol))
        }
    };
    Ok(LayerEdit {
        layer,
        keys,
        residuals,
        attachment,
        solution,
    })
}

fn check_facts(facts: &[Fact]) -> Result<()> {
    if facts.is_empty() {
        return Err(Error::InvalidArgument("no facts to edit".into()));
    }
    Ok(())
}

/// Edits `facts` into `layer`, on top of `attachments` (which must all sit
/// at or below `layer`).
pub fn edit_layer(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layer: usize,
    cfg: &EditConfig,
) -> Result<LayerEdit> {
    check_facts(facts)?;
    let keys = compute_keys(model, attachments, facts, layer, &cfg.key_prefixes, cfg.exec)?;
    let residuals = compute_residuals(model, attachments, facts, layer, &cfg.fit, cfg.exec)?;
    materialise(model, attachments, facts, layer, keys, residuals, cfg)
}

#[derive(Debug, Clone)]
pub struct MultiLayerEdit {
    pub edits: Vec<LayerEdit>,
    /// Residuals fitted once at the last layer (old method only).
    pub target_residuals: Option<DenseMatrix>,
}

impl MultiLayerEdit {
    /// The base attachments followed by one attachment per edited layer.
    pub fn attachments(&self, base: &[EditAttachment]) -> Vec<EditAttachment> {
        base.iter()
            .cloned()
            .chain(self.edits.iter().map(|e| e.attachment.clone()))
            .collect()
    }
}

fn check_layers(model: &ToyModel, attachments: &[EditAttachment], layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("no layers to edit".into()));
    }
    for &l in layers {
        model.check_layer(l)?;
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("layers must be strictly ascending, got {layers:?}")));
    }
    if let Some(a) = attachments.iter().find(|a| a.layer >= layers[0]) {
        return Err(Error::InvalidArgument(format!(
            "existing edit at layer {} collides with edited layers {layers:?}",
            a.layer
        )));
    }
    Ok(())
}

/// Layer-`layer` output at each fact's subject position, `d₂×m`.
fn subject_states(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layer: usize,
    exec: Exec,
) -> Result<DenseMatrix> {
    let hs = exec.try_map(facts, |f| {
        let trace = model.forward(&key_context(f), attachments)?;
        Ok::<_, Error>(DenseVector::from_na(trace.hidden[layer + 1].last().unwrap().clone()))
    })?;
    DenseMatrix::from_columns(model.cfg.d_model, &hs)
}

/// Old multi-layer method: the residual `R` is fitted once at the last layer
/// `l_n`, which fixes the target state `z = h^{l_n} + R`. Each layer in turn
/// recomputes keys under the edits made so far and writes
/// `(z − h^{l_n}_current) / (l_n − l + 1)`, so the remaining gap is spread
/// over the layers still to come and the last layer closes it.
pub fn multilayer_edit_old(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layers: &[usize],
    cfg: &EditConfig,
) -> Result<MultiLayerEdit> {
    check_facts(facts)?;
    check_layers(model, attachments, layers)?;
    let last = *layers.last().unwrap();
    let target = compute_residuals(model, attachments, facts, last, &cfg.fit, cfg.exec)?;
    let start = subject_states(model, attachments, facts, last, cfg.exec)?;

    let mut current = attachments.to_vec();
    let mut edits = Vec::with_capacity(layers.len());
    for &l in layers {
        let keys = compute_keys(model, &current, facts, l, &cfg.key_prefixes, cfg.exec)?;
        let now = subject_states(model, &current, facts, last, cfg.exec)?;
        // R + (h_start − h_now) is bitwise R while nothing has moved yet
        let gap = target.add(&start.sub(&now)?)?;
        let divisor = (last - l + 1) as f64;
        let residuals = if divisor == 1.0 { gap } else { gap.scale(1.0 / divisor) };
        let edit = materialise(model, &current, facts, l, keys, residuals, cfg)?;
        current.push(edit.attachment.clone());
        edits.push(edit);
    }
    Ok(MultiLayerEdit {
        edits,
        target_residuals: Some(target),
    })
}

/// New multi-layer method: every layer recomputes keys and refits residuals
/// under the edits made so far.
pub fn multilayer_edit_new(
    model: &ToyModel,
    attachments: &[EditAttachment],
    facts: &[Fact],
    layers: &[usize],
    cfg: &EditConfig,
) -> Result<MultiLayerEdit> {
    check_facts(facts)?;
    check_layers(model, attachments, layers)?;
    let mut current = attachments.to_vec();
    let mut edits = Vec::with_capacity(layers.len());
    for &l in layers {
        let edit = edit_layer(model, &current, facts, l, cfg)?;
        current.push(edit.attachment.clone());
        edits.push(edit);
    }
    Ok(MultiLayerEdit {
        edits,
        target_residuals: None,
    })
}
