//! A small synthetic transformer that plays the role of the edited LLM.
//!
//! Each block follows the usual pre-norm residual recursion
//!
//! ```text
//! h^l = h^{l-1} + a^l + m^l
//! k^l = σ(W_in^l · N(h^{l-1} + a^l) + b_in^l),   m^l = W_out^l · k^l
//! ```
//!
//! with σ = GELU (tanh form) and N = layer norm. The attention block is a
//! deterministic stand-in: a seeded linear map applied to the causal mean of
//! the previous hidden states. Edits attach to a block's FFN value: a gated
//! database adds `g(k^l)`, a linear edit adds `Δ·k^l`.

mod checkpoint;
pub mod edit;
pub mod fit;
pub mod keys;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvdb::{FactId, NeuralKVDatabase};
use crate::tensor::DenseMatrix;

pub use checkpoint::{MODEL_MAGIC, MODEL_VERSION};
pub use edit::{
    compute_keys, compute_residuals, edit_layer, key_context, multilayer_edit_new, multilayer_edit_old,
    preserved_keys, EditConfig, LayerEdit, LayerEditMethod, MultiLayerEdit,
};
pub use fit::{optimize_residual, FitObjective, ResidualFit, ResidualFitConfig, ESSENCE_SUFFIX};
pub use keys::{extract_key, extract_key_with_prefixes, generate_prefix, PrefixSpec};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab: usize,
    pub d_model: usize,
    /// FFN intermediate width (`d₁`).
    pub d_ffn: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            d_ffn: 128,
            n_layers: 4,
            max_seq: 64,
            seed: 42,
        }
    }
}

impl ToyConfig {
    /// The mid-stack layer edited by default.
    pub fn default_edit_layer(&self) -> usize {
        self.n_layers / 2
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.d_model < 2 || self.d_ffn == 0 || self.n_layers == 0 || self.max_seq == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Attention stand-in, `d_model × d_model`.
    pub attn: DMatrix<f64>,
    pub ln_gain: DVector<f64>,
    pub ln_bias: DVector<f64>,
    /// `d_ffn × d_model`.
    pub w_in: DMatrix<f64>,
    /// FFN input bias, `d_ffn`.
    pub b_in: DVector<f64>,
    /// `d_model × d_ffn`.
    pub w_out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub(crate) cfg: ToyConfig,
    /// `d_model × vocab`; column `t` embeds token `t`.
    pub(crate) tok_emb: DMatrix<f64>,
    /// `d_model × max_seq`.
    pub(crate) pos_emb: DMatrix<f64>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) lnf_gain: DVector<f64>,
    pub(crate) lnf_bias: DVector<f64>,
    /// `vocab × d_model`.
    pub(crate) head: DMatrix<f64>,
}

/// What an attachment contributes to its layer's FFN value.
#[derive(Debug, Clone, PartialEq)]
pub enum Attachment {
    Gated(NeuralKVDatabase),
    Linear(DenseMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditAttachment {
    pub layer: usize,
    pub edit: Attachment,
}

impl EditAttachment {
    pub fn gated(db: NeuralKVDatabase) -> Self {
        Self {
            layer: db.layer(),
            edit: Attachment::Gated(db),
        }
    }

    pub fn linear(layer: usize, delta: DenseMatrix) -> Self {
        Self {
            layer,
            edit: Attachment::Linear(delta),
        }
    }

    pub fn database(&self) -> Option<&NeuralKVDatabase> {
        match &self.edit {
            Attachment::Gated(db) => Some(db),
            Attachment::Linear(_) => None,
        }
    }

    pub fn database_mut(&mut self) -> Option<&mut NeuralKVDatabase> {
        match &mut self.edit {
            Attachment::Gated(db) => Some(db),
            Attachment::Linear(_) => None,
        }
    }
}

/// A gate that fired during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateHit {
    pub layer: usize,
    pub position: usize,
    pub entry: usize,
    pub fact: FactId,
    pub similarity: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `hidden[l][t]`: residual stream entering block `l`; `hidden[n_layers]` is the output.
    pub hidden: Vec<Vec<DVector<f64>>>,
    /// `keys[l][t] = σ(W_in^l · N(h^{l-1}_t + a^l_t) + b_in^l)`.
    pub keys: Vec<Vec<DVector<f64>>>,
    /// Next-token logits at every position.
    pub logits: Vec<DVector<f64>>,
    pub hits: Vec<GateHit>,
}

impl ForwardTrace {
    pub fn last_logits(&self) -> &DVector<f64> {
        self.logits.last().expect("non-empty sequence")
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

/// Layer-norm intermediates needed for the backward pass.
pub(crate) struct NormCache {
    pub xhat: DVector<f64>,
    pub inv_std: f64,
}

pub(crate) fn layer_norm(x: &DVector<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> (DVector<f64>, NormCache) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let xhat = x.map(|v| (v - mean) * inv_std);
    let y = xhat.component_mul(gain) + bias;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(gy: &DVector<f64>, gain: &DVector<f64>, cache: &NormCache) -> DVector<f64> {
    let n = gy.len() as f64;
    let gxhat = gy.component_mul(gain);
    let mean_g = gxhat.sum() / n;
    let mean_gx = gxhat.dot(&cache.xhat) / n;
    (gxhat - cache.xhat.map(|x| x * mean_gx)).add_scalar(-mean_g) * cache.inv_std
}

pub(crate) fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.add_scalar(-lse)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

// Initialisation scales. The negative FFN bias leaves most key units near
// zero, so keys of unrelated contexts are close to orthogonal; the head is
// sharp enough that the pristine model has clear argmax answers.
const POS_STD: f64 = 0.1;
const ATTN_GAIN: f64 = 0.7;
const HEAD_GAIN: f64 = 3.0;
const FFN_BIAS: f64 = -1.0;

impl ToyModel {
    /// Random initialisation, fully determined by `cfg.seed`.
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let tok_emb = normal_matrix(&mut rng, d, cfg.vocab, 1.0);
        let pos_emb = normal_matrix(&mut rng, d, cfg.max_seq, POS_STD);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                attn: normal_matrix(&mut rng, d, d, ATTN_GAIN / (d as f64).sqrt()),
                ln_gain: DVector::from_element(d, 1.0),
                ln_bias: DVector::zeros(d),
                w_in: normal_matrix(&mut rng, f, d, 1.0 / (d as f64).sqrt()),
                b_in: DVector::from_element(f, FFN_BIAS),
                w_out: normal_matrix(&mut rng, d, f, 1.0 / (f as f64).sqrt()),
            })
            .collect();
        let head = normal_matrix(&mut rng, cfg.vocab, d, HEAD_GAIN / (d as f64).sqrt());
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: DVector::from_element(d, 1.0),
            lnf_bias: DVector::zeros(d),
            head,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// `d_model × vocab`.
    pub fn token_embeddings(&self) -> &DMatrix<f64> {
        &self.tok_emb
    }

    /// `d_model × max_seq`.
    pub fn position_embeddings(&self) -> &DMatrix<f64> {
        &self.pos_emb
    }

    /// Gain and bias of the final layer norm.
    pub fn final_norm(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.lnf_gain, &self.lnf_bias)
    }

    /// `vocab × d_model`.
    pub fn head(&self) -> &DMatrix<f64> {
        &self.head
    }

    /// `W_out` of a block as a `d_model × d_ffn` matrix (the edited parameter `W`).
    pub fn w_out(&self, layer: usize) -> Result<DenseMatrix> {
        self.check_layer(layer)?;
        Ok(DenseMatrix::from_na(self.blocks[layer].w_out.clone()))
    }

    pub(crate) fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.cfg.n_layers {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range (model has {})",
                self.cfg.n_layers
            )));
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.cfg.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!("token {t} outside vocab {}", self.cfg.vocab)));
        }
        Ok(())
    }

    pub(crate) fn check_attachments(&self, attachments: &[EditAttachment]) -> Result<()> {
        let mut seen = vec![false; self.cfg.n_layers];
        for a in attachments {
            self.check_layer(a.layer)?;
            if std::mem::replace(&mut seen[a.layer], true) {
                return Err(Error::InvalidArgument(format!("two attachments on layer {}", a.layer)));
            }
            let (d1, d2) = (self.cfg.d_ffn, self.cfg.d_model);
            match &a.edit {
                Attachment::Gated(db) => {
                    if db.d1() != d1 || db.d2() != d2 {
                        return Err(Error::dims(
                            "gated attachment",
                            format!("{d1}/{d2}"),
                            format!("{}/{}", db.d1(), db.d2()),
                        ));
                    }
                    if db.layer() != a.layer {
                        return Err(Error::InvalidArgument(format!(
                            "database tagged for layer {} attached at layer {}",
                            db.layer(),
                            a.layer
                        )));
                    }
                }
                Attachment::Linear(delta) => {
                    if delta.rows() != d2 || delta.cols() != d1 {
                        return Err(Error::dims(
                            "linear attachment",
                            format!("{d2}x{d1}"),
                            format!("{}x{}", delta.rows(), delta.cols()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn embed(&self, token: u32, position: usize) -> DVector<f64> {
        self.tok_emb.column(token as usize) + self.pos_emb.column(position)
    }

    pub(crate) fn decode(&self, h: &DVector<f64>) -> DVector<f64> {
        let (n, _) = layer_norm(h, &self.lnf_gain, &self.lnf_bias);
        &self.head * n
    }

    /// Full forward pass with per-layer traces.
    pub fn forward(&self, tokens: &[u32], attachments: &[EditAttachment]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        self.check_attachments(attachments)?;
        let mut by_layer: Vec<Option<&Attachment>> = vec![None; self.cfg.n_layers];
        for a in attachments {
            by_layer[a.layer] = Some(&a.edit);
        }

        let t_len = tokens.len();
        let mut hidden = Vec::with_capacity(self.cfg.n_layers + 1);
        let mut keys = Vec::with_capacity(self.cfg.n_layers);
        let mut hits = Vec::new();
        hidden.push(tokens.iter().enumerate().map(|(t, &tok)| self.embed(tok, t)).collect::<Vec<_>>());

        for (l, block) in self.blocks.iter().enumerate() {
            let prev = &hidden[l];
            let mut next = Vec::with_capacity(t_len);
            let mut layer_keys = Vec::with_capacity(t_len);
            let mut prefix = DVector::zeros(self.cfg.d_model);
            for (t, x) in prev.iter().enumerate() {
                prefix += x;
                let a = &block.attn * (&prefix / (t + 1) as f64);
                let u = x + a;
                let (n, _) = layer_norm(&u, &block.ln_gain, &block.ln_bias);
                let k = (&block.w_in * n + &block.b_in).map(gelu);
                let mut v = &block.w_out * &k;
                match by_layer[l] {
                    Some(Attachment::Gated(db)) => {
                        if let Some((entry, similarity)) = db.lookup(k.as_slice())? {
                            v += DVector::from_column_slice(db.residual(entry));
                            hits.push(GateHit {
                                layer: l,
                                position: t,
                                entry,
                                fact: db.ids()[entry],
                                similarity,
                            });
                        }
                    }
                    Some(Attachment::Linear(delta)) => {
                        v += delta.as_na() * &k;
                    }
                    None => {}
                }
                next.push(u + v);
                layer_keys.push(k);
            }
            hidden.push(next);
            keys.push(layer_keys);
        }

        let logits = hidden[self.cfg.n_layers].iter().map(|h| self.decode(h)).collect();
        Ok(ForwardTrace {
            hidden,
            keys,
            logits,
            hits,
        })
    }

    /// Next-token logits after the last token.
    pub fn next_logits(&self, tokens: &[u32], attachments: &[EditAttachment]) -> Result<DVector<f64>> {
        Ok(self.forward(tokens, attachments)?.last_logits().clone())
    }

    /// `log P(object | prompt)` under teacher forcing.
    pub fn sequence_logprob(&self, prompt: &[u32], object: &[u32], attachments: &[EditAttachment]) -> Result<f64> {
        Ok(self.score_object(prompt, object, attachments)?.0)
    }

    /// Teacher-forced `(log-probability, greedy match)` of `object` after `prompt`.
    pub fn score_object(&self, prompt: &[u32], object: &[u32], attachments: &[EditAttachment]) -> Result<(f64, bool)> {
        if object.is_empty() {
            return Err(Error::InvalidArgument("empty object".into()));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&object[..object.len() - 1]);
        let trace = self.forward(&tokens, attachments)?;
        let base = prompt.len() - 1;
        let mut logp = 0.0;
        let mut greedy = true;
        for (i, &o) in object.iter().enumerate() {
            let logits = &trace.logits[base + i];
            logp += log_softmax(logits)[o as usize];
            greedy &= argmax(logits) == o as usize;
        }
        Ok((logp, greedy))
    }
}
