//! Key extraction averaged over model-generated prefixes.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_softmax, EditAttachment, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::DenseVector;

/// How many prefixes to draw, how long each is, and the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub count: usize,
    pub len: usize,
    pub seed: u64,
}

impl PrefixSpec {
    /// A single empty prefix: the key of the bare context.
    pub const EXACT: PrefixSpec = PrefixSpec {
        count: 1,
        len: 0,
        seed: 0,
    };

    pub fn prefixes(&self, model: &ToyModel) -> Result<Vec<Vec<u32>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count).map(|_| generate_prefix(model, self.len, &mut rng)).collect()
    }
}

/// Samples `len` tokens from the pristine model, starting from a uniformly
/// random token.
pub fn generate_prefix(model: &ToyModel, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    let mut tokens = Vec::with_capacity(len);
    if len == 0 {
        return Ok(tokens);
    }
    tokens.push(rng.random_range(0..model.cfg.vocab as u32));
    while tokens.len() < len {
        let logp = log_softmax(&model.next_logits(&tokens, &[])?);
        tokens.push(sample(&logp, rng));
    }
    Ok(tokens)
}

fn sample(logp: &DVector<f64>, rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as u32;
        }
    }
    (logp.len() - 1) as u32
}

/// Mean layer-`layer` key at the last token of `prefix + context` over the
/// given prefixes. `context` normally ends with the subject's last token.
pub fn extract_key_with_prefixes(
    model: &ToyModel,
    attachments: &[EditAttachment],
    context: &[u32],
    layer: usize,
    prefixes: &[Vec<u32>],
) -> Result<DenseVector> {
    model.check_layer(layer)?;
    if prefixes.is_empty() {
        return Err(Error::InvalidArgument("key extraction needs at least one prefix".into()));
    }
    if context.is_empty() {
        return Err(Error::InvalidArgument("empty key context".into()));
    }
    let mut sum = DVector::zeros(model.cfg.d_ffn);
    for prefix in prefixes {
        let mut tokens = prefix.clone();
        tokens.extend_from_slice(context);
        let trace = model.forward(&tokens, attachments)?;
        sum += &trace.keys[layer][tokens.len() - 1];
    }
    if prefixes.len() == 1 {
        return DenseVector::try_from_na(sum);
    }
    DenseVector::try_from_na(sum / prefixes.len() as f64)
}

/// `kᵢ = (1/N) Σⱼ k^l(xⱼ + sᵢ)` over `spec.count` sampled prefixes.
pub fn extract_key(
    model: &ToyModel,
    attachments: &[EditAttachment],
    subject: &[u32],
    layer: usize,
    spec: &PrefixSpec,
) -> Result<DenseVector> {
    if spec.count == 0 {
        return Err(Error::InvalidArgument("prefix count must be >= 1".into()));
    }
    let prefixes = spec.prefixes(model)?;
    extract_key_with_prefixes(model, attachments, subject, layer, &prefixes)
}
