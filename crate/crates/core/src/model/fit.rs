//! Residual fitting: find `r` such that adding it to the layer-`l` output at
//! the subject's last token makes the model produce the new object.
//!
//! The objective averages the target negative log-likelihood over the bare
//! prompt and `N − 1` sampled prefixes, plus a weighted KL term that keeps the
//! next-token distribution after `"{subject} is a"` close to the unedited one:
//!
//! ```text
//! L(r) = (1/N) Σⱼ −log P_{h^l += r}(ô | xⱼ + p) + λ · KL(P_{h^l += r}(· | p′) ‖ P(· | p′))
//! ```
//!
//! Gradients are computed by hand through the blocks above `l`, the final
//! norm and the decoder head, and minimised with Adam.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::keys::generate_prefix;
use super::{gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax, EditAttachment, NormCache, ToyModel};
use crate::error::{Error, Result};
use crate::facts::Fact;
use crate::tensor::DenseVector;

/// Relation tokens standing in for "is a" in the KL prompt `"{subject} is a"`.
pub const ESSENCE_SUFFIX: [u32; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualFitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    /// Number of prompts averaged in the likelihood term; the first is the
    /// bare prompt, the rest carry sampled prefixes.
    pub prefix_count: usize,
    pub prefix_len: usize,
    /// Optional cap on `‖r‖`, enforced after every step.
    pub clamp_norm: Option<f64>,
    /// Stop once the objective falls below this value.
    pub early_stop_loss: Option<f64>,
    pub seed: u64,
}

impl Default for ResidualFitConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            learning_rate: 0.1,
            kl_weight: 0.0625,
            prefix_count: 3,
            prefix_len: 3,
            clamp_norm: None,
            early_stop_loss: Some(0.05),
            seed: 0,
        }
    }
}

impl ResidualFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.prefix_count == 0 {
            return Err(Error::InvalidArgument("prefix_count must be >= 1".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("kl_weight must be >= 0, got {}", self.kl_weight)));
        }
        if let Some(c) = self.clamp_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clamp_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

enum Target {
    /// `(position, token)` pairs whose log-probabilities are maximised.
    Nll(Vec<(usize, u32)>),
    /// Reference log-probabilities at the final position.
    Kl(DVector<f64>),
}

/// One prompt the objective runs through the upper stack.
struct Instance {
    /// Position receiving `r`.
    start: usize,
    /// Layer-`l` outputs at positions `start..`.
    base: Vec<DVector<f64>>,
    /// Per upper block, the sum of its inputs at positions `< start`.
    prefix_sums: Vec<DVector<f64>>,
    target: Target,
}

struct BlockCache {
    norm: NormCache,
    z: DVector<f64>,
}

/// The residual-fitting objective for one fact at one layer.
pub struct FitObjective<'m> {
    model: &'m ToyModel,
    layer: usize,
    instances: Vec<Instance>,
    nll_count: usize,
    kl_weight: f64,
}

impl<'m> FitObjective<'m> {
    /// Attachments may sit at or below `layer`; the blocks above it must be
    /// unedited so that the objective stays smooth.
    pub fn new(
        model: &'m ToyModel,
        attachments: &[EditAttachment],
        fact: &Fact,
        layer: usize,
        cfg: &ResidualFitConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        model.check_layer(layer)?;
        if let Some(a) = attachments.iter().find(|a| a.layer > layer) {
            return Err(Error::InvalidArgument(format!(
                "residual fit at layer {layer} cannot run with an edit attached above it (layer {})",
                a.layer
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut prefixes = vec![Vec::new()];
        for _ in 1..cfg.prefix_count {
            prefixes.push(generate_prefix(model, cfg.prefix_len, &mut rng)?);
        }

        let (prompt, subject_last) = fact.rendered_prompt();
        let object = &fact.new_object;
        let mut instances = Vec::with_capacity(prefixes.len() + 1);
        for prefix in &prefixes {
            let mut tokens = prefix.clone();
            tokens.extend_from_slice(&prompt);
            let last = tokens.len() - 1;
            tokens.extend_from_slice(&object[..object.len() - 1]);
            let targets = object.iter().enumerate().map(|(i, &o)| (last + i, o)).collect();
            instances.push(Self::instance(
                model,
                attachments,
                layer,
                &tokens,
                prefix.len() + subject_last,
                Target::Nll(targets),
            )?);
        }
        let nll_count = instances.len();
        if cfg.kl_weight > 0.0 {
            let mut tokens = fact.subject.clone();
            tokens.extend_from_slice(&ESSENCE_SUFFIX);
            let trace = model.forward(&tokens, attachments)?;
            let reference = log_softmax(trace.last_logits());
            instances.push(Self::instance(
                model,
                attachments,
                layer,
                &tokens,
                fact.subject.len() - 1,
                Target::Kl(reference),
            )?);
        }
        Ok(Self {
            model,
            layer,
            instances,
            nll_count,
            kl_weight: cfg.kl_weight,
        })
    }

    fn instance(
        model: &ToyModel,
        attachments: &[EditAttachment],
        layer: usize,
        tokens: &[u32],
        start: usize,
        target: Target,
    ) -> Result<Instance> {
        let trace = model.forward(tokens, attachments)?;
        let base = trace.hidden[layer + 1][start..].to_vec();
        let prefix_sums = (layer + 1..model.n_layers())
            .map(|j| {
                trace.hidden[j][..start]
                    .iter()
                    .fold(DVector::zeros(model.cfg.d_model), |acc, h| acc + h)
            })
            .collect();
        Ok(Instance {
            start,
            base,
            prefix_sums,
            target,
        })
    }

    pub fn dim(&self) -> usize {
        self.model.cfg.d_model
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn loss(&self, r: &DenseVector) -> f64 {
        self.evaluate(r.as_na(), false).0
    }

    pub fn loss_and_grad(&self, r: &DenseVector) -> (f64, DenseVector) {
        let (loss, grad) = self.evaluate(r.as_na(), true);
        (loss, DenseVector::from_na(grad))
    }

    /// Mean target negative log-likelihood, without the KL term.
    pub fn target_nll(&self, r: &DenseVector) -> f64 {
        let mut total = 0.0;
        for inst in &self.instances[..self.nll_count] {
            total += self.run_instance(inst, r.as_na(), false).0;
        }
        total / self.nll_count as f64
    }

    fn evaluate(&self, r: &DVector<f64>, want_grad: bool) -> (f64, DVector<f64>) {
        let mut loss = 0.0;
        let mut grad = DVector::zeros(self.dim());
        for (i, inst) in self.instances.iter().enumerate() {
            let weight = if i < self.nll_count {
                1.0 / self.nll_count as f64
            } else {
                self.kl_weight
            };
            let (l, g) = self.run_instance(inst, r, want_grad);
            loss += weight * l;
            if let Some(g) = g {
                grad.axpy(weight, &g, 1.0);
            }
        }
        (loss, grad)
    }

    /// Forward (and optionally backward) through the blocks above `layer`.
    fn run_instance(&self, inst: &Instance, r: &DVector<f64>, want_grad: bool) -> (f64, Option<DVector<f64>>) {
        let model = self.model;
        let upper = &model.blocks[self.layer + 1..];
        let mut xs = inst.base.clone();
        xs[0] += r;

        let mut caches: Vec<Vec<BlockCache>> = Vec::with_capacity(upper.len());
        for (block, prefix_sum) in upper.iter().zip(&inst.prefix_sums) {
            let mut sum = prefix_sum.clone();
            let mut ys = Vec::with_capacity(xs.len());
            let mut layer_cache = Vec::with_capacity(xs.len());
            for (i, x) in xs.iter().enumerate() {
                let t = inst.start + i;
                sum += x;
                let a = &block.attn * (&sum / (t + 1) as f64);
                let u = x + a;
                let (n, norm) = layer_norm(&u, &block.ln_gain, &block.ln_bias);
                let z = &block.w_in * n + &block.b_in;
                let v = &block.w_out * z.map(gelu);
                ys.push(u + v);
                layer_cache.push(BlockCache { norm, z });
            }
            caches.push(layer_cache);
            xs = ys;
        }

        let mut loss = 0.0;
        let mut g: Vec<DVector<f64>> = vec![DVector::zeros(model.cfg.d_model); xs.len()];
        let seed_grad = |pos: usize, dlogits: DVector<f64>, g: &mut Vec<DVector<f64>>, norm: &NormCache| {
            let gn = model.head.tr_mul(&dlogits);
            g[pos - inst.start] += layer_norm_backward(&gn, &model.lnf_gain, norm);
        };
        match &inst.target {
            Target::Nll(targets) => {
                for &(pos, tok) in targets {
                    let (n, norm) = layer_norm(&xs[pos - inst.start], &model.lnf_gain, &model.lnf_bias);
                    let logp = log_softmax(&(&model.head * n));
                    loss -= logp[tok as usize];
                    if want_grad {
                        let mut d = logp.map(f64::exp);
                        d[tok as usize] -= 1.0;
                        seed_grad(pos, d, &mut g, &norm);
                    }
                }
            }
            Target::Kl(reference) => {
                let pos = inst.start + xs.len() - 1;
                let (n, norm) = layer_norm(&xs[pos - inst.start], &model.lnf_gain, &model.lnf_bias);
                let logp = log_softmax(&(&model.head * n));
                let p = logp.map(f64::exp);
                let diff = &logp - reference;
                let kl = p.dot(&diff);
                loss += kl;
                if want_grad {
                    let d = p.component_mul(&diff.add_scalar(-kl));
                    seed_grad(pos, d, &mut g, &norm);
                }
            }
        }
        if !want_grad {
            return (loss, None);
        }

        for (block, layer_cache) in upper.iter().zip(&caches).rev() {
            let mut gx = Vec::with_capacity(g.len());
            let mut gu_all = Vec::with_capacity(g.len());
            for (gy, cache) in g.iter().zip(layer_cache) {
                let gk = block.w_out.tr_mul(gy);
                let gz = gk.zip_map(&cache.z, |gk, z| gk * gelu_grad(z));
                let gn = block.w_in.tr_mul(&gz);
                let gu = gy + layer_norm_backward(&gn, &block.ln_gain, &cache.norm);
                gx.push(gu.clone());
                gu_all.push(gu);
            }
            // a_t = A · (Σ_{s≤t} x_s)/(t+1) feeds every later position
            let mut carry = DVector::zeros(model.cfg.d_model);
            for i in (0..gu_all.len()).rev() {
                let t = inst.start + i;
                carry.axpy(1.0 / (t + 1) as f64, &gu_all[i], 1.0);
                gx[i] += block.attn.tr_mul(&carry);
            }
            g = gx;
        }
        (loss, Some(g.swap_remove(0)))
    }
}

#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub residual: DenseVector,
    /// Objective value before each step.
    pub losses: Vec<f64>,
    pub steps_run: usize,
}

/// Minimises the fitting objective with Adam starting from `r = 0`.
pub fn optimize_residual(
    model: &ToyModel,
    attachments: &[EditAttachment],
    fact: &Fact,
    layer: usize,
    cfg: &ResidualFitConfig,
) -> Result<ResidualFit> {
    let objective = FitObjective::new(model, attachments, fact, layer, cfg)?;
    let d = objective.dim();
    let mut r = DVector::zeros(d);
    let mut m = DVector::zeros(d);
    let mut v = DVector::<f64>::zeros(d);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let (loss, grad) = objective.evaluate(&r, true);
        losses.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, trace: losses });
        }
        if cfg.early_stop_loss.is_some_and(|stop| loss < stop) {
            break;
        }
        m = m * b1 + &grad * (1.0 - b1);
        v = v * b2 + grad.map(|g| g * g) * (1.0 - b2);
        let bc1 = 1.0 - b1.powi(step as i32 + 1);
        let bc2 = 1.0 - b2.powi(step as i32 + 1);
        r -= m.zip_map(&v, |m, v| cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + eps));
        if let Some(c) = cfg.clamp_norm {
            let n = r.norm();
            if n > c {
                r *= c / n;
            }
        }
        steps_run += 1;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence {
            step: steps_run,
            trace: losses,
        });
    }
    Ok(ResidualFit {
        residual: DenseVector::from_na(r),
        losses,
        steps_run,
    })
}
