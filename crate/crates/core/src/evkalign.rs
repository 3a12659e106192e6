//! Drift-aware alignment term for value optimization: top-k renormalized KL
//! between the pre-edit next-token distribution on sampled EVK instances and
//! the distribution under the current FFN-output delta.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EditRequest;
use crate::evkbench::{build_evk, BenchError, DriftType, EvkInstance};
use crate::linalg::{RngStream, Vector};
use crate::model::{
    softmax, LossSpec, LossTerm, ModelError, ModelInput, Objective, SharedDelta, ToyModel,
};

/// Floor applied to renormalized post-edit probabilities inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid align config: {0}")]
    InvalidConfig(String),
    #[error("no probability mass on the selected indices")]
    ZeroMass,
    #[error("k = {k} is outside 1..={dim}")]
    BadK { k: usize, dim: usize },
    #[error("distributions differ in length: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSampling {
    #[default]
    UniformOverTypes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub lambda: f64,
    pub n_instances: usize,
    pub sigma: f64,
    pub k_early: usize,
    pub k_late: usize,
    /// `k_late` is used from step `stage_switch_fraction · v_steps` on.
    pub stage_switch_fraction: f64,
    pub drift_sampling: DriftSampling,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            n_instances: 1,
            sigma: 0.1,
            k_early: 10,
            k_late: 50,
            stage_switch_fraction: 0.5,
            drift_sampling: DriftSampling::UniformOverTypes,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), AlignError> {
        let bad = |m: String| Err(AlignError::InvalidConfig(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if self.n_instances == 0 {
            return bad("n_instances must be >= 1".into());
        }
        if !(1 <= self.k_early && self.k_early <= self.k_late && self.k_late <= vocab_size) {
            return bad(format!(
                "need 1 <= k_early ({}) <= k_late ({}) <= vocab_size ({vocab_size})",
                self.k_early, self.k_late
            ));
        }
        if !(0.0..=1.0).contains(&self.stage_switch_fraction) {
            return bad("stage_switch_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// First step that uses `k_late`.
    pub fn stage_switch_step(&self, v_steps: usize) -> f64 {
        self.stage_switch_fraction * v_steps as f64
    }

    pub fn k_for_step(&self, step: usize, v_steps: usize) -> usize {
        if (step as f64) < self.stage_switch_step(v_steps) {
            self.k_early
        } else {
            self.k_late
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceDistribution {
    pub instance: EvkInstance,
    /// Pre-edit next-token distribution on the instance.
    pub probs: Vector,
}

/// `n_instances` EVK instances of the edit prompt with drift types drawn
/// uniformly, each paired with the pre-edit distribution. Instance `i` uses
/// `rng.derive(i)`.
pub fn sample_align_instances(
    request: &EditRequest,
    model_pre: &ToyModel,
    config: &AlignConfig,
    rng: &RngStream,
) -> Result<Vec<ReferenceDistribution>, AlignError> {
    config.validate(model_pre.config.vocab_size)?;
    (0..config.n_instances)
        .map(|i| {
            let stream = rng.derive(i as u64);
            let drift = match config.drift_sampling {
                DriftSampling::UniformOverTypes => {
                    DriftType::ALL_TYPES[stream.derive_named("drift").sampler().below(3)]
                }
            };
            let instance = build_evk(
                &request.prompt,
                model_pre,
                drift,
                config.sigma,
                &stream.derive_named("noise"),
            )?;
            let trace = model_pre.forward(ModelInput::Embeddings(&instance.perturbed_embedding), &[])?;
            Ok(ReferenceDistribution {
                probs: ToyModel::next_token_distribution(&trace),
                instance,
            })
        })
        .collect()
}

/// Indices of the `k` largest entries, largest first, lower index on ties.
pub fn topk_indices(p: &[f64], k: usize) -> Result<Vec<usize>, AlignError> {
    if k == 0 || k > p.len() {
        return Err(AlignError::BadK { k, dim: p.len() });
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `p` restricted to `idx` and rescaled to sum to one.
pub fn renormalize(p: &[f64], idx: &[usize]) -> Result<Vec<f64>, AlignError> {
    let mass: f64 = idx.iter().map(|&i| p[i]).sum();
    if !(mass > 0.0) {
        return Err(AlignError::ZeroMass);
    }
    Ok(idx.iter().map(|&i| p[i] / mass).collect())
}

/// `KL(ref ‖ post)` over the renormalized top-`k` support of `p_ref`.
pub fn kl_topk(p_ref: &[f64], p_post: &[f64], k: usize) -> Result<f64, AlignError> {
    if p_ref.len() != p_post.len() {
        return Err(AlignError::DimMismatch(p_ref.len(), p_post.len()));
    }
    let idx = topk_indices(p_ref, k)?;
    let r = renormalize(p_ref, &idx)?;
    let q = renormalize(p_post, &idx)?;
    Ok(r
        .iter()
        .zip(&q)
        .filter(|(&ri, _)| ri > 0.0)
        .map(|(&ri, &qi)| ri * (ri.ln() - qi.max(LOG_FLOOR).ln()))
        .sum())
}

pub fn combined_loss(nll: f64, l_evk: f64, lambda: f64) -> f64 {
    nll + lambda * l_evk
}

/// [`kl_topk`] against a fixed reference as a differentiable function of the
/// post-edit logits.
#[derive(Clone, Debug)]
pub struct TopKKl {
    indices: Vec<usize>,
    reference: Vec<f64>,
}

impl TopKKl {
    pub fn new(p_ref: &[f64], k: usize) -> Result<Self, AlignError> {
        let indices = topk_indices(p_ref, k)?;
        let reference = renormalize(p_ref, &indices)?;
        Ok(Self { indices, reference })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl Objective for TopKKl {
    fn evaluate(&self, logits: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        if self.indices.iter().any(|&i| i >= logits.len()) {
            return Err(ModelError::Objective(
                "top-k index outside the logit vector".into(),
            ));
        }
        // Renormalizing softmax over the index set equals softmax of the restricted logits.
        let restricted: Vec<f64> = self.indices.iter().map(|&i| logits[i]).collect();
        let q = softmax(&restricted);
        let mut value = 0.0;
        let mut unfloored_mass = 0.0;
        let mut grad = vec![0.0; logits.len()];
        for ((&r, &qi), &i) in self.reference.iter().zip(&q).zip(&self.indices) {
            if r == 0.0 {
                continue;
            }
            if qi > LOG_FLOOR {
                value += r * (r.ln() - qi.ln());
                unfloored_mass += r;
                grad[i] -= r;
            } else {
                value += r * (r.ln() - LOG_FLOOR.ln());
            }
        }
        for (&qi, &i) in q.iter().zip(&self.indices) {
            grad[i] += qi * unfloored_mass;
        }
        Ok((value, grad))
    }
}

/// Loss terms computing `weight · KL` on each reference with the shared
/// delta injected at `position`.
pub fn kl_terms<'a>(
    references: &'a [ReferenceDistribution],
    objectives: &'a [TopKKl],
    position: usize,
    weight: f64,
) -> Vec<LossTerm<'a>> {
    references
        .iter()
        .zip(objectives)
        .map(|(r, o)| LossTerm {
            input: ModelInput::Embeddings(&r.instance.perturbed_embedding),
            delta_position: Some(position),
            objective: o,
            weight,
        })
        .collect()
}

/// Mean top-`k` KL over `references` with `delta` injected at (`layer`, `position`).
pub fn evk_loss(
    model: &ToyModel,
    references: &[ReferenceDistribution],
    layer: usize,
    position: usize,
    delta: &Vector,
    k: usize,
) -> Result<f64, AlignError> {
    if references.is_empty() {
        return Ok(0.0);
    }
    let objectives = references
        .iter()
        .map(|r| TopKKl::new(r.probs.as_slice(), k))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = LossSpec {
        shared_delta: Some(SharedDelta { layer, delta }),
        terms: kl_terms(references, &objectives, position, 1.0 / references.len() as f64),
    };
    Ok(model.loss(&spec)?)
}
