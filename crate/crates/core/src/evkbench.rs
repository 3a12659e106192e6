//! Embedding-virtualized knowledge (EVK) instances and the embedding/text
//! stability metrics.
//!
//! An instance is the clean prompt embedding with Gaussian drift added in
//! place to the subject rows, the relation rows, or every row. Embeddings
//! always come from the pre-edit model's table, so both models see the same
//! input. Instances serialize as metadata only; the drift is regenerated
//! from the stored stream.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenizedPrompt;
use crate::linalg::{cosine, gaussian_matrix, LinalgError, Matrix, RngStream};
use crate::model::{ModelError, ModelInput, ToyModel};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{drift:?} drift requested but the prompt {text:?} has an empty span")]
    EmptySpan { drift: DriftType, text: String },
    #[error("sigma must be finite and non-negative, got {0}")]
    BadSigma(f64),
    #[error("samples_per_prompt must be >= 1")]
    NoSamples,
    #[error("no instances to evaluate")]
    NoInstances,
    #[error("models differ in configuration")]
    ConfigMismatch,
    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<BenchError>,
    },
    #[error("attribution prompt {index}: {source}")]
    Prompt {
        index: usize,
        #[source]
        source: Box<BenchError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftType {
    Subject,
    Relation,
    All,
}

impl DriftType {
    pub const ALL_TYPES: [DriftType; 3] = [DriftType::Subject, DriftType::Relation, DriftType::All];

    /// Rows of `prompt` that receive drift.
    pub fn rows(self, prompt: &TokenizedPrompt) -> std::ops::Range<usize> {
        match self {
            DriftType::Subject => prompt.subject_span.clone(),
            DriftType::Relation => prompt.relation_span.clone(),
            DriftType::All => 0..prompt.tokens.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvkInstance {
    /// Index of the source prompt within the bench (0 for a standalone instance).
    pub prompt_id: usize,
    pub source_prompt: TokenizedPrompt,
    pub drift: DriftType,
    pub sigma: f64,
    /// Stream the drift was drawn from.
    pub rng: RngStream,
    pub perturbed_embedding: Matrix,
}

/// What gets written to disk for an instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvkInstanceMeta {
    pub prompt_id: usize,
    pub drift: DriftType,
    pub sigma: f64,
    pub seed: u64,
    pub stream_id: u64,
}

impl EvkInstance {
    pub fn meta(&self) -> EvkInstanceMeta {
        EvkInstanceMeta {
            prompt_id: self.prompt_id,
            drift: self.drift,
            sigma: self.sigma,
            seed: self.rng.seed,
            stream_id: self.rng.stream_id,
        }
    }
}

/// Clean embedding of `prompt` with `N(0, sigma²)` drift on the rows selected by `drift`.
pub fn build_evk(
    prompt: &TokenizedPrompt,
    model: &ToyModel,
    drift: DriftType,
    sigma: f64,
    rng: &RngStream,
) -> Result<EvkInstance, BenchError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(BenchError::BadSigma(sigma));
    }
    let rows = drift.rows(prompt);
    if rows.is_empty() || rows.end > prompt.tokens.len() {
        return Err(BenchError::EmptySpan {
            drift,
            text: prompt.text.clone(),
        });
    }
    let mut e = model.embed(&prompt.tokens)?;
    let noise = gaussian_matrix(rows.len(), e.cols(), sigma, rng);
    for (k, r) in rows.enumerate() {
        for (x, dx) in e.row_mut(r).iter_mut().zip(noise.row(k)) {
            *x += dx;
        }
    }
    Ok(EvkInstance {
        prompt_id: 0,
        source_prompt: prompt.clone(),
        drift,
        sigma,
        rng: *rng,
        perturbed_embedding: e,
    })
}

/// `samples_per_prompt` instances per prompt. Drift types cycle over the
/// global instance index, so their counts differ by at most one. Instance
/// `(p, j)` draws from `rng.derive(p).derive(j)`.
pub fn build_bench(
    prompts: &[TokenizedPrompt],
    model: &ToyModel,
    sigma: f64,
    samples_per_prompt: usize,
    rng: &RngStream,
) -> Result<Vec<EvkInstance>, BenchError> {
    if samples_per_prompt == 0 {
        return Err(BenchError::NoSamples);
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..samples_per_prompt).map(move |j| (p, j)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(g, &(p, j))| {
            let drift = DriftType::ALL_TYPES[g % 3];
            let mut inst = build_evk(
                &prompts[p],
                model,
                drift,
                sigma,
                &rng.derive(p as u64).derive(j as u64),
            )
            .map_err(|e| BenchError::Instance {
                index: g,
                source: Box::new(e),
            })?;
            inst.prompt_id = p;
            Ok(inst)
        })
        .collect()
}

fn check_pair(pre: &ToyModel, post: &ToyModel) -> Result<(), BenchError> {
    if pre.config != post.config {
        return Err(BenchError::ConfigMismatch);
    }
    Ok(())
}

fn final_hidden_cosine(
    pre: &ToyModel,
    post: &ToyModel,
    input: ModelInput<'_>,
) -> Result<f64, BenchError> {
    let a = pre.forward(input, &[])?;
    let b = post.forward(input, &[])?;
    Ok(cosine(
        a.final_token_hidden.as_slice(),
        b.final_token_hidden.as_slice(),
    )?)
}

/// ES: cosine between the final-token hidden states of the two models on the
/// instance's perturbed embedding.
pub fn embedding_stability(
    model_pre: &ToyModel,
    model_post: &ToyModel,
    instance: &EvkInstance,
) -> Result<f64, BenchError> {
    check_pair(model_pre, model_post)?;
    final_hidden_cosine(
        model_pre,
        model_post,
        ModelInput::Embeddings(&instance.perturbed_embedding),
    )
}

/// TS: the same cosine on the clean token sequence.
pub fn text_stability(
    model_pre: &ToyModel,
    model_post: &ToyModel,
    prompt: &TokenizedPrompt,
) -> Result<f64, BenchError> {
    check_pair(model_pre, model_post)?;
    final_hidden_cosine(model_pre, model_post, ModelInput::Tokens(&prompt.tokens))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftCounts {
    pub subject: usize,
    pub relation: usize,
    pub all: usize,
}

impl DriftCounts {
    pub fn of(instances: &[EvkInstance]) -> Self {
        let mut c = Self::default();
        for i in instances {
            match i.drift {
                DriftType::Subject => c.subject += 1,
                DriftType::Relation => c.relation += 1,
                DriftType::All => c.all += 1,
            }
        }
        c
    }
}

/// ES/TS values are stored in `[-1, 1]`; the `*_score` fields are the same
/// means on a 0–100 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub mean_es: f64,
    pub mean_ts: Option<f64>,
    pub es_score: f64,
    pub ts_score: Option<f64>,
    pub es: Vec<f64>,
    pub ts: Vec<f64>,
    pub counts: DriftCounts,
    pub sigmas: Vec<f64>,
    pub instances: Vec<EvkInstanceMeta>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-instance ES, per-prompt TS and their means.
pub fn run_bench(
    model_pre: &ToyModel,
    model_post: &ToyModel,
    instances: &[EvkInstance],
    attribution_prompts: &[TokenizedPrompt],
) -> Result<StabilityReport, BenchError> {
    check_pair(model_pre, model_post)?;
    if instances.is_empty() {
        return Err(BenchError::NoInstances);
    }
    let es = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            embedding_stability(model_pre, model_post, inst).map_err(|e| BenchError::Instance {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ts = attribution_prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            text_stability(model_pre, model_post, p).map_err(|e| BenchError::Prompt {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean_es = mean(&es);
    let mean_ts = (!ts.is_empty()).then(|| mean(&ts));
    let mut sigmas: Vec<f64> = Vec::new();
    for inst in instances {
        if !sigmas.contains(&inst.sigma) {
            sigmas.push(inst.sigma);
        }
    }
    Ok(StabilityReport {
        mean_es,
        mean_ts,
        es_score: 100.0 * mean_es,
        ts_score: mean_ts.map(|t| 100.0 * t),
        counts: DriftCounts::of(instances),
        instances: instances.iter().map(EvkInstance::meta).collect(),
        es,
        ts,
        sigmas,
    })
}
