//! Toy decoder-only transformer whose FFN blocks are explicit key–value
//! memories, with activation capture, FFN-output injection hooks, a raw
//! embedding input path and exact reverse-mode gradients.

mod checkpoint;
mod forward;
mod grad;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load, read_checkpoint, save, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{softmax, ForwardTrace, InjectionSite, InjectionSpec, ModelInput};
pub use grad::{
    GradTargets, Gradients, LossSpec, LossTerm, Objective, SharedDelta, TargetNll,
};
pub use params::{LayerParams, Params};
pub use train::{accuracy, train, TrainConfig, TrainExample, TrainLog, TrainLogRow};

use crate::linalg::{LinalgError, Matrix, RngStream, Vector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("expected width {expected}, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("injection at layer {layer}, position {position} out of range ({n_layers} layers, {seq_len} positions)")]
    InjectionOutOfRange {
        layer: usize,
        position: usize,
        n_layers: usize,
        seq_len: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("objective: {0}")]
    Objective(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GeluTanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Set from the corpus vocabulary.
    pub vocab_size: usize,
    pub max_seq: usize,
    pub activation: Activation,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size: 1,
            max_seq: 32,
            activation: Activation::GeluTanh,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(ModelError::InvalidConfig("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub params: Params,
}

impl ToyModel {
    /// Freshly initialized model, deterministic in `rng`.
    pub fn new(config: ModelConfig, rng: &RngStream) -> Result<Self, ModelError> {
        config.validate()?;
        let params = Params::init(&config, &mut rng.sampler());
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Params::zeros(&config);
        for ((name, want), (_, got)) in expected.tensors().iter().zip(params.tensors()) {
            if want.shape() != got.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name}: expected {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        if expected.layers.len() != params.layers.len() {
            return Err(ModelError::InvalidConfig("layer count mismatch".into()));
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self { config, params })
    }

    /// Input embedding matrix: row `i` is `token_embedding[t_i] + positional_embedding[i]`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix, ModelError> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq,
            });
        }
        let mut out = Matrix::zeros(tokens.len(), cfg.d_model);
        for (i, &t) in tokens.iter().enumerate() {
            if t >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            let tok = self.params.token_embedding.row(t);
            let pos = self.params.positional_embedding.row(i);
            for ((o, a), b) in out.row_mut(i).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        Ok(out)
    }

    /// Softmax over the last position's logits.
    pub fn next_token_distribution(trace: &ForwardTrace) -> Vector {
        Vector::from(softmax(trace.last_logits()))
    }

    /// Next-token distribution for a token prompt.
    pub fn predict(&self, tokens: &[usize]) -> Result<Vector, ModelError> {
        let trace = self.forward(ModelInput::Tokens(tokens), &[])?;
        Ok(Self::next_token_distribution(&trace))
    }

    /// Greedy argmax of the next-token distribution (lowest index on ties).
    pub fn greedy_next(&self, tokens: &[usize]) -> Result<usize, ModelError> {
        let trace = self.forward(ModelInput::Tokens(tokens), &[])?;
        Ok(argmax(trace.last_logits()))
    }

    /// Greedy continuation of up to `n_new` tokens, stopping at `max_seq`.
    pub fn generate(&self, prompt: &[usize], n_new: usize) -> Result<Vec<usize>, ModelError> {
        let mut seq = prompt.to_vec();
        for _ in 0..n_new {
            if seq.len() >= self.config.max_seq {
                break;
            }
            let next = self.greedy_next(&seq)?;
            seq.push(next);
        }
        Ok(seq)
    }

    /// Output projection `W_out` of a layer.
    pub fn w_out(&self, layer: usize) -> &Matrix {
        &self.params.layers[layer].w_out
    }

    pub fn w_out_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.params.layers[layer].w_out
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
