use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::linalg::{Matrix, Sampler};

/// Parameters of one transformer block.
///
/// Projections are stored `out × in`, so a row-major activation matrix `X`
/// (`seq × in`) maps to `X · Wᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    /// `d_ff × d_model`
    pub w_in: Matrix,
    /// `d_model × d_ff`; the key–value memory that editing rewrites.
    pub w_out: Matrix,
}

/// Full parameter set. Also used as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub token_embedding: Matrix,
    pub positional_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    /// `vocab × d_model`
    pub unembedding: Matrix,
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w_in: Matrix::zeros(f, d),
            w_out: Matrix::zeros(d, f),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 10] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("attn.w_q", &self.w_q),
            ("attn.w_k", &self.w_k),
            ("attn.w_v", &self.w_v),
            ("attn.w_o", &self.w_o),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("ffn.w_in", &self.w_in),
            ("ffn.w_out", &self.w_out),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.w_out,
        ]
    }
}

impl Params {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: Matrix::zeros(cfg.vocab_size, d),
            positional_embedding: Matrix::zeros(cfg.max_seq, d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            final_gain: Matrix::zeros(1, d),
            final_bias: Matrix::zeros(1, d),
            unembedding: Matrix::zeros(cfg.vocab_size, d),
        }
    }

    /// Random initialization: embeddings `N(0, 0.1²)`, projections scaled by
    /// `1/sqrt(fan_in)`, residual-writing projections further shrunk by
    /// `1/sqrt(2·n_layers)`, layer norms at identity.
    pub fn init(cfg: &ModelConfig, rng: &mut Sampler) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let ones = |n: usize| Matrix::from_vec(1, n, vec![1.0; n]).expect("shape");
        let mut p = Self::zeros(cfg);
        p.token_embedding = rng.gaussian_matrix(cfg.vocab_size, d, 0.1);
        p.positional_embedding = rng.gaussian_matrix(cfg.max_seq, d, 0.1);
        for layer in &mut p.layers {
            layer.ln1_gain = ones(d);
            layer.ln2_gain = ones(d);
            let s = 1.0 / (d as f64).sqrt();
            layer.w_q = rng.gaussian_matrix(d, d, s);
            layer.w_k = rng.gaussian_matrix(d, d, s);
            layer.w_v = rng.gaussian_matrix(d, d, s);
            layer.w_o = rng.gaussian_matrix(d, d, s * resid);
            layer.w_in = rng.gaussian_matrix(f, d, s);
            layer.w_out = rng.gaussian_matrix(d, f, resid / (f as f64).sqrt());
        }
        p.final_gain = ones(d);
        p.unembedding = rng.gaussian_matrix(cfg.vocab_size, d, 1.0 / (d as f64).sqrt());
        p
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.tensors() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_gain));
        out.push(("final_norm.bias".to_string(), &self.final_bias));
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }

    /// Mutable tensors, same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.token_embedding, &mut self.positional_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out.push(&mut self.unembedding);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += alpha · other` over every tensor.
    pub fn axpy(&mut self, alpha: f64, other: &Params) -> Result<(), ModelError> {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            dst.axpy(alpha, s)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for m in self.tensors_mut() {
            for x in m.as_mut_slice() {
                *x *= s;
            }
        }
    }

    /// Flattened copy of every scalar, in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, m) in self.tensors() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }
}
