//! Scalar losses over one or more forward passes and their exact gradients.
//!
//! A [`LossSpec`] is a weighted sum of [`LossTerm`]s. Each term runs one
//! forward pass and scores the last position's logits with an [`Objective`].
//! Terms may share a single injected FFN-output delta (the quantity the
//! value optimization works on), in which case its gradient is summed over
//! every term that injects it.

use super::forward::{ForwardTrace, InjectionSpec, ModelInput};
use super::{ModelError, Params, ToyModel};
use crate::linalg::{Matrix, Vector};

/// A scalar function of the last-position logits.
pub trait Objective: Send + Sync {
    /// Returns the value and its gradient with respect to `logits`.
    fn evaluate(&self, logits: &[f64]) -> Result<(f64, Vec<f64>), ModelError>;
}

/// `-log softmax(logits)[target]`.
#[derive(Clone, Copy, Debug)]
pub struct TargetNll {
    pub target: usize,
}

impl Objective for TargetNll {
    fn evaluate(&self, logits: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        if self.target >= logits.len() {
            return Err(ModelError::TokenOutOfRange {
                id: self.target,
                vocab: logits.len(),
            });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let value = lse - logits[self.target];
        let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        grad[self.target] -= 1.0;
        Ok((value, grad))
    }
}

/// The FFN-output delta shared by every term that names an injection position.
#[derive(Clone, Copy, Debug)]
pub struct SharedDelta<'a> {
    pub layer: usize,
    pub delta: &'a Vector,
}

pub struct LossTerm<'a> {
    pub input: ModelInput<'a>,
    /// Where this term injects the shared delta, if at all.
    pub delta_position: Option<usize>,
    pub objective: &'a dyn Objective,
    pub weight: f64,
}

pub struct LossSpec<'a> {
    pub shared_delta: Option<SharedDelta<'a>>,
    pub terms: Vec<LossTerm<'a>>,
}

impl<'a> LossSpec<'a> {
    /// Single-term NLL of `target` after `tokens`.
    pub fn nll(tokens: &'a [usize], objective: &'a TargetNll) -> Self {
        Self {
            shared_delta: None,
            terms: vec![LossTerm {
                input: ModelInput::Tokens(tokens),
                delta_position: None,
                objective,
                weight: 1.0,
            }],
        }
    }
}

/// Which gradients to compute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradTargets {
    pub params: bool,
    pub injection_delta: bool,
    pub input_embeddings: bool,
}

impl GradTargets {
    pub const ALL_PARAMS: Self = Self {
        params: true,
        injection_delta: false,
        input_embeddings: false,
    };
    pub const INJECTION_DELTA: Self = Self {
        params: false,
        injection_delta: true,
        input_embeddings: false,
    };
    pub const INPUT_EMBEDDINGS: Self = Self {
        params: false,
        injection_delta: false,
        input_embeddings: true,
    };
    pub const EVERYTHING: Self = Self {
        params: true,
        injection_delta: true,
        input_embeddings: true,
    };
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    /// Unweighted objective value of each term.
    pub term_values: Vec<f64>,
    pub params: Option<Params>,
    pub injection_delta: Option<Vector>,
    /// `∂L/∂input` per term (the input embedding matrix of that term).
    pub input_embeddings: Vec<Matrix>,
}

impl ToyModel {
    fn term_trace(
        &self,
        spec: &LossSpec<'_>,
        term: &LossTerm<'_>,
    ) -> Result<ForwardTrace, ModelError> {
        let injections: Vec<InjectionSpec> = match (spec.shared_delta, term.delta_position) {
            (Some(sd), Some(pos)) => vec![InjectionSpec::ffn_output(sd.layer, pos, sd.delta.clone())],
            _ => Vec::new(),
        };
        self.forward(term.input, &injections)
    }

    /// Value of the loss only.
    pub fn loss(&self, spec: &LossSpec<'_>) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for term in &spec.terms {
            let trace = self.term_trace(spec, term)?;
            let (v, _) = term.objective.evaluate(trace.last_logits())?;
            total += term.weight * v;
        }
        if !total.is_finite() {
            return Err(ModelError::NonFiniteLoss(total));
        }
        Ok(total)
    }

    /// Loss value and exact reverse-mode gradients of the requested quantities.
    pub fn grad(&self, spec: &LossSpec<'_>, targets: GradTargets) -> Result<Gradients, ModelError> {
        let mut total = 0.0;
        let mut term_values = Vec::with_capacity(spec.terms.len());
        let mut params = targets.params.then(|| Params::zeros(&self.config));
        let mut delta_grad = spec
            .shared_delta
            .filter(|_| targets.injection_delta)
            .map(|sd| Vector::zeros(sd.delta.dim()));
        let mut inputs = Vec::new();

        for term in &spec.terms {
            let trace = self.term_trace(spec, term)?;
            let (value, g_last) = term.objective.evaluate(trace.last_logits())?;
            if !value.is_finite() {
                return Err(ModelError::NonFiniteLoss(value));
            }
            term_values.push(value);
            total += term.weight * value;

            let n = trace.seq_len();
            let mut d_logits = Matrix::zeros(n, self.config.vocab_size);
            for (dst, g) in d_logits.row_mut(n - 1).iter_mut().zip(&g_last) {
                *dst = term.weight * g;
            }
            let bp = self.backward(&trace, &d_logits, params.as_mut())?;
            if let (Some(acc), Some(sd), Some(pos)) =
                (delta_grad.as_mut(), spec.shared_delta, term.delta_position)
            {
                for (a, g) in acc.as_mut_slice().iter_mut().zip(bp.d_ffn_out[sd.layer].row(pos)) {
                    *a += g;
                }
            }
            if targets.input_embeddings {
                inputs.push(bp.d_input);
            }
        }
        if !total.is_finite() {
            return Err(ModelError::NonFiniteLoss(total));
        }
        Ok(Gradients {
            loss: total,
            term_values,
            params,
            injection_delta: delta_grad,
            input_embeddings: inputs,
        })
    }
}
