use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::{GradTargets, LossSpec, LossTerm, TargetNll};
use super::{argmax, ModelError, ModelInput, Params, ToyModel};
use crate::linalg::RngStream;

/// Adam settings for fact memorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop once top-1 accuracy on the training examples reaches this.
    pub target_accuracy: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Cosine-decay the step size to zero over `steps`.
    pub cosine_decay: bool,
    /// Decoupled weight decay on weight matrices (layer-norm parameters are exempt).
    pub weight_decay: f64,
    /// Accuracy is measured every this many steps (and at the end).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            lr: 3e-3,
            batch_size: 32,
            target_accuracy: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1.0,
            cosine_decay: true,
            eval_every: 25,
        }
    }
}

/// Prompt tokens and the object token that should follow them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub tokens: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub reached_target: bool,
}

/// Fraction of examples whose argmax next token is the target.
pub fn accuracy(model: &ToyModel, examples: &[TrainExample]) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|ex| {
            let trace = model.forward(ModelInput::Tokens(&ex.tokens), &[])?;
            Ok(usize::from(argmax(trace.last_logits()) == ex.target))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

const CHUNK: usize = 8;

/// Mean NLL and its parameter gradient over a batch.
///
/// Chunks are fixed-size and summed in order, so the result does not depend
/// on the worker count.
fn batch_gradient(
    model: &ToyModel,
    batch: &[&TrainExample],
) -> Result<(f64, Params), ModelError> {
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let objectives: Vec<TargetNll> =
                chunk.iter().map(|ex| TargetNll { target: ex.target }).collect();
            let spec = LossSpec {
                shared_delta: None,
                terms: chunk
                    .iter()
                    .zip(&objectives)
                    .map(|(ex, obj)| LossTerm {
                        input: ModelInput::Tokens(&ex.tokens),
                        delta_position: None,
                        objective: obj,
                        weight: 1.0,
                    })
                    .collect(),
            };
            let g = model.grad(&spec, GradTargets::ALL_PARAMS)?;
            Ok((g.loss, g.params.expect("params requested")))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grad.axpy(1.0, &g)?;
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale_in_place(inv);
    Ok((loss * inv, grad))
}

/// Minimizes mean object-token NLL with Adam. Deterministic given `rng`.
pub fn train(
    model: &mut ToyModel,
    examples: &[TrainExample],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainLog, ModelError> {
    let mut rows = Vec::new();
    if cfg.steps == 0 || examples.is_empty() {
        let acc = accuracy(model, examples)?;
        return Ok(TrainLog {
            rows,
            steps_run: 0,
            final_accuracy: acc,
            reached_target: acc >= cfg.target_accuracy,
        });
    }
    let mut sampler = rng.sampler();
    let mut m = Params::zeros(&model.config);
    let mut v = Params::zeros(&model.config);
    let batch_size = cfg.batch_size.clamp(1, examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut final_accuracy = 0.0;
    let mut reached = false;
    let mut steps_run = 0;
    let eval_every = cfg.eval_every.max(1);

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                sampler.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = match batch_gradient(model, &batch) {
            Ok(r) => r,
            Err(ModelError::NonFiniteLoss(l)) | Err(ModelError::Diverged { loss: l, .. }) => {
                return Err(ModelError::Diverged { step, loss: l })
            }
            Err(ModelError::NonFinite(_)) => {
                return Err(ModelError::Diverged {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grad.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }

        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let lr = if cfg.cosine_decay {
            let t = (step - 1) as f64 / cfg.steps as f64;
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            cfg.lr
        };
        let c1 = 1.0 - b1.powi(step as i32);
        let c2 = 1.0 - b2.powi(step as i32);
        let grads = grad.tensors();
        for (((p, mm), vv), (_, g)) in model
            .params
            .tensors_mut()
            .into_iter()
            .zip(m.tensors_mut())
            .zip(v.tensors_mut())
            .zip(grads)
        {
            let decay = if p.rows() > 1 { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            let p = p.as_mut_slice();
            let mm = mm.as_mut_slice();
            let vv = vv.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                mm[i] = b1 * mm[i] + (1.0 - b1) * gi;
                vv[i] = b2 * vv[i] + (1.0 - b2) * gi * gi;
                let mhat = mm[i] / c1;
                let vhat = vv[i] / c2;
                p[i] = decay * p[i] - lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        steps_run = step;

        let evaluate = step % eval_every == 0 || step == cfg.steps;
        let acc = if evaluate {
            let a = accuracy(model, examples)?;
            final_accuracy = a;
            Some(a)
        } else {
            None
        };
        rows.push(TrainLogRow {
            step,
            loss,
            accuracy: acc,
        });
        if let Some(a) = acc {
            log::debug!("train step {step}: loss {loss:.4} accuracy {a:.4}");
            if a >= cfg.target_accuracy {
                reached = true;
                break;
            }
        }
    }
    if !model.params.is_finite() {
        return Err(ModelError::Diverged {
            step: steps_run,
            loss: f64::NAN,
        });
    }
    Ok(TrainLog {
        rows,
        steps_run,
        final_accuracy,
        reached_target: reached,
    })
}
