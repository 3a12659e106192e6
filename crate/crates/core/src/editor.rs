//! Locate-then-edit: causal layer scoring, key extraction, preservation-key
//! estimation, target-value optimization and the closed-form `W_out` update.
//!
//! For keys `K1` (one column per request) with target values `V1`, and
//! preservation keys `K0` whose values are the model's current outputs, the
//! update minimizing `‖(W+Δ)K0 − WK0‖² + ‖(W+Δ)K1 − V1‖²` is
//!
//! ```text
//! Δ = (V1 − W K1) K1ᵀ (K0 K0ᵀ + K1 K1ᵀ)⁻¹
//! ```
//!
//! When there are fewer key columns than key dimensions the Gram matrix is
//! necessarily singular; the minimum-norm solution is then computed from the
//! column-space form `Δ = R Yᵀ Kᵀ`, `(KᵀK) Y = S`, where `K = [K0 K1]` and
//! `S` selects the `K1` columns.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EditRequest, TokenizedPrompt};
use crate::evkalign::{
    kl_terms, sample_align_instances, AlignConfig, AlignError, ReferenceDistribution, TopKKl,
};
use crate::linalg::{solve_spd, LinalgError, Matrix, RngStream, SpdOptions, Vector};
use crate::model::{
    argmax, softmax, ForwardTrace, GradTargets, InjectionSpec, LossSpec, LossTerm, ModelError,
    ModelInput, SharedDelta, TargetNll, ToyModel,
};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid edit config: {0}")]
    InvalidConfig(String),
    #[error("request {case_id}: empty subject span")]
    EmptySubject { case_id: usize },
    #[error("request {case_id}: loss became non-finite at step {step}")]
    NonFiniteLoss { case_id: usize, step: usize },
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<EditError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Align(#[from] AlignError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    /// Pick the layer with the highest mean causal-trace score over the batch.
    Auto,
    Layers(Vec<usize>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadMode {
    /// Each target layer takes an equal share of the remaining value change.
    #[default]
    Spread,
    /// Only the highest target layer is edited.
    LastLayerOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub target_layers: LayerSelection,
    pub v_steps: usize,
    pub v_lr: f64,
    /// `‖δ‖` is kept at or below `clamp_norm · ‖m‖`.
    pub clamp_norm: f64,
    pub k0_samples: usize,
    pub align: Option<AlignConfig>,
    pub spread: SpreadMode,
    /// Noise scale and sample count for automatic layer selection.
    pub trace_noise_sigma: f64,
    pub trace_samples: usize,
    pub jitter_scale: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            target_layers: LayerSelection::Layers(vec![0]),
            v_steps: 25,
            v_lr: 0.5,
            clamp_norm: 4.0,
            k0_samples: 512,
            align: None,
            spread: SpreadMode::Spread,
            trace_noise_sigma: 0.3,
            trace_samples: 10,
            jitter_scale: SpdOptions::default().jitter_scale,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, model: &ToyModel) -> Result<(), EditError> {
        let bad = |m: String| Err(EditError::InvalidConfig(m));
        if !(self.v_lr > 0.0 && self.v_lr.is_finite()) {
            return bad(format!("v_lr must be positive, got {}", self.v_lr));
        }
        if !(self.clamp_norm > 0.0) {
            return bad(format!("clamp_norm must be positive, got {}", self.clamp_norm));
        }
        if let LayerSelection::Layers(ls) = &self.target_layers {
            if ls.is_empty() {
                return bad("target_layers is empty".into());
            }
            if let Some(l) = ls.iter().find(|&&l| l >= model.config.n_layers) {
                return bad(format!(
                    "target layer {l} out of range for {} layers",
                    model.config.n_layers
                ));
            }
        }
        if let Some(a) = &self.align {
            a.validate(model.config.vocab_size)?;
        }
        Ok(())
    }

    /// Alignment settings that actually change the objective.
    fn active_align(&self) -> Option<&AlignConfig> {
        self.align.as_ref().filter(|a| a.lambda != 0.0)
    }
}

/// Keys and values as columns: `k` is `d_ff × m`, `v` is `d_model × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueSet {
    pub k: Matrix,
    pub v: Matrix,
    pub layer: usize,
}

impl KeyValueSet {
    pub fn len(&self) -> usize {
        self.k.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.k.cols() == 0
    }
}

/// FFN key at the last subject token.
pub fn compute_key(model: &ToyModel, prompt: &TokenizedPrompt, layer: usize) -> Result<Vector, EditError> {
    let pos = prompt
        .last_subject_position()
        .ok_or(EditError::EmptySubject { case_id: 0 })?;
    if layer >= model.config.n_layers {
        return Err(EditError::InvalidConfig(format!("layer {layer} out of range")));
    }
    let trace = model.forward(ModelInput::Tokens(&prompt.tokens), &[])?;
    Ok(trace.keys[layer].row_vector(pos))
}

/// `k0_samples` keys at random (text, position) pairs, with `V0 = W_out K0`.
/// If fewer positions exist, all of them are used.
pub fn estimate_k0(
    model: &ToyModel,
    texts: &[Vec<usize>],
    layer: usize,
    k0_samples: usize,
    rng: &RngStream,
) -> Result<KeyValueSet, EditError> {
    let positions: Vec<(usize, usize)> = texts
        .iter()
        .enumerate()
        .flat_map(|(t, toks)| (0..toks.len()).map(move |p| (t, p)))
        .collect();
    let chosen: Vec<(usize, usize)> = if positions.len() <= k0_samples {
        if positions.len() < k0_samples {
            log::warn!(
                "only {} key positions available, {} requested; using all",
                positions.len(),
                k0_samples
            );
        }
        positions
    } else {
        let mut idx = rng.sampler().sample_indices(positions.len(), k0_samples);
        idx.sort_unstable();
        idx.into_iter().map(|i| positions[i]).collect()
    };
    let d_ff = model.config.d_ff;
    let mut by_text: Vec<(usize, Vec<usize>)> = Vec::new();
    for (t, p) in chosen {
        match by_text.last_mut() {
            Some((lt, ps)) if *lt == t => ps.push(p),
            _ => by_text.push((t, vec![p])),
        }
    }
    let rows: Vec<Vec<f64>> = by_text
        .par_iter()
        .map(|(t, ps)| {
            let trace = model.forward(ModelInput::Tokens(&texts[*t]), &[])?;
            Ok(ps
                .iter()
                .map(|&p| trace.keys[layer].row(p).to_vec())
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, ModelError>>()?
        .into_iter()
        .flatten()
        .collect();
    let k_rows = if rows.is_empty() {
        Matrix::zeros(0, d_ff)
    } else {
        Matrix::from_rows(&rows)?
    };
    let k = k_rows.transpose();
    let v = model.w_out(layer).matmul(&k)?;
    Ok(KeyValueSet { k, v, layer })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedForm {
    pub delta: Matrix,
    /// Diagonal jitter that was needed to factor the system, if any.
    pub jitter: Option<f64>,
}

/// Least-squares update of `w` that maps `k1` to `v1` while keeping `w k0` fixed.
pub fn closed_form_update(
    w: &Matrix,
    k0: &Matrix,
    k1: &Matrix,
    v1: &Matrix,
) -> Result<ClosedForm, EditError> {
    closed_form_update_with(w, k0, k1, v1, SpdOptions::default())
}

pub fn closed_form_update_with(
    w: &Matrix,
    k0: &Matrix,
    k1: &Matrix,
    v1: &Matrix,
    opts: SpdOptions,
) -> Result<ClosedForm, EditError> {
    let (d, f) = w.shape();
    let k0 = if k0.rows() == 0 && k0.cols() == 0 {
        Matrix::zeros(f, 0)
    } else {
        k0.clone()
    };
    if k0.rows() != f || k1.rows() != f || v1.rows() != d || v1.cols() != k1.cols() {
        return Err(EditError::Linalg(LinalgError::ShapeMismatch {
            op: "closed_form_update",
            left: w.shape(),
            right: (k1.rows(), k1.cols()),
        }));
    }
    let m1 = k1.cols();
    if m1 == 0 {
        return Ok(ClosedForm {
            delta: Matrix::zeros(d, f),
            jitter: None,
        });
    }
    let r = v1.sub(&w.matmul(k1)?)?;
    let m = k0.cols() + m1;
    if m >= f {
        // Δᵀ = C⁻¹ K1 Rᵀ with C = K0K0ᵀ + K1K1ᵀ.
        let mut c = k1.matmul_bt(k1)?;
        if k0.cols() > 0 {
            c.add_assign(&k0.matmul_bt(&k0)?)?;
        }
        symmetrize(&mut c);
        let b = k1.matmul_bt(&r)?;
        let sol = solve_spd(&c, &b, opts)?;
        Ok(ClosedForm {
            delta: sol.x.transpose(),
            jitter: sol.jitter,
        })
    } else {
        // Column-space form: Δ = R Yᵀ Kᵀ with (KᵀK) Y = S.
        let k_rows = k0.transpose().vstack(&k1.transpose())?;
        let mut g = k_rows.matmul_bt(&k_rows)?;
        symmetrize(&mut g);
        let mut s = Matrix::zeros(m, m1);
        for j in 0..m1 {
            s[(k0.cols() + j, j)] = 1.0;
        }
        let sol = solve_spd(&g, &s, opts)?;
        let ry = r.matmul_bt(&sol.x)?;
        Ok(ClosedForm {
            delta: ry.matmul(&k_rows)?,
            jitter: sol.jitter,
        })
    }
}

/// Averages `c` with its transpose so roundoff asymmetry never fails the solver's check.
fn symmetrize(c: &mut Matrix) {
    let n = c.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let a = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = a;
            c[(j, i)] = a;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueStep {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    /// Mean alignment KL, when alignment is active.
    pub evk: Option<f64>,
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueResult {
    pub layer: usize,
    pub position: usize,
    /// FFN output at (layer, position) before optimization.
    pub m: Vector,
    pub delta: Vector,
    pub v_star: Vector,
    pub steps: Vec<ValueStep>,
    pub p_target_before: f64,
    pub p_target_after: f64,
    pub references: Vec<ReferenceDistribution>,
}

fn target_probability(
    model: &ToyModel,
    tokens: &[usize],
    injections: &[InjectionSpec],
    target: usize,
) -> Result<f64, ModelError> {
    let trace = model.forward(ModelInput::Tokens(tokens), injections)?;
    Ok(softmax(trace.last_logits())[target])
}

/// Optimizes the FFN-output offset at the last subject position so the model
/// predicts `target_new`, optionally regularized by the alignment KL.
pub fn optimize_value(
    model: &ToyModel,
    request: &EditRequest,
    layer: usize,
    config: &EditConfig,
    rng: &RngStream,
) -> Result<ValueResult, EditError> {
    let position = request
        .prompt
        .last_subject_position()
        .ok_or(EditError::EmptySubject {
            case_id: request.case_id,
        })?;
    let tokens = &request.prompt.tokens;
    let clean = model.forward(ModelInput::Tokens(tokens), &[])?;
    if layer >= clean.ffn_out.len() {
        return Err(EditError::InvalidConfig(format!("layer {layer} out of range")));
    }
    let m = clean.ffn_out[layer].row_vector(position);
    let p_target_before = softmax(clean.last_logits())[request.target_new];
    let align = config.active_align();
    let references = match align {
        Some(a) => sample_align_instances(request, model, a, &rng.derive_named("align"))?,
        None => Vec::new(),
    };

    let d = m.dim();
    let max_norm = config.clamp_norm * m.norm();
    let mut delta = Vector::zeros(d);
    let mut mom = vec![0.0; d];
    let mut vel = vec![0.0; d];
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let nll = TargetNll {
        target: request.target_new,
    };
    let mut steps = Vec::with_capacity(config.v_steps);
    let mut objectives: Vec<TopKKl> = Vec::new();
    let mut current_k = None;

    for step in 0..config.v_steps {
        let k = align.map(|a| a.k_for_step(step, config.v_steps));
        if k != current_k {
            objectives = match k {
                Some(k) => references
                    .iter()
                    .map(|r| TopKKl::new(r.probs.as_slice(), k))
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
            };
            current_k = k;
        }
        let mut terms = vec![LossTerm {
            input: ModelInput::Tokens(tokens),
            delta_position: Some(position),
            objective: &nll,
            weight: 1.0,
        }];
        if let Some(a) = align {
            terms.extend(kl_terms(
                &references,
                &objectives,
                position,
                a.lambda / references.len() as f64,
            ));
        }
        let spec = LossSpec {
            shared_delta: Some(SharedDelta {
                layer,
                delta: &delta,
            }),
            terms,
        };
        let g = match model.grad(&spec, GradTargets::INJECTION_DELTA) {
            Ok(g) => g,
            Err(ModelError::NonFiniteLoss(_)) | Err(ModelError::NonFinite(_)) => {
                return Err(EditError::NonFiniteLoss {
                    case_id: request.case_id,
                    step,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let evk = align.map(|_| {
            g.term_values[1..].iter().sum::<f64>() / references.len() as f64
        });
        steps.push(ValueStep {
            step,
            loss: g.loss,
            nll: g.term_values[0],
            evk,
            k,
        });
        let grad = g.injection_delta.expect("delta gradient requested");
        if !grad.is_finite() {
            return Err(EditError::NonFiniteLoss {
                case_id: request.case_id,
                step,
            });
        }
        let t = (step + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..d {
            mom[i] = b1 * mom[i] + (1.0 - b1) * grad[i];
            vel[i] = b2 * vel[i] + (1.0 - b2) * grad[i] * grad[i];
            delta[i] -= config.v_lr * (mom[i] / c1) / ((vel[i] / c2).sqrt() + eps);
        }
        let norm = delta.norm();
        if norm > max_norm {
            delta = delta.scale(max_norm / norm);
        }
    }
    let p_target_after = target_probability(
        model,
        tokens,
        &[InjectionSpec::ffn_output(layer, position, delta.clone())],
        request.target_new,
    )?;
    Ok(ValueResult {
        layer,
        position,
        v_star: m.add(&delta),
        m,
        delta,
        steps,
        p_target_before,
        p_target_after,
        references,
    })
}

/// Forward pass on `embedding` with layer `layer`'s hidden state at
/// `position` replaced by the one recorded in `clean`.
pub fn restore_state(
    model: &ToyModel,
    embedding: &Matrix,
    corrupted: &ForwardTrace,
    clean: &ForwardTrace,
    layer: usize,
    position: usize,
) -> Result<ForwardTrace, EditError> {
    let fix = Vector::from(
        clean.hidden[layer]
            .row(position)
            .iter()
            .zip(corrupted.hidden[layer].row(position))
            .map(|(c, x)| c - x)
            .collect::<Vec<_>>(),
    );
    Ok(model.forward(
        ModelInput::Embeddings(embedding),
        &[InjectionSpec::ffn_output(layer, position, fix)],
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalTrace {
    /// Per layer: mean `P_restored − P_corrupted` of `target_true`.
    pub scores: Vec<f64>,
    pub p_clean: f64,
    pub p_corrupted: f64,
    /// The clean prompt does not predict `target_true`.
    pub flagged: bool,
}

/// Corrupts the subject embeddings with Gaussian noise and measures how much
/// restoring each layer's clean state at the last subject token recovers
/// `P(target_true)`.
pub fn causal_trace(
    model: &ToyModel,
    request: &EditRequest,
    noise_sigma: f64,
    n_noise_samples: usize,
    rng: &RngStream,
) -> Result<CausalTrace, EditError> {
    let prompt = &request.prompt;
    let position = prompt.last_subject_position().ok_or(EditError::EmptySubject {
        case_id: request.case_id,
    })?;
    if prompt.subject_span.end > prompt.tokens.len() {
        return Err(EditError::EmptySubject {
            case_id: request.case_id,
        });
    }
    let target = request.target_true;
    let clean_embedding = model.embed(&prompt.tokens)?;
    let clean = model.forward(ModelInput::Embeddings(&clean_embedding), &[])?;
    let clean_probs = softmax(clean.last_logits());
    let n_layers = model.config.n_layers;
    let n = n_noise_samples.max(1);
    let per_sample = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut e = clean_embedding.clone();
            let noise = rng.derive(s as u64).sampler().gaussian_matrix(
                prompt.subject_span.len(),
                e.cols(),
                noise_sigma,
            );
            for (k, r) in prompt.subject_span.clone().enumerate() {
                for (x, dx) in e.row_mut(r).iter_mut().zip(noise.row(k)) {
                    *x += dx;
                }
            }
            let corrupted = model.forward(ModelInput::Embeddings(&e), &[])?;
            let p_corr = softmax(corrupted.last_logits())[target];
            let scores = (0..n_layers)
                .map(|l| {
                    let t = restore_state(model, &e, &corrupted, &clean, l, position)?;
                    Ok(softmax(t.last_logits())[target] - p_corr)
                })
                .collect::<Result<Vec<_>, EditError>>()?;
            Ok((p_corr, scores))
        })
        .collect::<Result<Vec<_>, EditError>>()?;
    let mut scores = vec![0.0; n_layers];
    let mut p_corrupted = 0.0;
    for (p, s) in &per_sample {
        p_corrupted += p;
        for (a, b) in scores.iter_mut().zip(s) {
            *a += b;
        }
    }
    for a in &mut scores {
        *a /= n as f64;
    }
    Ok(CausalTrace {
        scores,
        p_clean: clean_probs[target],
        p_corrupted: p_corrupted / n as f64,
        flagged: argmax(&clean_probs) != target,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueLog {
    pub case_id: usize,
    pub layer: usize,
    pub position: usize,
    pub steps: Vec<ValueStep>,
    pub delta_norm: f64,
    pub m_norm: f64,
    pub p_target_before: f64,
    pub p_target_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutcome {
    pub layers: Vec<usize>,
    /// `delta_per_layer[i]` was added to `W_out` of `layers[i]`.
    pub delta_per_layer: Vec<Matrix>,
    pub v_star_log: Vec<ValueLog>,
    pub applied: bool,
    pub jitter: Vec<Option<f64>>,
    pub k0_columns: Vec<usize>,
    pub causal_scores: Option<Vec<f64>>,
}

/// JSON form of an [`EditOutcome`]: norms instead of full matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub layers: Vec<usize>,
    pub delta_norms: Vec<f64>,
    pub jitter: Vec<Option<f64>>,
    pub k0_columns: Vec<usize>,
    pub causal_scores: Option<Vec<f64>>,
    pub applied: bool,
    pub v_star_log: Vec<ValueLog>,
}

impl EditOutcome {
    pub fn summary(&self) -> EditSummary {
        EditSummary {
            layers: self.layers.clone(),
            delta_norms: self.delta_per_layer.iter().map(Matrix::frobenius_norm).collect(),
            jitter: self.jitter.clone(),
            k0_columns: self.k0_columns.clone(),
            causal_scores: self.causal_scores.clone(),
            applied: self.applied,
            v_star_log: self.v_star_log.clone(),
        }
    }
}

/// Subtracts an applied outcome's deltas. Floating-point subtraction does not
/// always undo addition exactly, so this restores `W_out` to within roundoff.
pub fn revert_edit(model: &mut ToyModel, outcome: &EditOutcome) -> Result<(), EditError> {
    for (&l, d) in outcome.layers.iter().zip(&outcome.delta_per_layer) {
        model.w_out_mut(l).sub_assign(d)?;
    }
    Ok(())
}

fn contains_run(haystack: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

fn resolve_layers(
    model: &ToyModel,
    requests: &[EditRequest],
    config: &EditConfig,
    rng: &RngStream,
) -> Result<(Vec<usize>, Option<Vec<f64>>), EditError> {
    let (mut layers, scores) = match &config.target_layers {
        LayerSelection::Layers(ls) => (ls.clone(), None),
        LayerSelection::Auto => {
            let traces = requests
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    causal_trace(
                        model,
                        r,
                        config.trace_noise_sigma,
                        config.trace_samples,
                        &rng.derive(i as u64),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut mean = vec![0.0; model.config.n_layers];
            for t in &traces {
                for (m, s) in mean.iter_mut().zip(&t.scores) {
                    *m += s / traces.len() as f64;
                }
            }
            (vec![argmax(&mean)], Some(mean))
        }
    };
    layers.sort_unstable();
    layers.dedup();
    if config.spread == SpreadMode::LastLayerOnly {
        layers = vec![*layers.last().expect("non-empty layer list")];
    }
    Ok((layers, scores))
}

/// Edits every request of the batch into `W_out` of the target layers.
///
/// `k0_texts` supplies preservation keys; texts mentioning a batch subject
/// are skipped. The model is only modified if every stage succeeds.
pub fn apply_edit_batch(
    model: &mut ToyModel,
    requests: &[EditRequest],
    k0_texts: &[Vec<usize>],
    config: &EditConfig,
    rng: &RngStream,
) -> Result<EditOutcome, EditError> {
    config.validate(model)?;
    if requests.is_empty() {
        let layers = match &config.target_layers {
            LayerSelection::Layers(ls) => ls.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            LayerSelection::Auto => Vec::new(),
        };
        let shape = (model.config.d_model, model.config.d_ff);
        return Ok(EditOutcome {
            delta_per_layer: layers.iter().map(|_| Matrix::zeros(shape.0, shape.1)).collect(),
            jitter: vec![None; layers.len()],
            k0_columns: vec![0; layers.len()],
            layers,
            v_star_log: Vec::new(),
            applied: true,
            causal_scores: None,
        });
    }
    for r in requests {
        if r.prompt.last_subject_position().is_none() {
            return Err(EditError::EmptySubject { case_id: r.case_id });
        }
    }
    let (layers, causal_scores) = resolve_layers(model, requests, config, &rng.derive_named("trace"))?;
    let top = *layers.last().expect("non-empty layer list");

    let values = requests
        .par_iter()
        .enumerate()
        .map(|(i, r)| optimize_value(model, r, top, config, &rng.derive_named("value").derive(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    // Target state of the top layer's residual stream at each request's position.
    let targets: Vec<Vector> = requests
        .par_iter()
        .zip(&values)
        .map(|(r, v)| {
            let t = model.forward(ModelInput::Tokens(&r.prompt.tokens), &[])?;
            Ok(t.hidden[top].row_vector(v.position).add(&v.delta))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;

    let subject_runs: Vec<Vec<usize>> = requests
        .iter()
        .map(|r| r.prompt.tokens[r.prompt.subject_span.clone()].to_vec())
        .collect();
    let texts: Vec<Vec<usize>> = k0_texts
        .iter()
        .filter(|t| !subject_runs.iter().any(|s| contains_run(t, s)))
        .cloned()
        .collect();

    let mut working = model.clone();
    let mut deltas = Vec::with_capacity(layers.len());
    let mut jitter = Vec::with_capacity(layers.len());
    let mut k0_columns = Vec::with_capacity(layers.len());
    for (li, &l) in layers.iter().enumerate() {
        let remaining = (layers.len() - li) as f64;
        let cols = requests
            .par_iter()
            .zip(&values)
            .zip(&targets)
            .map(|((r, v), z)| {
                let t = working.forward(ModelInput::Tokens(&r.prompt.tokens), &[])?;
                let key = t.keys[l].row_vector(v.position);
                let m_cur = t.ffn_out[l].row_vector(v.position);
                let h_cur = t.hidden[top].row_vector(v.position);
                let target = m_cur.add(&z.sub(&h_cur).scale(1.0 / remaining));
                Ok((key, target))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let (keys, vals): (Vec<Vector>, Vec<Vector>) = cols.into_iter().unzip();
        let k1 = Matrix::from_columns(working.config.d_ff, &keys)?;
        let v1 = Matrix::from_columns(working.config.d_model, &vals)?;
        let k0 = estimate_k0(
            &working,
            &texts,
            l,
            config.k0_samples,
            &rng.derive_named("k0").derive(l as u64),
        )?;
        let cf = closed_form_update_with(
            working.w_out(l),
            &k0.k,
            &k1,
            &v1,
            SpdOptions {
                jitter_scale: config.jitter_scale,
            },
        )?;
        if let Some(j) = cf.jitter {
            log::warn!("layer {l}: key Gram matrix needed diagonal jitter {j:e}");
        }
        working.w_out_mut(l).add_assign(&cf.delta)?;
        if !working.params.is_finite() {
            return Err(EditError::Model(ModelError::NonFinite("edited W_out")));
        }
        deltas.push(cf.delta);
        jitter.push(cf.jitter);
        k0_columns.push(k0.len());
    }

    let v_star_log = requests
        .iter()
        .zip(values)
        .map(|(r, v)| ValueLog {
            case_id: r.case_id,
            layer: v.layer,
            position: v.position,
            delta_norm: v.delta.norm(),
            m_norm: v.m.norm(),
            p_target_before: v.p_target_before,
            p_target_after: v.p_target_after,
            steps: v.steps,
        })
        .collect();
    *model = working;
    Ok(EditOutcome {
        layers,
        delta_per_layer: deltas,
        v_star_log,
        applied: true,
        jitter,
        k0_columns,
        causal_scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSnapshot {
    pub round: usize,
    pub n_requests: usize,
    /// Top-1 efficacy on this round's requests right after the round.
    pub batch_efficacy: f64,
    /// Top-1 efficacy over every request edited so far.
    pub cumulative_efficacy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub outcome: EditOutcome,
    pub snapshot: RoundSnapshot,
}

fn top1_rate(model: &ToyModel, requests: &[&EditRequest]) -> Result<f64, ModelError> {
    if requests.is_empty() {
        return Ok(0.0);
    }
    let hits = requests
        .par_iter()
        .map(|r| Ok(usize::from(model.greedy_next(&r.prompt.tokens)? == r.target_new)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / requests.len() as f64)
}

/// Applies the batches in order; round `i` draws from `rng.derive(i)` and
/// re-estimates preservation keys from the current model.
pub fn sequential_rounds(
    model: &mut ToyModel,
    batches: &[Vec<EditRequest>],
    k0_texts: &[Vec<usize>],
    config: &EditConfig,
    rng: &RngStream,
) -> Result<Vec<RoundOutcome>, EditError> {
    let mut out = Vec::with_capacity(batches.len());
    let mut done: Vec<&EditRequest> = Vec::new();
    for (round, batch) in batches.iter().enumerate() {
        let wrap = |e: EditError| EditError::Round {
            round,
            source: Box::new(e),
        };
        let outcome = apply_edit_batch(model, batch, k0_texts, config, &rng.derive(round as u64))
            .map_err(wrap)?;
        done.extend(batch.iter());
        let this: Vec<&EditRequest> = batch.iter().collect();
        let snapshot = RoundSnapshot {
            round,
            n_requests: batch.len(),
            batch_efficacy: top1_rate(model, &this).map_err(|e| wrap(e.into()))?,
            cumulative_efficacy: top1_rate(model, &done).map_err(|e| wrap(e.into()))?,
        };
        log::info!(
            "round {round}: batch efficacy {:.3}, cumulative {:.3}",
            snapshot.batch_efficacy,
            snapshot.cumulative_efficacy
        );
        out.push(RoundOutcome { outcome, snapshot });
    }
    Ok(out)
}
