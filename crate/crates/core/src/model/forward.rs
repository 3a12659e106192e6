//! Forward pass with full activation capture, and its hand-written reverse pass.
//!
//! Block structure (pre-norm):
//!
//! ```text
//! a   = Attn(LN1(h_prev))
//! u   = h_prev + a
//! key = act(W_in · LN2(u))
//! m   = W_out · key            (+ injected delta)
//! h   = u + m
//! ```
//!
//! followed by a final layer norm and the unembedding.

use super::{Activation, ModelError, Params, ToyModel};
use crate::linalg::{Matrix, Vector};

/// What the model reads: token ids or a ready-made input embedding matrix
/// (token plus positional rows, `seq × d_model`).
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    Tokens(&'a [usize]),
    Embeddings(&'a Matrix),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    FfnOutput,
}

/// Adds `delta` to the FFN output `m^layer` at `position` before the residual sum.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSpec {
    pub layer: usize,
    pub position: usize,
    pub delta: Vector,
    pub site: InjectionSite,
}

impl InjectionSpec {
    pub fn ffn_output(layer: usize, position: usize, delta: Vector) -> Self {
        Self {
            layer,
            position,
            delta,
            site: InjectionSite::FfnOutput,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    ln1_out: Matrix,
    ln1: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head causal attention probabilities, `seq × seq`.
    probs: Vec<Matrix>,
    heads_out: Matrix,
    ln2_out: Matrix,
    ln2: NormCache,
    pre_act: Matrix,
}

/// Everything recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input embedding matrix actually fed to block 0.
    pub input: Matrix,
    pub tokens: Option<Vec<usize>>,
    /// `seq × vocab`
    pub logits: Matrix,
    /// Output of each block, `h^l`.
    pub hidden: Vec<Matrix>,
    /// Attention output of each block, `a^l`.
    pub attn_out: Vec<Matrix>,
    /// FFN keys `act(W_in · LN2(h^{l-1} + a^l))`, `seq × d_ff`.
    pub keys: Vec<Matrix>,
    /// FFN outputs `W_out · key`, before any injection.
    pub ffn_out: Vec<Matrix>,
    /// Last block, last position, after the final layer norm.
    pub final_token_hidden: Vector,
    pub(crate) final_norm_out: Matrix,
    pub(crate) final_norm: NormCache,
    pub(crate) caches: Vec<LayerCache>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.input.rows()
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Gradients produced by one reverse pass. Parameter gradients are
/// accumulated into the caller's buffer instead.
pub(crate) struct Backprop {
    /// `∂L/∂m^l` for every layer (the gradient of any FFN-output injection).
    pub d_ffn_out: Vec<Matrix>,
    /// `∂L/∂input`.
    pub d_input: Matrix,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::GeluTanh => gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> (Matrix, NormCache) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let g = gain.as_slice();
    let b = bias.as_slice();
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
        }
        let o = out.row_mut(i);
        for j in 0..d {
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Returns `∂L/∂x`; accumulates gain/bias gradients when requested.
fn layer_norm_backward(
    dy: &Matrix,
    gain: &Matrix,
    cache: &NormCache,
    grads: Option<(&mut Matrix, &mut Matrix)>,
) -> Matrix {
    let (n, d) = dy.shape();
    let g = gain.as_slice();
    if let Some((dg, db)) = grads {
        let dg = dg.as_mut_slice();
        let db = db.as_mut_slice();
        for i in 0..n {
            let dyr = dy.row(i);
            let xh = cache.xhat.row(i);
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
            }
        }
    }
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        if dyr.iter().all(|&v| v == 0.0) {
            continue;
        }
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.rstd[i];
        let o = dx.row_mut(i);
        for j in 0..d {
            o[j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

impl ToyModel {
    /// Causal forward pass. Injections are applied to `m^l` before the residual sum.
    pub fn forward(
        &self,
        input: ModelInput<'_>,
        injections: &[InjectionSpec],
    ) -> Result<ForwardTrace, ModelError> {
        let (embedding, tokens) = match input {
            ModelInput::Tokens(t) => (self.embed(t)?, Some(t.to_vec())),
            ModelInput::Embeddings(e) => {
                if e.cols() != self.config.d_model {
                    return Err(ModelError::InputShape {
                        expected: self.config.d_model,
                        got: e.cols(),
                    });
                }
                (e.clone(), None)
            }
        };
        let n = embedding.rows();
        if n == 0 {
            return Err(ModelError::EmptyInput);
        }
        for inj in injections {
            if inj.layer >= self.config.n_layers || inj.position >= n {
                return Err(ModelError::InjectionOutOfRange {
                    layer: inj.layer,
                    position: inj.position,
                    n_layers: self.config.n_layers,
                    seq_len: n,
                });
            }
            if inj.delta.dim() != self.config.d_model {
                return Err(ModelError::InputShape {
                    expected: self.config.d_model,
                    got: inj.delta.dim(),
                });
            }
        }
        self.run(embedding, tokens, injections)
    }

    fn run(
        &self,
        embedding: Matrix,
        tokens: Option<Vec<usize>>,
        injections: &[InjectionSpec],
    ) -> Result<ForwardTrace, ModelError> {
        let cfg = &self.config;
        let n = embedding.rows();
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut h = embedding.clone();
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut attn_out = Vec::with_capacity(cfg.n_layers);
        let mut keys = Vec::with_capacity(cfg.n_layers);
        let mut ffn_out = Vec::with_capacity(cfg.n_layers);
        let mut caches = Vec::with_capacity(cfg.n_layers);

        for (l, lp) in self.params.layers.iter().enumerate() {
            let (ln1_out, ln1) = layer_norm(&h, &lp.ln1_gain, &lp.ln1_bias, cfg.ln_eps);
            let q = ln1_out.matmul_bt(&lp.w_q)?;
            let k = ln1_out.matmul_bt(&lp.w_k)?;
            let v = ln1_out.matmul_bt(&lp.w_v)?;
            let mut heads_out = Matrix::zeros(n, d);
            let mut probs = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let c0 = head * dh;
                let mut p = Matrix::zeros(n, n);
                for i in 0..n {
                    let qi = &q.row(i)[c0..c0 + dh];
                    let row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let s = scale * crate::linalg::dot(qi, &k.row(j)[c0..c0 + dh]);
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for x in row.iter_mut().take(i + 1) {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut().take(i + 1) {
                        *x /= sum;
                    }
                }
                for i in 0..n {
                    let out = &mut heads_out.row_mut(i)[c0..c0 + dh];
                    for j in 0..=i {
                        let pij = p[(i, j)];
                        let vj = &v.row(j)[c0..c0 + dh];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += pij * vv;
                        }
                    }
                }
                probs.push(p);
            }
            let a = heads_out.matmul_bt(&lp.w_o)?;
            let mut u = h;
            u.add_assign(&a)?;
            let (ln2_out, ln2) = layer_norm(&u, &lp.ln2_gain, &lp.ln2_bias, cfg.ln_eps);
            let pre_act = ln2_out.matmul_bt(&lp.w_in)?;
            let mut key = pre_act.clone();
            for x in key.as_mut_slice() {
                *x = cfg.activation.apply(*x);
            }
            let m = key.matmul_bt(&lp.w_out)?;
            let mut h_next = u;
            h_next.add_assign(&m)?;
            for inj in injections.iter().filter(|i| i.layer == l) {
                for (x, dx) in h_next.row_mut(inj.position).iter_mut().zip(inj.delta.iter()) {
                    *x += dx;
                }
            }
            hidden.push(h_next.clone());
            attn_out.push(a);
            keys.push(key);
            ffn_out.push(m);
            caches.push(LayerCache {
                ln1_out,
                ln1,
                q,
                k,
                v,
                probs,
                heads_out,
                ln2_out,
                ln2,
                pre_act,
            });
            h = h_next;
        }

        let (final_norm_out, final_norm) = layer_norm(
            &h,
            &self.params.final_gain,
            &self.params.final_bias,
            cfg.ln_eps,
        );
        let logits = final_norm_out.matmul_bt(&self.params.unembedding)?;
        if !logits.is_finite() {
            return Err(ModelError::NonFinite("forward logits"));
        }
        let final_token_hidden = final_norm_out.row_vector(n - 1);
        Ok(ForwardTrace {
            input: embedding,
            tokens,
            logits,
            hidden,
            attn_out,
            keys,
            ffn_out,
            final_token_hidden,
            final_norm_out,
            final_norm,
            caches,
        })
    }

    /// Reverse pass for a loss whose gradient with respect to the logits is `d_logits`.
    pub(crate) fn backward(
        &self,
        trace: &ForwardTrace,
        d_logits: &Matrix,
        mut grads: Option<&mut Params>,
    ) -> Result<Backprop, ModelError> {
        let cfg = &self.config;
        let n = trace.seq_len();
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        if let Some(g) = grads.as_deref_mut() {
            d_logits.accumulate_at(&trace.final_norm_out, &mut g.unembedding);
        }
        let d_final = d_logits.matmul(&self.params.unembedding)?;
        let mut dh_cur = match grads.as_deref_mut() {
            Some(g) => layer_norm_backward(
                &d_final,
                &self.params.final_gain,
                &trace.final_norm,
                Some((&mut g.final_gain, &mut g.final_bias)),
            ),
            None => layer_norm_backward(&d_final, &self.params.final_gain, &trace.final_norm, None),
        };

        let mut d_ffn_out = vec![Matrix::zeros(0, 0); cfg.n_layers];
        for l in (0..cfg.n_layers).rev() {
            let lp = &self.params.layers[l];
            let cache = &trace.caches[l];
            let key = &trace.keys[l];
            let mut lg = grads.as_deref_mut().map(|g| &mut g.layers[l]);

            // h = u + m
            let dm = dh_cur.clone();
            let mut du = dh_cur;

            if let Some(g) = lg.as_deref_mut() {
                dm.accumulate_at(key, &mut g.w_out);
            }
            let mut dz = dm.matmul(&lp.w_out)?;
            for (g, &z) in dz.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
                *g *= cfg.activation.derivative(z);
            }
            if let Some(g) = lg.as_deref_mut() {
                dz.accumulate_at(&cache.ln2_out, &mut g.w_in);
            }
            let d_ln2 = dz.matmul(&lp.w_in)?;
            let du_norm = match lg.as_deref_mut() {
                Some(g) => layer_norm_backward(
                    &d_ln2,
                    &lp.ln2_gain,
                    &cache.ln2,
                    Some((&mut g.ln2_gain, &mut g.ln2_bias)),
                ),
                None => layer_norm_backward(&d_ln2, &lp.ln2_gain, &cache.ln2, None),
            };
            du.add_assign(&du_norm)?;
            d_ffn_out[l] = dm;

            // u = h_prev + a
            let da = &du;
            if let Some(g) = lg.as_deref_mut() {
                da.accumulate_at(&cache.heads_out, &mut g.w_o);
            }
            let d_heads = da.matmul(&lp.w_o)?;
            let mut dq = Matrix::zeros(n, d);
            let mut dk = Matrix::zeros(n, d);
            let mut dv = Matrix::zeros(n, d);
            let mut dp = vec![0.0; n];
            for head in 0..n_heads {
                let c0 = head * dh;
                let p = &cache.probs[head];
                for i in 0..n {
                    let doi = &d_heads.row(i)[c0..c0 + dh];
                    if doi.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let mut dot_pdp = 0.0;
                    for j in 0..=i {
                        let vj = &cache.v.row(j)[c0..c0 + dh];
                        dp[j] = crate::linalg::dot(doi, vj);
                        dot_pdp += p[(i, j)] * dp[j];
                        let pij = p[(i, j)];
                        let dvj = &mut dv.row_mut(j)[c0..c0 + dh];
                        for (t, &g) in dvj.iter_mut().zip(doi) {
                            *t += pij * g;
                        }
                    }
                    for j in 0..=i {
                        let ds = p[(i, j)] * (dp[j] - dot_pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.row(j)[c0..c0 + dh];
                        let dqi = &mut dq.row_mut(i)[c0..c0 + dh];
                        for (t, &kk) in dqi.iter_mut().zip(kj) {
                            *t += ds * kk;
                        }
                        let qi = &cache.q.row(i)[c0..c0 + dh];
                        let dkj = &mut dk.row_mut(j)[c0..c0 + dh];
                        for (t, &qq) in dkj.iter_mut().zip(qi) {
                            *t += ds * qq;
                        }
                    }
                }
            }
            if let Some(g) = lg.as_deref_mut() {
                dq.accumulate_at(&cache.ln1_out, &mut g.w_q);
                dk.accumulate_at(&cache.ln1_out, &mut g.w_k);
                dv.accumulate_at(&cache.ln1_out, &mut g.w_v);
            }
            let mut d_ln1 = dq.matmul(&lp.w_q)?;
            d_ln1.add_assign(&dk.matmul(&lp.w_k)?)?;
            d_ln1.add_assign(&dv.matmul(&lp.w_v)?)?;
            let dh_norm = match lg {
                Some(g) => layer_norm_backward(
                    &d_ln1,
                    &lp.ln1_gain,
                    &cache.ln1,
                    Some((&mut g.ln1_gain, &mut g.ln1_bias)),
                ),
                None => layer_norm_backward(&d_ln1, &lp.ln1_gain, &cache.ln1, None),
            };
            du.add_assign(&dh_norm)?;
            dh_cur = du;
        }

        if let (Some(g), Some(tokens)) = (grads, trace.tokens.as_ref()) {
            for (i, &t) in tokens.iter().enumerate() {
                let src = dh_cur.row(i);
                for (dst, &s) in g.token_embedding.row_mut(t).iter_mut().zip(src) {
                    *dst += s;
                }
                for (dst, &s) in g.positional_embedding.row_mut(i).iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }

        Ok(Backprop {
            d_ffn_out,
            d_input: dh_cur,
        })
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}
