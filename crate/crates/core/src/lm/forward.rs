//! Full-sequence forward pass and its hand-derived backward pass.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{add_rows, dot, matmul, matmul_at, matmul_bt, sum_rows};
use super::params::{Block, LayerNorm, Linear, ModelParams};
use super::LmError;
use crate::float::{exp, ln, sqrt, tanh, Float};

pub(crate) const LN_EPS: Float = 1e-5;
const GELU_C: Float = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: Float = 0.044_715;

/// A prompt followed by the tokens the model is scored on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub prompt: Vec<u32>,
    pub label: Vec<u32>,
}

impl Sequence {
    pub fn new(prompt: Vec<u32>, label: Vec<u32>) -> Self {
        Self { prompt, label }
    }

    /// Model input for a context of `context` tokens and the row predicting
    /// the first label token. The prompt loses tokens from its head when the
    /// pair does not fit; the label is never cut.
    pub fn window(&self, context: usize) -> Result<(Vec<u32>, usize), LmError> {
        if self.prompt.is_empty() {
            return Err(LmError::EmptyPrompt);
        }
        let n = self.label.len();
        if n == 0 {
            return Err(LmError::Shape("label must contain at least one token".into()));
        }
        if n > context {
            return Err(LmError::LabelTooLong { label: n, context });
        }
        let keep = self.prompt.len().min(context + 1 - n);
        let mut input = Vec::with_capacity(keep + n - 1);
        input.extend_from_slice(&self.prompt[self.prompt.len() - keep..]);
        input.extend_from_slice(&self.label[..n - 1]);
        Ok((input, keep - 1))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Vec<Float>,
    rstd: Vec<Float>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    ln1: LnCache,
    h1: Vec<Float>,
    q: Vec<Float>,
    k: Vec<Float>,
    v: Vec<Float>,
    /// `heads x T x T`, zero above the diagonal.
    att: Vec<Float>,
    o: Vec<Float>,
    ln2: LnCache,
    h2: Vec<Float>,
    u: Vec<Float>,
    g: Vec<Float>,
}

#[derive(Clone, Debug)]
struct LabelCache {
    first_row: usize,
    labels: Vec<u32>,
    /// `n_labels x vocab` softmax rows.
    probs: Vec<Float>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Final normalised hidden states, `T x d_model`.
    hf: Vec<Float>,
    label: Option<LabelCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Final hidden state rows, `T x d_model`.
    pub fn hidden(&self) -> &[Float] {
        &self.hf
    }
}

pub(crate) fn layer_norm(x: &[Float], p: &LayerNorm) -> (Vec<Float>, LnCache) {
    let d = p.gain.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<Float>() / d as Float;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Float>() / d as Float;
        let rs = 1.0 / sqrt(var + LN_EPS);
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = xh * p.gain[c] + p.bias[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &[Float], cache: &LnCache, p: &LayerNorm, grad: &mut LayerNorm, dx: &mut [Float]) {
    let d = p.gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for c in 0..d {
            grad.gain[c] += dyr[c] * xh[c];
            grad.bias[c] += dyr[c];
            dxhat[c] = dyr[c] * p.gain[c];
        }
        let mean_dxhat = dxhat.iter().sum::<Float>() / d as Float;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as Float;
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

pub(crate) fn linear(x: &[Float], l: &Linear) -> Vec<Float> {
    let rows = x.len() / l.d_in;
    let mut y = vec![0.0; rows * l.d_out];
    matmul(x, &l.weight, rows, l.d_in, l.d_out, &mut y);
    add_rows(&mut y, &l.bias);
    y
}

fn linear_backward(x: &[Float], dy: &[Float], l: &Linear, grad: &mut Linear, dx: &mut [Float]) {
    let rows = x.len() / l.d_in;
    matmul_at(x, dy, rows, l.d_in, l.d_out, &mut grad.weight);
    sum_rows(dy, &mut grad.bias);
    matmul_bt(dy, &l.weight, rows, l.d_out, l.d_in, dx);
}

pub(crate) fn gelu(u: Float) -> Float {
    0.5 * u * (1.0 + tanh(GELU_C * (u + GELU_K * u * u * u)))
}

fn gelu_grad(u: Float) -> Float {
    let t = tanh(GELU_C * (u + GELU_K * u * u * u));
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = exp(*v - max);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn check_tokens(params: &ModelParams, tokens: &[u32]) -> Result<(), LmError> {
    let c = &params.config;
    if tokens.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    if tokens.len() > c.context_length {
        return Err(LmError::Shape(alloc::format!(
            "{} tokens exceed the context of {}",
            tokens.len(),
            c.context_length
        )));
    }
    match tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        Some(&t) => Err(LmError::UnknownToken(t)),
        None => Ok(()),
    }
}

fn block_forward(b: &Block, x: &[Float], t: usize, n_heads: usize) -> (Vec<Float>, LayerCache) {
    let d = b.query.d_in;
    let hd = d / n_heads;
    let scale = 1.0 / sqrt(hd as Float);
    let (h1, ln1) = layer_norm(x, &b.ln1);
    let q = linear(&h1, &b.query);
    let k = linear(&h1, &b.key);
    let v = linear(&h1, &b.value);
    let mut att = vec![0.0; n_heads * t * t];
    let mut o = vec![0.0; t * d];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..t {
            let row = &mut att[(h * t + i) * t..(h * t + i) * t + i + 1];
            let qi = &q[i * d + off..i * d + off + hd];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
            }
            softmax(row);
            let oi = &mut o[i * d + off..i * d + off + hd];
            for (j, &a) in row.iter().enumerate() {
                for (oc, vc) in oi.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                    *oc += a * vc;
                }
            }
        }
    }
    let mut x_mid = linear(&o, &b.out);
    for (m, xi) in x_mid.iter_mut().zip(x) {
        *m += xi;
    }
    let (h2, ln2) = layer_norm(&x_mid, &b.ln2);
    let u = linear(&h2, &b.fc_in);
    let g: Vec<Float> = u.iter().map(|&z| gelu(z)).collect();
    let mut x_out = linear(&g, &b.fc_out);
    for (m, xi) in x_out.iter_mut().zip(&x_mid) {
        *m += xi;
    }
    let cache = LayerCache {
        ln1,
        h1,
        q,
        k,
        v,
        att,
        o,
        ln2,
        h2,
        u,
        g,
    };
    (x_out, cache)
}

/// Runs every position of `tokens` through the network and keeps the
/// activations needed by [`backward`].
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<ForwardCache, LmError> {
    check_tokens(params, tokens)?;
    let c = &params.config;
    let d = c.d_model;
    let t = tokens.len();
    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let te = &params.token_embedding[tok as usize * d..(tok as usize + 1) * d];
        let pe = &params.position_embedding[i * d..(i + 1) * d];
        for ((xc, a), b) in x[i * d..(i + 1) * d].iter_mut().zip(te).zip(pe) {
            *xc = a + b;
        }
    }
    let mut layers = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (next, cache) = block_forward(b, &x, t, c.n_heads);
        layers.push(cache);
        x = next;
    }
    let (hf, lnf) = layer_norm(&x, &params.ln_final);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        lnf,
        hf,
        label: None,
    })
}

/// Logits for every position, `T x vocab`.
pub fn forward_logits(params: &ModelParams, tokens: &[u32]) -> Result<Vec<Float>, LmError> {
    let cache = forward(params, tokens)?;
    Ok(linear(&cache.hf, &params.head))
}

/// Log-probability of each label token given everything before it, after
/// fitting the sequence into the context window.
pub fn forward_logprobs(params: &ModelParams, seq: &Sequence) -> Result<(Vec<Float>, ForwardCache), LmError> {
    let (input, first_row) = seq.window(params.config.context_length)?;
    if let Some(&t) = seq.label.iter().find(|&&t| t as usize >= params.config.vocab_size) {
        return Err(LmError::UnknownToken(t));
    }
    let mut cache = forward(params, &input)?;
    let d = params.config.d_model;
    let n = seq.label.len();
    let rows = &cache.hf[first_row * d..(first_row + n) * d];
    let mut probs = linear(rows, &params.head);
    let v = params.config.vocab_size;
    let mut logprobs = Vec::with_capacity(n);
    for (j, row) in probs.chunks_exact_mut(v).enumerate() {
        let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
        let lse = max + ln(row.iter().map(|&z| exp(z - max)).sum::<Float>());
        logprobs.push(row[seq.label[j] as usize] - lse);
        for z in row.iter_mut() {
            *z = exp(*z - lse);
        }
    }
    cache.label = Some(LabelCache {
        first_row,
        labels: seq.label.clone(),
        probs,
    });
    Ok((logprobs, cache))
}

/// Accumulates into `grad` the gradient of `Σ_j coeffs[j] · logprob_j` with
/// respect to every parameter, where the log-probabilities are the ones
/// returned by [`forward_logprobs`] for `cache`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    coeffs: &[Float],
    grad: &mut ModelParams,
) -> Result<(), LmError> {
    let label = cache
        .label
        .as_ref()
        .ok_or_else(|| LmError::Shape("cache holds no label log-probabilities".into()))?;
    if coeffs.len() != label.labels.len() {
        return Err(LmError::Shape(alloc::format!(
            "{} coefficients for {} label tokens",
            coeffs.len(),
            label.labels.len()
        )));
    }
    let c = &params.config;
    let (d, v, t, nh) = (c.d_model, c.vocab_size, cache.len(), c.n_heads);
    let hd = d / nh;
    let scale = 1.0 / sqrt(hd as Float);
    let n = label.labels.len();

    // d logp(y) / d logits = onehot(y) - p
    let mut dlogits = vec![0.0; n * v];
    for j in 0..n {
        let row = &mut dlogits[j * v..(j + 1) * v];
        for (z, p) in row.iter_mut().zip(&label.probs[j * v..(j + 1) * v]) {
            *z = -coeffs[j] * p;
        }
        row[label.labels[j] as usize] += coeffs[j];
    }
    let mut dhf = vec![0.0; t * d];
    let rows = label.first_row * d..(label.first_row + n) * d;
    linear_backward(
        &cache.hf[rows.clone()],
        &dlogits,
        &params.head,
        &mut grad.head,
        &mut dhf[rows],
    );

    let mut dx = vec![0.0; t * d];
    layer_norm_backward(&dhf, &cache.lnf, &params.ln_final, &mut grad.ln_final, &mut dx);

    for ((b, lc), gb) in params
        .blocks
        .iter()
        .zip(&cache.layers)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        // MLP branch
        let mut dg = vec![0.0; t * c.d_ff()];
        linear_backward(&lc.g, &dx, &b.fc_out, &mut gb.fc_out, &mut dg);
        for (z, &u) in dg.iter_mut().zip(&lc.u) {
            *z *= gelu_grad(u);
        }
        let mut dh2 = vec![0.0; t * d];
        linear_backward(&lc.h2, &dg, &b.fc_in, &mut gb.fc_in, &mut dh2);
        layer_norm_backward(&dh2, &lc.ln2, &b.ln2, &mut gb.ln2, &mut dx);

        // attention branch
        let mut d_o = vec![0.0; t * d];
        linear_backward(&lc.o, &dx, &b.out, &mut gb.out, &mut d_o);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut da = vec![0.0; t];
        for h in 0..nh {
            let off = h * hd;
            for i in 0..t {
                let a = &lc.att[(h * t + i) * t..(h * t + i) * t + i + 1];
                let doi = &d_o[i * d + off..i * d + off + hd];
                let mut weighted = 0.0;
                for j in 0..=i {
                    da[j] = dot(doi, &lc.v[j * d + off..j * d + off + hd]);
                    weighted += a[j] * da[j];
                    for (g, x) in dv[j * d + off..j * d + off + hd].iter_mut().zip(doi) {
                        *g += a[j] * x;
                    }
                }
                for j in 0..=i {
                    let ds = a[j] * (da[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..hd {
                        dq[i * d + off + c] += ds * lc.k[j * d + off + c];
                        dk[j * d + off + c] += ds * lc.q[i * d + off + c];
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; t * d];
        linear_backward(&lc.h1, &dq, &b.query, &mut gb.query, &mut dh1);
        linear_backward(&lc.h1, &dk, &b.key, &mut gb.key, &mut dh1);
        linear_backward(&lc.h1, &dv, &b.value, &mut gb.value, &mut dh1);
        layer_norm_backward(&dh1, &lc.ln1, &b.ln1, &mut gb.ln1, &mut dx);
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[i * d..(i + 1) * d];
        for (g, x) in grad.token_embedding[tok as usize * d..(tok as usize + 1) * d]
            .iter_mut()
            .zip(row)
        {
            *g += x;
        }
        for (g, x) in grad.position_embedding[i * d..(i + 1) * d].iter_mut().zip(row) {
            *g += x;
        }
    }
    Ok(())
}
