//! Incremental decoding with a key/value cache.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::forward::{gelu, layer_norm, linear, softmax};
use super::kernels::dot;
use super::params::ModelParams;
use super::{LmError, EOS};
use crate::float::{sqrt, Float};
use crate::rng::{stream, stream_rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Highest-probability token, lowest id on ties.
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Temperature(Float),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub mode: DecodeMode,
    /// Token that ends generation besides EOS, typically a newline.
    pub stop_token: Option<u32>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            mode: DecodeMode::Greedy,
            stop_token: None,
            seed: 0,
        }
    }
}

struct Decoder<'a> {
    params: &'a ModelParams,
    keys: Vec<Vec<Float>>,
    values: Vec<Vec<Float>>,
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(params: &'a ModelParams) -> Self {
        let n = params.blocks.len();
        Self {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            pos: 0,
        }
    }

    /// Feeds one token and returns the logits for the next position.
    fn step(&mut self, token: u32) -> Vec<Float> {
        let p = self.params;
        let c = &p.config;
        let d = c.d_model;
        let hd = c.head_dim();
        let scale = 1.0 / sqrt(hd as Float);
        let t = token as usize;
        let mut x: Vec<Float> = p.token_embedding[t * d..(t + 1) * d]
            .iter()
            .zip(&p.position_embedding[self.pos * d..(self.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        for (l, b) in p.blocks.iter().enumerate() {
            let (h, _) = layer_norm(&x, &b.ln1);
            let q = linear(&h, &b.query);
            self.keys[l].extend(linear(&h, &b.key));
            self.values[l].extend(linear(&h, &b.value));
            let n = self.pos + 1;
            let mut o = vec![0.0; d];
            let mut att = vec![0.0; n];
            for head in 0..c.n_heads {
                let off = head * hd;
                for (j, s) in att.iter_mut().enumerate() {
                    *s = dot(&q[off..off + hd], &self.keys[l][j * d + off..j * d + off + hd]) * scale;
                }
                softmax(&mut att);
                for (j, &a) in att.iter().enumerate() {
                    for (oc, vc) in o[off..off + hd]
                        .iter_mut()
                        .zip(&self.values[l][j * d + off..j * d + off + hd])
                    {
                        *oc += a * vc;
                    }
                }
            }
            for (xi, y) in x.iter_mut().zip(linear(&o, &b.out)) {
                *xi += y;
            }
            let (h2, _) = layer_norm(&x, &b.ln2);
            let g: Vec<Float> = linear(&h2, &b.fc_in).into_iter().map(gelu).collect();
            for (xi, y) in x.iter_mut().zip(linear(&g, &b.fc_out)) {
                *xi += y;
            }
        }
        self.pos += 1;
        let (hf, _) = layer_norm(&x, &p.ln_final);
        linear(&hf, &p.head)
    }
}

fn argmax(row: &[Float]) -> usize {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best
}

/// Continues `prompt` until EOS, the stop token, or `max_new_tokens`. The
/// returned tokens exclude the one that stopped generation. The prompt loses
/// tokens from its head so that prompt and continuation fit the context.
pub fn generate(params: &ModelParams, prompt: &[u32], cfg: &GenerationConfig) -> Result<Vec<u32>, LmError> {
    generate_constrained(params, prompt, cfg, |_, _| {})
}

/// Like [`generate`], but `mask` sees the tokens generated so far and may
/// set logits to negative infinity to forbid them. A step where every
/// token is forbidden ends generation.
pub fn generate_constrained(
    params: &ModelParams,
    prompt: &[u32],
    cfg: &GenerationConfig,
    mut mask: impl FnMut(&[u32], &mut [Float]),
) -> Result<Vec<u32>, LmError> {
    let c = &params.config;
    if prompt.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    if cfg.max_new_tokens >= c.context_length {
        return Err(LmError::Config(
            "max_new_tokens must be below the context length".into(),
        ));
    }
    if let DecodeMode::Temperature(t) = cfg.mode {
        if !(t > 0.0 && t.is_finite()) {
            return Err(LmError::Config("temperature must be positive".into()));
        }
    }
    if let Some(&t) = prompt.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(LmError::UnknownToken(t));
    }
    // The last generated token is never fed back, hence the +1.
    let keep = prompt.len().min(c.context_length + 1 - cfg.max_new_tokens.max(1));
    let prompt = &prompt[prompt.len() - keep..];

    let mut rng = stream_rng(cfg.seed, stream::SAMPLE);
    let mut dec = Decoder::new(params);
    let mut logits = Vec::new();
    for &t in prompt {
        logits = dec.step(t);
    }
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens {
        mask(&out, &mut logits);
        if logits.iter().all(|z| *z == Float::NEG_INFINITY) {
            break;
        }
        let next = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Temperature(temp) => {
                for z in logits.iter_mut() {
                    *z /= temp;
                }
                softmax(&mut logits);
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = logits.len() - 1;
                for (i, &p) in logits.iter().enumerate() {
                    acc += p as f64;
                    if r < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        } as u32;
        if next == EOS || Some(next) == cfg.stop_token {
            break;
        }
        out.push(next);
        if out.len() < cfg.max_new_tokens {
            logits = dec.step(next);
        }
    }
    Ok(out)
}
